#include "skeldiff/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "skeldiff/error.hpp"

namespace skeldiff {

using nlohmann::json;

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", 0, "seed for splits, initialization, training and sampling"},
      {"data.manifest", "", "JSON-lines manifest of clips (path, style, dataset, split)"},
      {"data.toe_names", json::array({"LeftToe_End", "RightToe_End", "LeftToeBase_End", "RightToeBase_End"}),
       "leaf joints treated as toes; names absent from a skeleton are skipped"},
      {"data.scale", 1.0, "multiplier applied to BVH offsets and positions (e.g. 0.01 for cm)"},
      {"data.normalize_root", true, "min-max normalize root positions to [-1, 1]"},
      {"data.balance_styles", true, "sample windows inversely to their style frequency"},
      {"data.stride", 14, "frame stride between training windows"},
      {"data.contact_height", 0.05, "toe height below which a frame may be a contact (m)"},
      {"data.contact_speed", 0.01, "toe speed below which a frame may be a contact (m/frame)"},
      {"model.base_channels", 64, "channels at the outermost level; doubled per level"},
      {"model.heads", 4, "attention heads"},
      {"model.groupnorm_groups", 8, "group normalization groups"},
      {"model.style_embed_dim", 64, "style embedding width"},
      {"model.time_embed_dim", 64, "diffusion-step embedding width"},
      {"model.trajectory_embed_dim", 64, "trajectory token width"},
      {"model.F", 56, "frames generated per window"},
      {"model.F_past", 8, "context frames per window"},
      {"model.max_depth", 32, "largest supported joint depth"},
      {"model.positional_encoding", true, "add frame and joint-depth encodings"},
      {"model.merged_attention", false, "single attention over frames and joints instead of two"},
      {"diffusion.kind", "cosine", "noise schedule: cosine or linear"},
      {"diffusion.train_steps", 50, "diffusion steps T"},
      {"diffusion.infer_steps", 4, "DDIM sampling steps"},
      {"diffusion.cfg_scale", 2.5, "classifier-free guidance scale (1 disables)"},
      {"loss.w_d", 1.0, "weight of the denoising loss"},
      {"loss.w_av", 1.0, "weight of the rotation velocity loss"},
      {"loss.w_gp", 1.0, "weight of the global position loss"},
      {"loss.w_vgp", 1.0, "weight of the global velocity loss"},
      {"loss.w_foot", 1.0, "weight of the foot contact loss"},
      {"optim.steps", 1000, "optimizer steps"},
      {"optim.batch_size", 8, "windows per batch"},
      {"optim.lr", 1e-4, "initial learning rate"},
      {"optim.lr_decay", 0.9999, "multiplicative learning-rate decay per step"},
      {"optim.p_style_drop", 0.1, "probability of replacing the style with the null embedding"},
      {"optim.p_past_drop", 0.5, "probability of dropping the context frames"},
      {"optim.log_every", 50, "steps between log lines"},
      {"optim.checkpoint_every", 0, "steps between intermediate checkpoints (0 disables)"},
      {"augment.p_smooth", 0.5, "probability of Gaussian-smoothing the trajectory"},
      {"augment.p_rotate", 0.5, "probability of a random yaw rotation"},
      {"augment.sigma", 2.0, "Gaussian smoothing width in frames"},
      {"metrics.penetration_epsilon", 0.005, "depth below ground counted as penetration (m)"},
      {"metrics.sliding_height", 0.01, "toe height below which travel counts as sliding (m)"},
      {"metrics.classifier_hidden", 64, "feature width of the FID classifier"},
      {"metrics.classifier_window", 32, "frames per classifier window"},
      {"metrics.classifier_steps", 300, "classifier training steps"},
      {"metrics.classifier_lr", 1e-3, "classifier learning rate"},
  };
  return keys;
}

std::string env_name(const std::string& key) {
  std::string out = kEnvPrefix;
  for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

namespace {

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

bool compatible(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  return false;
}

void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j;
  }
}

struct TomlReader {
  const std::string& s;
  std::size_t pos = 0;
  int line = 1;

  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(line, "TOML: " + msg); }

  void skip_space() {
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
  }
  void skip_space_lines() {
    while (pos < s.size()) {
      if (s[pos] == ' ' || s[pos] == '\t' || s[pos] == '\r') {
        ++pos;
      } else if (s[pos] == '\n') {
        ++pos;
        ++line;
      } else if (s[pos] == '#') {
        while (pos < s.size() && s[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }
  void end_of_line() {
    skip_space();
    if (pos < s.size() && s[pos] == '#')
      while (pos < s.size() && s[pos] != '\n') ++pos;
    if (pos < s.size() && s[pos] == '\r') ++pos;
    if (pos < s.size() && s[pos] != '\n') fail("unexpected text after value");
  }
  std::string bare_key() {
    std::string k;
    while (pos < s.size() && (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_' || s[pos] == '-' ||
                              s[pos] == '.')) {
      k += s[pos++];
    }
    if (k.empty()) fail("expected a key");
    return k;
  }
  std::string quoted() {
    const char q = s[pos++];
    std::string out;
    while (pos < s.size() && s[pos] != q) {
      if (s[pos] == '\n') fail("unterminated string");
      if (q == '"' && s[pos] == '\\' && pos + 1 < s.size()) {
        const char e = s[++pos];
        out += e == 'n' ? '\n' : e == 't' ? '\t' : e;
        ++pos;
        continue;
      }
      out += s[pos++];
    }
    if (pos >= s.size()) fail("unterminated string");
    ++pos;
    return out;
  }
  json value() {
    skip_space();
    if (pos >= s.size()) fail("missing value");
    const char c = s[pos];
    if (c == '"' || c == '\'') return quoted();
    if (c == '[') {
      ++pos;
      json arr = json::array();
      skip_space_lines();
      while (pos < s.size() && s[pos] != ']') {
        arr.push_back(value());
        skip_space_lines();
        if (pos < s.size() && s[pos] == ',') {
          ++pos;
          skip_space_lines();
        }
      }
      if (pos >= s.size()) fail("unterminated array");
      ++pos;
      return arr;
    }
    std::string tok;
    while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos])) && s[pos] != ',' && s[pos] != ']' &&
           s[pos] != '#') {
      tok += s[pos++];
    }
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string digits;
    for (char d : tok)
      if (d != '_') digits += d;
    try {
      std::size_t used = 0;
      if (digits.find_first_of(".eE") == std::string::npos) {
        const long long v = std::stoll(digits, &used);
        if (used == digits.size()) return v;
      } else {
        const double v = std::stod(digits, &used);
        if (used == digits.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("unsupported value '" + tok + "'");
  }
};

}  // namespace

json parse_toml(const std::string& text) {
  TomlReader r{text};
  json out = json::object();
  std::string table;
  while (true) {
    r.skip_space_lines();
    if (r.pos >= text.size()) break;
    if (text[r.pos] == '[') {
      ++r.pos;
      r.skip_space();
      table = r.bare_key();
      r.skip_space();
      if (r.pos >= text.size() || text[r.pos] != ']') r.fail("expected ']'");
      ++r.pos;
      r.end_of_line();
      continue;
    }
    std::string key = text[r.pos] == '"' ? r.quoted() : r.bare_key();
    r.skip_space();
    if (r.pos >= text.size() || text[r.pos] != '=') r.fail("expected '=' after key " + key);
    ++r.pos;
    json v = r.value();
    r.end_of_line();
    const std::string full = table.empty() ? key : table + "." + key;
    if (out.contains(full)) r.fail("duplicate key " + full);
    out[full] = std::move(v);
  }
  return out;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

void RunConfig::set_value(const std::string& key, const json& value) {
  const ConfigKey* k = find_key(key);
  if (!k) throw ConfigError("unknown config key '" + key + "' (see --help for the list)");
  if (!compatible(k->default_value, value)) {
    throw ConfigError("config key '" + key + "' expects a value like " + k->default_value.dump() + ", got " +
                      value.dump());
  }
  values_[key] = k->default_value.is_number_integer() && value.is_number_float()
                     ? json(static_cast<long long>(value.get<double>()))
                     : value;
}

void RunConfig::merge_json(const json& values) {
  std::map<std::string, json> flat;
  flatten(values, "", flat);
  for (const auto& [k, v] : flat) set_value(k, v);
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string ext = path.extension().string();
  if (ext == ".toml") {
    merge_json(parse_toml(ss.str()));
  } else if (ext == ".json") {
    try {
      merge_json(json::parse(ss.str()));
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + path.string() + ": " + e.what());
    }
  } else {
    throw ConfigError("config file must end in .json or .toml: " + path.string());
  }
}

void RunConfig::apply_environment(const std::function<const char*(const char*)>& getenv_fn) {
  for (const auto& k : config_keys()) {
    if (const char* v = getenv_fn(env_name(k.name).c_str())) set(k.name, v);
  }
}

void RunConfig::set(const std::string& key, const std::string& text) {
  const ConfigKey* k = find_key(key);
  if (!k) throw ConfigError("unknown config key '" + key + "' (see --help for the list)");
  json v;
  try {
    v = json::parse(text);
  } catch (const json::parse_error&) {
    if (!k->default_value.is_string()) throw ConfigError("cannot parse value '" + text + "' for " + key);
    v = text;
  }
  if (k->default_value.is_string() && !v.is_string()) v = text;
  set_value(key, v);
}

const json& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

json RunConfig::to_json() const {
  json out = json::object();
  for (const auto& [k, v] : values_) out[k] = v;
  return out;
}

DenoiserConfig RunConfig::model_config(int style_count) const {
  DenoiserConfig c;
  c.base_channels = get_int("model.base_channels");
  c.heads = get_int("model.heads");
  c.groupnorm_groups = get_int("model.groupnorm_groups");
  c.style_count = style_count;
  c.style_embed_dim = get_int("model.style_embed_dim");
  c.time_embed_dim = get_int("model.time_embed_dim");
  c.trajectory_embed_dim = get_int("model.trajectory_embed_dim");
  c.frames = get_int("model.F");
  c.past_frames = get_int("model.F_past");
  c.max_depth = get_int("model.max_depth");
  c.positional_encoding = get_bool("model.positional_encoding");
  c.merged_attention = get_bool("model.merged_attention");
  c.validate();
  return c;
}

TrainingConfig RunConfig::training_config() const {
  TrainingConfig c;
  c.steps = get_int("optim.steps");
  c.batch_size = get_int("optim.batch_size");
  c.learning_rate = get_double("optim.lr");
  c.lr_decay = get_double("optim.lr_decay");
  c.dropout.style = get_double("optim.p_style_drop");
  c.dropout.past = get_double("optim.p_past_drop");
  c.weights.diffusion = get_double("loss.w_d");
  c.weights.angular_velocity = get_double("loss.w_av");
  c.weights.global_position = get_double("loss.w_gp");
  c.weights.global_velocity = get_double("loss.w_vgp");
  c.weights.foot_contact = get_double("loss.w_foot");
  c.augment.p_smooth = get_double("augment.p_smooth");
  c.augment.p_rotate = get_double("augment.p_rotate");
  c.augment.sigma = get_double("augment.sigma");
  c.balance_styles = get_bool("data.balance_styles");
  c.log_every = get_int("optim.log_every");
  c.checkpoint_every = get_int("optim.checkpoint_every");
  c.validate();
  return c;
}

WindowSpec RunConfig::window_spec() const {
  return {get_int("model.F"), get_int("model.F_past"), get_int("data.stride")};
}

ContactThresholds RunConfig::contact_thresholds() const {
  return {get_double("data.contact_height"), get_double("data.contact_speed")};
}

BvhOptions RunConfig::bvh_options() const {
  BvhOptions o;
  o.scale = get_double("data.scale");
  o.toe_names = get("data.toe_names").get<std::vector<std::string>>();
  return o;
}

DatasetOptions RunConfig::dataset_options() const {
  DatasetOptions o;
  o.bvh = bvh_options();
  o.seed = seed();
  o.normalize_root = get_bool("data.normalize_root");
  return o;
}

DiffusionSchedule RunConfig::schedule() const {
  return make_schedule(parse_schedule_kind(get_string("diffusion.kind")), get_int("diffusion.train_steps"));
}

SamplerSettings RunConfig::sampler_settings() const {
  SamplerSettings s;
  s.ddim_steps = get_int("diffusion.infer_steps");
  s.guidance.scale = get_double("diffusion.cfg_scale");
  return s;
}

FootMetricConfig RunConfig::foot_metric_config() const {
  FootMetricConfig c;
  c.penetration_epsilon = get_double("metrics.penetration_epsilon");
  c.sliding_height = get_double("metrics.sliding_height");
  return c;
}

ClassifierConfig RunConfig::classifier_config() const {
  ClassifierConfig c;
  c.hidden = get_int("metrics.classifier_hidden");
  c.window = get_int("metrics.classifier_window");
  c.steps = get_int("metrics.classifier_steps");
  c.learning_rate = get_double("metrics.classifier_lr");
  c.seed = seed();
  return c;
}

std::string config_help() {
  std::ostringstream s;
  s << "Configuration keys (file, " << kEnvPrefix << "* environment variables, or --set key=value):\n";
  for (const auto& k : config_keys()) {
    s << "  " << k.name << " = " << k.default_value.dump() << "\n      " << k.help << "  [env " << env_name(k.name)
      << "]\n";
  }
  return s.str();
}

}  // namespace skeldiff
