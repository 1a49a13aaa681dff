#include "skeldiff/commands.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "skeldiff/bvh.hpp"
#include "skeldiff/checkpoint.hpp"
#include "skeldiff/error.hpp"

namespace skeldiff {

using nlohmann::json;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

std::vector<fs::path> expand_bvh_paths(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> out;
  for (const auto& p : inputs) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().extension() == ".bvh") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(p);
    }
  }
  return out;
}

int resolve_skeleton(const CheckpointMeta& meta, const std::string& name) {
  if (name.empty()) {
    if (meta.topologies.size() == 1) return 0;
    throw ConfigError("checkpoint holds several skeletons; choose one of the dataset names");
  }
  for (std::size_t i = 0; i < meta.dataset_names.size(); ++i)
    if (meta.dataset_names[i] == name) return static_cast<int>(i);
  throw ConfigError("unknown skeleton '" + name + "'");
}

StyleCondition style_condition(const std::vector<std::string>& names, const json& weights) {
  StyleCondition c;
  if (!weights.is_object() || weights.empty()) throw ConfigError("style weights must be a non-empty object");
  for (const auto& [name, w] : weights.items()) c.weights.emplace_back(resolve_style(names, name), w.get<double>());
  return c;
}

void print_split_summary(const Dataset& ds, std::ostream& log) {
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    const auto& clips = ds.split(s);
    long long frames = 0;
    std::set<int> styles;
    for (const auto& c : clips) {
      frames += c.frame_count();
      styles.insert(c.style_id);
    }
    const char* name = s == Split::Train ? "train" : s == Split::Val ? "val" : "test";
    log << name << ": " << clips.size() << " clips, " << frames << " frames, " << styles.size() << " styles\n";
  }
}

struct LabeledSet {
  std::vector<MotionClip> clips;
  std::vector<int> labels;
  int classes = 0;
};

MotionClip load_clip(const fs::path& p, const BvhOptions& options) {
  MotionClip c = read_bvh_file(p, options);
  c.validate();
  return c;
}

}  // namespace

TrajectorySignal read_trajectory_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  int lineno = 0;
  std::vector<std::array<double, 3>> rows;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    if (lineno == 1) {
      std::string header;
      for (char c : line)
        if (c != ' ') header += c;
      if (header != "x,z,yaw_deg") throw ParseError(lineno, "trajectory CSV header must be x,z,yaw_deg");
      continue;
    }
    std::array<double, 3> row{};
    std::istringstream fields(line);
    std::string cell;
    int k = 0;
    while (std::getline(fields, cell, ',')) {
      if (k >= 3) throw ParseError(lineno, "too many columns");
      try {
        std::size_t used = 0;
        row[k] = std::stod(trim(cell), &used);
        if (used != trim(cell).size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw ParseError(lineno, "invalid number '" + cell + "'");
      }
      ++k;
    }
    if (k != 3) throw ParseError(lineno, "expected 3 columns");
    rows.push_back(row);
  }
  if (rows.empty()) throw ConfigError("trajectory " + path.string() + " has no rows");
  return trajectory_from_path(rows);
}

std::vector<std::pair<std::string, double>> parse_style_weights(const std::string& spec) {
  std::vector<std::pair<std::string, double>> out;
  std::istringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("style weight '" + item + "' must look like name=weight");
    try {
      out.emplace_back(trim(item.substr(0, eq)), std::stod(item.substr(eq + 1)));
    } catch (const std::exception&) {
      throw ConfigError("invalid style weight '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("no style weights given");
  return out;
}

int resolve_style(const std::vector<std::string>& style_names, const std::string& name) {
  int found = -1;
  for (std::size_t i = 0; i < style_names.size(); ++i) {
    if (style_names[i] == name) return static_cast<int>(i);
    const auto slash = style_names[i].find('/');
    if (slash != std::string::npos && style_names[i].substr(slash + 1) == name) {
      if (found >= 0) throw ConfigError("style name '" + name + "' is ambiguous; use <dataset>/<style>");
      found = static_cast<int>(i);
    }
  }
  if (found < 0) throw ConfigError("unknown style '" + name + "'");
  return found;
}

void cmd_prepare(const RunConfig& config, const fs::path& manifest, const fs::path& out_dir, std::ostream& log) {
  const auto records = read_manifest(manifest);
  if (records.empty()) throw ConfigError("manifest " + manifest.string() + " is empty");
  const Dataset ds = build_dataset(records, manifest.parent_path(), config.dataset_options());
  fs::create_directories(out_dir);
  save_dataset(ds, out_dir / "dataset.json");
  log << "prepared " << records.size() << " clips, " << ds.style_names.size() << " styles, "
      << ds.dataset_names.size() << " skeleton(s)\n";
  print_split_summary(ds, log);
  const auto& s = ds.stats;
  log << "root range min (" << format_double(s.min[0]) << ", " << format_double(s.min[1]) << ", "
      << format_double(s.min[2]) << ") max (" << format_double(s.max[0]) << ", " << format_double(s.max[1]) << ", "
      << format_double(s.max[2]) << ")\n";
}

void cmd_train(const RunConfig& config, const fs::path& data_dir, const fs::path& out_dir,
               const std::optional<fs::path>& resume, std::ostream& log) {
  const Dataset ds = load_dataset(fs::is_directory(data_dir) ? data_dir / "dataset.json" : data_dir);
  const TrainingConfig tc = config.training_config();
  const DiffusionSchedule schedule = config.schedule();
  const TrainingData data =
      make_training_data(ds.train, config.window_spec(), ds.stats, tc.balance_styles, config.contact_thresholds());
  if (data.window_count() == 0) {
    throw TrainingError("no training windows: every training clip is shorter than F_past + F frames");
  }

  const DenoiserConfig mc = config.model_config(static_cast<int>(ds.style_names.size()));
  TrainingState state{Denoiser(mc, config.seed()), Adam(), Rng(config.seed() + 1), 0};
  if (resume) {
    auto loaded = load_checkpoint(*resume);
    if (!(loaded.model.config() == mc)) throw CheckpointError("resume checkpoint has a different model config");
    state.model = std::move(loaded.model);
    state.optimizer.state() = std::move(loaded.optimizer);
    state.rng = rng_from_state_string(loaded.meta.rng_state);
    state.step = loaded.meta.step;
    log << "resumed at step " << state.step << "\n";
  }

  fs::create_directories(out_dir);
  write_text(out_dir / "config.json", config.to_json().dump(2) + "\n");
  std::ofstream metrics(out_dir / "metrics.csv", resume ? std::ios::app : std::ios::trunc);
  if (!resume) metrics << metrics_csv_header() << "\n";

  CheckpointMeta meta;
  meta.run_config = config.to_json();
  meta.style_names = ds.style_names;
  meta.dataset_names = ds.dataset_names;
  meta.topologies = ds.topologies;
  meta.stats = ds.stats;
  auto save = [&](const fs::path& p) {
    meta.rng_state = rng_state_string(state.rng);
    meta.step = state.step;
    save_checkpoint(p, meta, state.model, &state.optimizer.state());
  };

  log << "training " << state.model.parameters().parameter_count() << " parameters on " << data.window_count()
      << " windows\n";
  train_loop(state, data, tc, schedule, ds.stats, [&](const StepReport& r) {
    metrics << metrics_csv_row(r) << "\n";
    if (tc.log_every > 0 && (r.step + 1) % tc.log_every == 0) {
      log << "step " << r.step + 1 << " loss " << format_double(r.loss.total) << " lr "
          << format_double(r.learning_rate) << "\n";
    }
    if (tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0) {
      save(out_dir / ("checkpoint_" + std::to_string(state.step) + ".skd"));
    }
  });
  save(out_dir / "checkpoint.skd");
  log << "wrote " << (out_dir / "checkpoint.skd").string() << "\n";
}

namespace {

void run_generation(const RunConfig& config, const LoadedCheckpoint& ckpt, GenerationRequest request,
                    const fs::path& out, std::ostream& log) {
  const DiffusionSchedule schedule = make_schedule(
      parse_schedule_kind(ckpt.meta.run_config.value("diffusion.kind", config.get_string("diffusion.kind"))),
      ckpt.meta.run_config.value("diffusion.train_steps", config.get_int("diffusion.train_steps")));
  const auto result = autoregressive_generate(ckpt.model, ckpt.meta.stats, schedule, request);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  export_generation(result.clip, out);
  for (std::size_t i = 0; i < result.windows.size(); ++i) {
    log << "window " << i + 1 << ": " << format_double(result.windows[i].seconds) << " s\n";
  }
  log << "wrote " << result.clip.frame_count() << " frames to " << out.string() << "\n";
}

}  // namespace

void cmd_generate(const RunConfig& config, const fs::path& checkpoint, const fs::path& request_path,
                  const fs::path& out, std::ostream& log) {
  const LoadedCheckpoint ckpt = load_checkpoint(checkpoint);
  json req;
  try {
    req = json::parse(read_text(request_path));
  } catch (const json::parse_error& e) {
    throw ConfigError(request_path.string() + ": " + e.what());
  }
  const fs::path base = request_path.parent_path();
  auto resolve_path = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };

  GenerationRequest r;
  const int skel = resolve_skeleton(ckpt.meta, req.value("skeleton", std::string()));
  r.topology = ckpt.meta.topologies[skel];
  const auto& names = ckpt.meta.style_names;
  if (!req.contains("styles")) throw ConfigError("request needs 'styles'");
  if (req["styles"].is_array()) {
    for (const auto& w : req["styles"]) r.styles.push_back(style_condition(names, w));
  } else {
    r.styles.push_back(style_condition(names, req["styles"]));
  }

  const int frames = ckpt.model.config().frames;
  const BvhOptions bvh = config.bvh_options();
  if (req.contains("trajectory")) {
    const auto& t = req["trajectory"];
    if (t.is_string()) {
      r.trajectory = read_trajectory_csv(resolve_path(t.get<std::string>()));
    } else {
      r.trajectory = trajectory_from_path(t.get<std::vector<std::array<double, 3>>>());
    }
  } else if (req.contains("trajectory_bvh")) {
    const MotionClip src = load_clip(resolve_path(req["trajectory_bvh"].get<std::string>()), bvh);
    const int usable = src.frame_count() / frames * frames;
    if (usable == 0) throw ConfigError("trajectory_bvh is shorter than one window");
    r.trajectory = extract_trajectory(src, 0, usable);
  } else {
    throw ConfigError("request needs 'trajectory' or 'trajectory_bvh'");
  }
  if (req.contains("seed_bvh")) r.seed_motion = load_clip(resolve_path(req["seed_bvh"].get<std::string>()), bvh);
  r.sampler = config.sampler_settings();
  r.sampler.guidance.scale = req.value("cfg_scale", r.sampler.guidance.scale);
  r.seed = req.value("seed", config.seed());
  run_generation(config, ckpt, std::move(r), out, log);
}

void cmd_blend(const RunConfig& config, const fs::path& checkpoint, const std::string& styles,
               const fs::path& trajectory_csv, const std::string& skeleton, const fs::path& out, std::ostream& log) {
  const LoadedCheckpoint ckpt = load_checkpoint(checkpoint);
  GenerationRequest r;
  r.topology = ckpt.meta.topologies[resolve_skeleton(ckpt.meta, skeleton)];
  StyleCondition c;
  for (const auto& [name, w] : parse_style_weights(styles)) c.weights.emplace_back(resolve_style(ckpt.meta.style_names, name), w);
  r.styles.push_back(std::move(c));
  r.trajectory = read_trajectory_csv(trajectory_csv);
  r.sampler = config.sampler_settings();
  r.seed = config.seed();
  run_generation(config, ckpt, std::move(r), out, log);
}

void cmd_evaluate(const RunConfig& config, const std::vector<fs::path>& generated,
                  const std::vector<fs::path>& reference, const fs::path& out_dir, std::ostream& log) {
  const BvhOptions bvh = config.bvh_options();
  const FootMetricConfig foot = config.foot_metric_config();

  std::vector<MotionClip> gen;
  for (const auto& p : expand_bvh_paths(generated)) gen.push_back(load_clip(p, bvh));
  if (gen.empty()) throw ConfigError("no generated clips to evaluate");
  const auto& topo = *gen.front().topology;
  for (const auto& c : gen)
    if (!(*c.topology == topo)) throw TopologyError("generated clips must share one skeleton");

  // Reference clips, labeled for the feature classifier when labels exist.
  LabeledSet ref;
  LabeledSet train;
  const bool from_dataset = reference.size() == 1 && reference[0].extension() == ".json";
  if (from_dataset) {
    const Dataset ds = load_dataset(reference[0]);
    auto take = [&](const std::vector<MotionClip>& clips, LabeledSet& set) {
      for (const auto& c : clips) {
        if (c.topology->joint_count() != topo.joint_count()) continue;
        set.clips.push_back(c);
        set.labels.push_back(c.style_id);
      }
      set.classes = static_cast<int>(ds.style_names.size());
    };
    take(ds.test.empty() ? ds.train : ds.test, ref);
    take(ds.train, train);
  } else {
    std::map<std::string, int> label_of;
    for (const auto& p : expand_bvh_paths(reference)) {
      MotionClip c = load_clip(p, bvh);
      const std::string label = p.parent_path().filename().string();
      auto [it, inserted] = label_of.try_emplace(label, static_cast<int>(label_of.size()));
      ref.clips.push_back(std::move(c));
      ref.labels.push_back(it->second);
    }
    ref.classes = static_cast<int>(label_of.size());
    train = ref;
  }

  json report;
  std::ostringstream csv;
  csv << "metric,scope,value\n";
  auto row = [&](const std::string& metric, const std::string& scope, double v) {
    csv << metric << ',' << scope << ',' << format_double(v) << "\n";
    report[metric][scope] = v;
  };

  row("clips", "generated", static_cast<double>(gen.size()));
  row("clips", "reference", static_cast<double>(ref.clips.size()));
  if (!topo.toe_joint_ids().empty()) {
    std::vector<double> pen(topo.toe_joint_ids().size(), 0.0);
    double slide = 0;
    for (const auto& c : gen) {
      const auto p = foot_penetration(c, foot);
      for (std::size_t i = 0; i < p.size(); ++i) pen[i] += p[i] / gen.size();
      slide += foot_sliding(c, foot) / gen.size();
    }
    double mean_pen = 0;
    for (std::size_t i = 0; i < pen.size(); ++i) {
      row("foot_penetration_pct", topo.joint_names()[topo.toe_joint_ids()[i]], pen[i]);
      mean_pen += pen[i] / pen.size();
    }
    row("foot_penetration_pct", "mean", mean_pen);
    row("foot_sliding_m", "mean", slide);
  }
  bool all_long = true;
  for (const auto& c : gen) all_long = all_long && c.frame_count() >= 2;
  if (all_long) row("diversity_intra", "generated", diversity_intra(gen));
  if (gen.size() >= 2) row("diversity_inter", "generated", diversity_inter(gen));

  // Trajectory error against reference clips with the same name and length.
  double pos_err = 0, rot_err = 0;
  int paired = 0;
  for (const auto& g : gen) {
    for (const auto& r : ref.clips) {
      if (r.name == g.name && r.frame_count() == g.frame_count()) {
        const auto e = trajectory_error(g, extract_trajectory(r, 0, r.frame_count()));
        pos_err += e.position;
        rot_err += e.rotation_deg;
        ++paired;
        break;
      }
    }
  }
  if (paired > 0) {
    row("trajectory_position_m", "mean", pos_err / paired);
    row("trajectory_rotation_deg", "mean", rot_err / paired);
  }

  const std::set<int> train_labels(train.labels.begin(), train.labels.end());
  const bool same_skeleton = !ref.clips.empty() && ref.clips.front().topology->joint_count() == topo.joint_count();
  if (train_labels.size() >= 2 && same_skeleton) {
    const MotionClassifier clf =
        train_fid_classifier(train.clips, train.labels, train.classes, config.classifier_config());
    row("classifier_accuracy", "train", classifier_accuracy(clf, train.clips, train.labels));
    const FeatureStats a = feature_stats(classifier_features(clf, gen));
    const FeatureStats b = feature_stats(classifier_features(clf, ref.clips));
    row("fid", "aggregate", frechet_distance(a, b));
  } else {
    log << "FID skipped: the reference set needs at least two style labels on the generated skeleton\n";
  }

  fs::create_directories(out_dir);
  write_text(out_dir / "report.json", report.dump(2) + "\n");
  write_text(out_dir / "report.csv", csv.str());
  log << csv.str();
}

}  // namespace skeldiff
