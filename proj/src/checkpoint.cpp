#include "skeldiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "skeldiff/error.hpp"

namespace skeldiff {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'K', 'D', 'F', 'C', 'K', 'P', 'T'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError("checkpoint is truncated");
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

struct BlobWriter {
  json index = json::array();
  std::string data;

  void add(const std::string& name, const Tensor& t) {
    index.push_back({{"name", name}, {"dtype", "f64le"}, {"shape", t.shape()}, {"offset", data.size()}});
    for (double v : t.values()) put_le(data, v);
  }
};

}  // namespace

json denoiser_config_to_json(const DenoiserConfig& c) {
  return {{"base_channels", c.base_channels},
          {"n_levels", c.n_levels},
          {"heads", c.heads},
          {"groupnorm_groups", c.groupnorm_groups},
          {"style_count", c.style_count},
          {"style_embed_dim", c.style_embed_dim},
          {"time_embed_dim", c.time_embed_dim},
          {"trajectory_embed_dim", c.trajectory_embed_dim},
          {"F", c.frames},
          {"F_past", c.past_frames},
          {"max_depth", c.max_depth},
          {"positional_encoding", c.positional_encoding},
          {"merged_attention", c.merged_attention}};
}

DenoiserConfig denoiser_config_from_json(const json& j) {
  DenoiserConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.n_levels = j.at("n_levels").get<int>();
  c.heads = j.at("heads").get<int>();
  c.groupnorm_groups = j.at("groupnorm_groups").get<int>();
  c.style_count = j.at("style_count").get<int>();
  c.style_embed_dim = j.at("style_embed_dim").get<int>();
  c.time_embed_dim = j.at("time_embed_dim").get<int>();
  c.trajectory_embed_dim = j.at("trajectory_embed_dim").get<int>();
  c.frames = j.at("F").get<int>();
  c.past_frames = j.at("F_past").get<int>();
  c.max_depth = j.at("max_depth").get<int>();
  c.positional_encoding = j.at("positional_encoding").get<bool>();
  c.merged_attention = j.at("merged_attention").get<bool>();
  return c;
}

std::string rng_state_string(const Rng& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

Rng rng_from_state_string(const std::string& state) {
  Rng rng;
  std::istringstream s(state);
  s >> rng;
  if (!s) throw CheckpointError("invalid RNG state");
  return rng;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta, const Denoiser& model,
                     const AdamState* optimizer) {
  BlobWriter blobs;
  for (const auto& [name, var] : model.parameters().entries()) blobs.add("weights/" + name, var->value);
  if (optimizer) {
    for (const auto& [name, t] : optimizer->m) blobs.add("adam.m/" + name, t);
    for (const auto& [name, t] : optimizer->v) blobs.add("adam.v/" + name, t);
  }
  json topologies = json::array();
  for (const auto& t : meta.topologies) topologies.push_back(topology_to_json(*t));
  json header = {{"format_version", kCheckpointVersion},
                 {"model", denoiser_config_to_json(model.config())},
                 {"run_config", meta.run_config},
                 {"style_names", meta.style_names},
                 {"dataset_names", meta.dataset_names},
                 {"topologies", topologies},
                 {"norm_stats", stats_to_json(meta.stats)},
                 {"rng_state", meta.rng_state},
                 {"step", meta.step},
                 {"adam_step", optimizer ? optimizer->step : 0},
                 {"blobs", blobs.index}};
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += blobs.data;

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint file");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw CheckpointError("checkpoint header is truncated");
  json header;
  try {
    header = json::parse(bytes.substr(pos, header_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }
  const std::size_t data_start = pos + header_len;

  try {
    const DenoiserConfig config = denoiser_config_from_json(header.at("model"));
    LoadedCheckpoint out{CheckpointMeta{}, Denoiser(config, 0), AdamState{}};
    auto& meta = out.meta;
    meta.run_config = header.at("run_config");
    meta.style_names = header.at("style_names").get<std::vector<std::string>>();
    meta.dataset_names = header.at("dataset_names").get<std::vector<std::string>>();
    for (const auto& t : header.at("topologies")) {
      meta.topologies.push_back(std::make_shared<const SkeletonTopology>(topology_from_json(t)));
    }
    meta.stats = stats_from_json(header.at("norm_stats"));
    meta.rng_state = header.at("rng_state").get<std::string>();
    meta.step = header.at("step").get<long long>();
    out.optimizer.step = header.at("adam_step").get<long long>();

    std::map<std::string, Tensor> loaded;
    for (const auto& b : header.at("blobs")) {
      Shape shape = b.at("shape").get<Shape>();
      std::size_t p = data_start + b.at("offset").get<std::size_t>();
      Tensor t(shape);
      for (auto& v : t.values()) v = get_le<double>(bytes, p);
      loaded[b.at("name").get<std::string>()] = std::move(t);
    }
    for (const auto& [name, var] : out.model.parameters().entries()) {
      auto it = loaded.find("weights/" + name);
      if (it == loaded.end()) throw CheckpointError("checkpoint is missing weight " + name);
      if (it->second.shape() != var->value.shape()) {
        throw CheckpointError("weight " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                              shape_str(var->value.shape()));
      }
      var->value = std::move(it->second);
    }
    for (auto& [name, t] : loaded) {
      if (name.rfind("adam.m/", 0) == 0) out.optimizer.m[name.substr(7)] = std::move(t);
      if (name.rfind("adam.v/", 0) == 0) out.optimizer.v[name.substr(7)] = std::move(t);
    }
    return out;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }
}

}  // namespace skeldiff
