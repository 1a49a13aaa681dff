#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "skeldiff/dataio.hpp"
#include "skeldiff/denoiser.hpp"
#include "skeldiff/nn.hpp"

namespace skeldiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  nlohmann::json run_config = nlohmann::json::object();
  std::vector<std::string> style_names;
  std::vector<std::string> dataset_names;
  std::vector<TopologyPtr> topologies;
  NormStats stats;
  std::string rng_state;
  long long step = 0;
};

struct LoadedCheckpoint {
  CheckpointMeta meta;
  Denoiser model;
  AdamState optimizer;
};

nlohmann::json denoiser_config_to_json(const DenoiserConfig& config);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

/// Single-file container: magic, version, JSON header, then little-endian
/// float64 blobs for every weight and optimizer moment.
void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta, const Denoiser& model,
                     const AdamState* optimizer = nullptr);

/// Throws CheckpointError on a bad magic, version mismatch, truncation or
/// missing weights.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

std::string rng_state_string(const Rng& rng);
Rng rng_from_state_string(const std::string& state);

}  // namespace skeldiff
