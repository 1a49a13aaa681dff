#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "skeldiff/dataio.hpp"
#include "skeldiff/denoiser.hpp"
#include "skeldiff/schedule.hpp"

namespace skeldiff {

/// Convex combination of rows of table[S, D]. Throws ConfigError on unknown
/// ids, negative weights or weights not summing to 1 within 1e-6.
Tensor blend_styles(const Tensor& table, const std::vector<std::pair<int, double>>& weights);

struct SamplerSettings {
  int ddim_steps = 4;
  GuidanceConfig guidance;
};

/// Trajectory with x and z mapped through the root normalization.
TrajectorySignal normalize_trajectory(const TrajectorySignal& traj, const NormStats& stats);

/// One sampled window in normalized model space.
struct SampledWindow {
  Tensor root;  // [F, 3] normalized
  Tensor rot;   // [F, J, 6]
};

/// DDIM with classifier-free guidance for one window. `trajectory` is in model
/// space; `past_root`/`past_rot` may be empty for generation without context.
SampledWindow generate_window(const Denoiser& model, const TopologyPtr& topology, const StyleCondition& style,
                              const TrajectorySignal& trajectory, const Tensor& past_root, const Tensor& past_rot,
                              const DiffusionSchedule& schedule, const SamplerSettings& settings, Rng& rng);

struct GenerationRequest {
  TopologyPtr topology;
  /// One entry applies to every chunk; otherwise one entry per chunk.
  std::vector<StyleCondition> styles;
  /// Ground path in meters; length is a positive multiple of F.
  TrajectorySignal trajectory;
  /// Optional context motion in meters; its last F' frames seed window 1.
  std::optional<MotionClip> seed_motion;
  SamplerSettings sampler;
  std::uint64_t seed = 0;
  double frame_rate = 30.0;
};

struct WindowRecord {
  Tensor past_root;  // as fed to the model (normalized); empty without context
  Tensor past_rot;
  SampledWindow output;
  double seconds = 0;
};

struct GenerationResult {
  MotionClip clip;  // denormalized, n * F frames
  std::vector<WindowRecord> windows;
};

GenerationResult autoregressive_generate(const Denoiser& model, const NormStats& stats,
                                         const DiffusionSchedule& schedule, const GenerationRequest& request);

/// Writes the clip as BVH. Throws ExportError on an empty clip.
void export_generation(const MotionClip& clip, const std::filesystem::path& path);

}  // namespace skeldiff
