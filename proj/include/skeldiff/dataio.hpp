#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "skeldiff/bvh.hpp"
#include "skeldiff/motion.hpp"
#include "skeldiff/nn.hpp"

namespace skeldiff {

/// Per-axis root position range over the training split.
struct NormStats {
  std::array<double, 3> min{-1, -1, -1};
  std::array<double, 3> max{1, 1, 1};

  /// Range [-1, 1] on every axis: normalization becomes the identity map.
  static NormStats identity() { return {}; }
  bool operator==(const NormStats&) const = default;
};

NormStats compute_norm_stats(const std::vector<MotionClip>& training_clips);

/// p_hat = 2 (p - min) / (max - min) - 1 per axis on a [N, 3] tensor.
Tensor normalize_root(const Tensor& root_pos, const NormStats& stats);
Tensor denormalize_root(const Tensor& root_pos, const NormStats& stats);

/// Ground-plane root path [F, 2] (x, z) and root rotations [F, 6].
struct TrajectorySignal {
  Tensor positions;
  Tensor rotations;

  int frame_count() const { return positions.empty() ? 0 : positions.dim(0); }
};

TrajectorySignal extract_trajectory(const MotionClip& clip, int start, int count);

/// Builds a trajectory from per-frame ground positions (x, z) and yaw angles.
TrajectorySignal trajectory_from_path(const std::vector<std::array<double, 3>>& x_z_yaw_deg);

struct ContactThresholds {
  double height = 0.05;  // meters
  double speed = 0.01;   // meters per frame
};

/// [F, toes] of 0/1: toe below `height` and moving slower than `speed`.
/// Speed at frame f uses the displacement from f - 1 (frame 0 uses frame 1).
Tensor label_foot_contacts(const MotionClip& clip, const ContactThresholds& thresholds = {});

struct MotionWindow {
  TopologyPtr topology;
  Tensor past_root;  // [F', 3] normalized
  Tensor past_rot;   // [F', J, 6]
  Tensor cur_root;   // [F, 3] normalized
  Tensor cur_rot;    // [F, J, 6]
  TrajectorySignal trajectory;
  Tensor contact;    // [F, toes]
  int style_id = 0;
  int dataset_id = 0;
  int start = 0;
};

struct WindowSpec {
  int frames = 56;
  int past_frames = 8;
  int stride = 14;
};

/// Sliding windows over `clip`; empty when the clip is shorter than F' + F.
std::vector<MotionWindow> make_windows(const MotionClip& clip, const WindowSpec& spec, const NormStats& stats,
                                       const ContactThresholds& thresholds = {});

/// Sampling weight per window proportional to 1 / (windows sharing its style); sums to 1.
std::vector<double> balance_styles(const std::vector<MotionWindow>& windows);

/// Per-axis Gaussian smoothing of [F, D] rows with reflected boundaries.
Tensor gaussian_smooth(const Tensor& rows, double sigma);

/// Rotates positions about the vertical axis and left-multiplies rotations by R_y(yaw).
TrajectorySignal rotate_trajectory(const TrajectorySignal& traj, double yaw);

struct AugmentConfig {
  double p_smooth = 0.5;
  double p_rotate = 0.5;
  double sigma = 2.0;
};

TrajectorySignal augment_trajectory(const TrajectorySignal& traj, Rng& rng, double p_smooth, double p_rotate,
                                    double sigma = 2.0);

/// Same random draws as augment_trajectory; a rotation is also applied to the
/// window's root positions and root rotations so motion and path stay consistent.
void augment_window(MotionWindow& window, Rng& rng, const AugmentConfig& config);

// Dataset assembly.

enum class Split { Train, Val, Test };

struct ManifestRecord {
  std::string path;
  std::string style_name;
  std::string dataset_name;
  std::string split;  // "train" | "val" | "test" | "" (assigned automatically)
};

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Largest-remainder split of each style's clips into 75/15/10 while matching
/// global split sizes. Deterministic in `seed`.
std::vector<Split> stratified_split(const std::vector<int>& style_of_clip, std::uint64_t seed,
                                    std::array<double, 3> fractions = {0.75, 0.15, 0.10});

struct Dataset {
  std::vector<std::string> dataset_names;
  std::vector<TopologyPtr> topologies;  // one per dataset
  std::vector<std::string> style_names; // global table, "<dataset>/<style>"
  std::vector<MotionClip> train;
  std::vector<MotionClip> val;
  std::vector<MotionClip> test;
  NormStats stats;

  const std::vector<MotionClip>& split(Split s) const;
};

struct DatasetOptions {
  BvhOptions bvh;
  std::uint64_t seed = 0;
  bool normalize_root = true;
};

/// Parses every manifest entry (paths relative to `base_dir`), assigns splits
/// and computes normalization stats from the training split.
Dataset build_dataset(const std::vector<ManifestRecord>& records, const std::filesystem::path& base_dir,
                      const DatasetOptions& options);

nlohmann::json topology_to_json(const SkeletonTopology& topology);
SkeletonTopology topology_from_json(const nlohmann::json& j);
nlohmann::json stats_to_json(const NormStats& stats);
NormStats stats_from_json(const nlohmann::json& j);
nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace skeldiff
