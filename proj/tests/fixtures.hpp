#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "skeldiff/config.hpp"
#include "skeldiff/denoiser.hpp"
#include "skeldiff/motion.hpp"
#include "skeldiff/nn.hpp"
#include "skeldiff/skeleton.hpp"

namespace fixtures {

using namespace skeldiff;

/// Root -> Leg -> Toe_End chain standing with the toe at ground level.
TopologyPtr chain3();
/// Hips with two legs ending in toes and a spine ending in a head.
TopologyPtr biped7();
/// Single joint under the root.
TopologyPtr chain_n(int joints);
TopologyPtr star(int leaves);
/// Random topologically sorted tree with random offsets.
TopologyPtr random_tree(int joints, Rng& rng);

Mat3 random_rotation(Rng& rng);
Tensor random_rotations(int frames, int joints, Rng& rng);
Tensor identity_rotations(int frames, int joints);

/// Periodic walk: root advances along +x and bobs; joints swing about z.
MotionClip walk_clip(const TopologyPtr& topology, int frames, double speed, double phase, int style_id = 0);

/// Shifts the root vertically per frame so the lowest toe touches y = 0.
MotionClip grounded(MotionClip clip);

/// Small network for fast tests: 8 base channels, F = 8, F' = 4, three styles.
DenoiserConfig tiny_config();
/// Random normalized inputs for `topology`; `with_past` false selects the no-past path.
DenoiserInput random_input(const DenoiserConfig& config, const TopologyPtr& topology, Rng& rng, bool with_past = true);

/// Attention projections with random weights registered in `store`.
AttentionWeights random_attention(ParameterStore& store, int q_in, int kv_in, int width, Rng& rng);
/// Largest central-difference sensitivity of output token `q` to input token `k`
/// of a layer over a [frames, tokens, channels] grid.
double token_sensitivity(const std::function<Tensor(const Tensor&)>& layer, const Tensor& grid, int q, int k);

/// Run configuration with the tiny network, a short schedule and a few optimizer steps.
RunConfig tiny_run_config();
/// Writes `per_style` chain3 walks for each of two styles under `dir` plus a
/// manifest.jsonl without split fields. Returns the manifest path.
std::filesystem::path write_walk_corpus(const std::filesystem::path& dir, int per_style, int frames);

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Brute-force recursive FK used as an independent reference.
Tensor recursive_fk(const SkeletonTopology& topology, const Tensor& root, const Tensor& rot);

}  // namespace fixtures
