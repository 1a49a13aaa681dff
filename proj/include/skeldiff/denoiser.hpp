#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "skeldiff/autograd.hpp"
#include "skeldiff/dataio.hpp"
#include "skeldiff/nn.hpp"
#include "skeldiff/skeleton.hpp"

namespace skeldiff {

struct DenoiserConfig {
  int base_channels = 64;
  int n_levels = 3;
  int heads = 4;
  int groupnorm_groups = 8;
  int style_count = 1;
  int style_embed_dim = 64;
  int time_embed_dim = 64;
  int trajectory_embed_dim = 64;
  int frames = 56;       // F
  int past_frames = 8;   // F'
  int max_depth = 32;
  bool positional_encoding = true;
  bool merged_attention = false;

  /// Throws ConfigError on divisibility or range violations.
  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

/// Style conditioning as a convex combination of embedding rows; empty selects
/// the learned null row used for classifier-free guidance.
struct StyleCondition {
  std::vector<std::pair<int, double>> weights;

  static StyleCondition null_style() { return {}; }
  static StyleCondition single(int style_id) { return {{{style_id, 1.0}}}; }
  bool is_null() const { return weights.empty(); }
};

struct DenoiserInput {
  TopologyPtr topology;
  Tensor past_root;   // [F', 3] or empty for the no-past path
  Tensor past_rot;    // [F', J, 6] or empty
  Tensor noisy_root;  // [F, 3]
  Tensor noisy_rot;   // [F, J, 6]
  TrajectorySignal trajectory;  // F frames
  StyleCondition style;
  int t = 0;
};

/// Shape bookkeeping recorded during a forward pass.
struct ForwardTrace {
  int tokens = 0;
  std::vector<int> encoder_lengths;
  std::vector<int> decoder_lengths;
  long long joint_attention_key_rows = 0;
  int joint_attention_calls = 0;
};

/// Skeleton-agnostic UNet x0-predictor over a (frame x joint-token) grid.
class Denoiser {
 public:
  struct Output {
    ad::Var root;  // [F, 3]
    ad::Var rot;   // [F, J, 6]
  };

  Denoiser(const DenoiserConfig& config, std::uint64_t seed);
  ~Denoiser();
  Denoiser(Denoiser&&) noexcept;
  Denoiser& operator=(Denoiser&&) noexcept;

  const DenoiserConfig& config() const { return config_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  Output forward(const DenoiserInput& input, ForwardTrace* trace = nullptr) const;

  /// Convex combination of style rows, or the null row. Throws on unknown ids
  /// or weights that do not sum to 1 within 1e-6.
  ad::Var style_embedding(const StyleCondition& style) const;

 private:
  struct Modules;
  DenoiserConfig config_;
  ParameterStore params_;
  std::unique_ptr<Modules> modules_;
};

/// Sinusoidal encodings: row i encodes position positions[i] in `dim` channels.
Tensor sinusoidal_encoding(const std::vector<double>& positions, int dim);

/// GroupNorm followed by (1 + gamma) * h + beta with gamma, beta of shape [C].
ad::Var film_modulate(const ad::Var& features, const ad::Var& gamma, const ad::Var& beta, int groups);

/// Masked multi-head self-attention across the joint-token axis of grid[T, K, C],
/// with the given projections and an optional per-token positional term [1, K, C].
struct AttentionWeights {
  Linear q, k, v, o;
};
ad::Var joint_attention(const ad::Var& grid, const AncestorMask& mask, const AttentionWeights& w, int heads,
                        const ad::Var& token_encoding);

/// Self-attention across frames of grid[T, K, C], independently per token;
/// `frame_encoding` is [T, C] or null.
ad::Var temporal_attention(const ad::Var& grid, const AttentionWeights& w, int heads, const ad::Var& frame_encoding);

/// Every grid token attends to trajectory tokens[F, Ct]; residual. Encodings may be null.
ad::Var trajectory_cross_attention(const ad::Var& grid, const ad::Var& trajectory_tokens, const AttentionWeights& w,
                                   int heads, const ad::Var& grid_frame_encoding,
                                   const ad::Var& trajectory_frame_encoding);

}  // namespace skeldiff
