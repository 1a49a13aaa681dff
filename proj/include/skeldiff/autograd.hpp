#pragma once

// Minimal reverse-mode automatic differentiation over Tensor.
//
// Each op returns a Var holding its value plus a closure that pushes the
// output gradient to its parents. Graphs are built per forward pass and
// released with the last Var referencing them. Parameters are leaf Vars
// with requires_grad set; their gradients accumulate until zeroed.

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "skeldiff/tensor.hpp"

namespace skeldiff::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, allocated as zeros on first use.
  Tensor& grad_buffer();
  bool has_grad() const { return !grad.empty(); }
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);

/// Builds a result node for a custom op. `backward_fn` reads the node's grad
/// and accumulates into parents; it is dropped when no parent needs gradients.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);
Var parameter(Tensor value);

/// Seeds d(root)/d(root) = 1 and propagates through the recorded graph.
void backward(const Var& root);

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise. `b` may broadcast into `a`: same rank, each dim equal or 1.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var silu(const Var& a);

// Reductions to shape [1].
Var sum(const Var& a);
Var mean(const Var& a);
Var mse(const Var& a, const Var& b);

/// Mean over axis 0: [N, ...] -> [...].
Var mean_axis0(const Var& a);

/// Euclidean norm over the last axis; gradient is zero where the norm is zero.
Var row_norms(const Var& a);

/// x[..., in] * W[in, out] + b[out]; `b` may be null.
Var linear(const Var& x, const Var& w, const Var& b);

/// 1D convolution along axis 0 of x[T, K, Cin] with W[3, Cin, Cout],
/// zero padding 1, applied independently per axis-1 slot. T % stride == 0.
Var conv_time(const Var& x, const Var& w, const Var& b, int stride);

/// Nearest-neighbour repeat along axis 0.
Var upsample_time(const Var& x, int factor);

/// Group normalization over every element of x[..., C] in each channel group.
/// No affine parameters.
Var group_norm(const Var& x, int groups, double eps = 1e-5);

Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& x, int axis, int start, int length);
Var take(const Var& x, int axis, const std::vector<int>& indices);
Var reshape(const Var& x, Shape shape);

/// [A, B, ...] -> [B, A, ...].
Var transpose01(const Var& x);

/// Multi-head scaled dot-product attention with independent groups.
/// q[G, Lq, D], k[G, Lk, D], v[G, Lk, D]; `mask`, when given, is a Lq x Lk
/// row-major matrix of allowed (nonzero) entries shared by all groups.
/// Masked logits are excluded from the softmax.
Var attention(const Var& q, const Var& k, const Var& v, int heads,
              std::shared_ptr<const std::vector<std::uint8_t>> mask = nullptr);

/// Rows of table[N, D] selected by index -> [indices.size(), D].
Var gather_rows(const Var& table, const std::vector<int>& indices);

/// sum_i w_i * table[row_i] -> [D].
Var weighted_rows(const Var& table, const std::vector<std::pair<int, double>>& weights);

/// Mean negative log-likelihood of integer labels under softmax(logits[N, C]).
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

}  // namespace skeldiff::ad
