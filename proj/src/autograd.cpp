#include "skeldiff/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "skeldiff/error.hpp"

namespace skeldiff::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using StrideMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStrideMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using Vec = Eigen::VectorXd;

thread_local bool g_grad_enabled = true;

bool needs_grad(const std::vector<Var>& parents) {
  if (!g_grad_enabled) return false;
  return std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p && p->requires_grad; });
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (needs_grad(parents)) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

bool wants(const Var& v) { return v && v->requires_grad; }

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

int norm_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

// For each element of `a_shape`, the flat index of the broadcast element of `b_shape`.
std::vector<std::size_t> broadcast_map(const Shape& a_shape, const Shape& b_shape) {
  if (a_shape.size() != b_shape.size()) {
    throw ShapeError("broadcast rank mismatch " + shape_str(a_shape) + " vs " + shape_str(b_shape));
  }
  const int r = static_cast<int>(a_shape.size());
  std::vector<std::size_t> b_stride(r, 0);
  std::size_t stride = 1;
  for (int i = r - 1; i >= 0; --i) {
    if (b_shape[i] != a_shape[i] && b_shape[i] != 1) {
      throw ShapeError("cannot broadcast " + shape_str(b_shape) + " into " + shape_str(a_shape));
    }
    b_stride[i] = b_shape[i] == 1 ? 0 : stride;
    stride *= b_shape[i];
  }
  std::vector<std::size_t> map(numel(a_shape));
  std::vector<int> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t n = 0; n < map.size(); ++n) {
    map[n] = off;
    for (int i = r - 1; i >= 0; --i) {
      ++idx[i];
      off += b_stride[i];
      if (idx[i] < a_shape[i]) break;
      off -= b_stride[i] * a_shape[i];
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  return make_node(std::move(value), std::move(parents), std::move(backward_fn));
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  if (root->value.size() != 1) throw ShapeError("backward requires a scalar root");
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

Var add(const Var& a, const Var& b) {
  Tensor out = a->value;
  if (a->value.shape() == b->value.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
      if (wants(a)) {
        auto& g = a->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
      if (wants(b)) {
        auto& g = b->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
    });
  }
  auto map = std::make_shared<std::vector<std::size_t>>(broadcast_map(a->value.shape(), b->value.shape()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[(*map)[i]];
  return make_node(std::move(out), {a, b}, [a, b, map](Node& n) {
    if (wants(a)) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants(b)) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[(*map)[i]] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (wants(a)) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants(b)) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  auto map = std::make_shared<std::vector<std::size_t>>(broadcast_map(a->value.shape(), b->value.shape()));
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[(*map)[i]];
  return make_node(std::move(out), {a, b}, [a, b, map](Node& n) {
    if (wants(a)) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * b->value[(*map)[i]];
    }
    if (wants(b)) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[(*map)[i]] += n.grad[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (auto& v : out.values()) v *= s;
  return make_node(std::move(out), {a}, [a, s](Node& n) {
    auto& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (auto& v : out.values()) v += s;
  return make_node(std::move(out), {a}, [a](Node& n) {
    auto& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Var silu(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.values()) v = v / (1.0 + std::exp(-v));
  return make_node(std::move(out), {a}, [a](Node& n) {
    auto& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a->value[i];
      const double s = 1.0 / (1.0 + std::exp(-x));
      g[i] += n.grad[i] * s * (1.0 + x * (1.0 - s));
    }
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a->value.values()) s += v;
  return make_node(Tensor::scalar(s), {a}, [a](Node& n) {
    auto& g = a->grad_buffer();
    const double d = n.grad[0];
    for (auto& v : g.values()) v += d;
  });
}

Var mean(const Var& a) {
  const double count = static_cast<double>(a->value.size());
  return scale(sum(a), 1.0 / count);
}

Var mse(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "mse");
  const std::size_t n = a->value.size();
  if (n == 0) throw ShapeError("mse of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a->value[i] - b->value[i];
    s += d * d;
  }
  return make_node(Tensor::scalar(s / static_cast<double>(n)), {a, b}, [a, b, n](Node& node) {
    const double c = 2.0 * node.grad[0] / static_cast<double>(n);
    if (wants(a)) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += c * (a->value[i] - b->value[i]);
    }
    if (wants(b)) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= c * (a->value[i] - b->value[i]);
    }
  });
}

Var mean_axis0(const Var& a) {
  const Shape& s = a->value.shape();
  const int rows = s[0];
  const std::size_t inner = a->value.size() / rows;
  Shape out_shape(s.begin() + 1, s.end());
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape, 0.0);
  for (int r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < inner; ++i) out[i] += a->value[r * inner + i] / rows;
  return make_node(std::move(out), {a}, [a, rows, inner](Node& n) {
    auto& g = a->grad_buffer();
    for (int r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < inner; ++i) g[r * inner + i] += n.grad[i] / rows;
  });
}

Var row_norms(const Var& a) {
  const Shape& s = a->value.shape();
  const int d = s.back();
  const std::size_t rows = a->value.size() / d;
  Shape out_shape(s.begin(), s.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int k = 0; k < d; ++k) acc += a->value[r * d + k] * a->value[r * d + k];
    out[r] = std::sqrt(acc);
  }
  Tensor norms = out;
  return make_node(std::move(out), {a}, [a, d, rows, norms](Node& n) {
    auto& g = a->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] == 0.0) continue;
      const double c = n.grad[r] / norms[r];
      for (int k = 0; k < d; ++k) g[r * d + k] += c * a->value[r * d + k];
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const int in = w->value.dim(0);
  const int out_dim = w->value.dim(1);
  if (x->value.shape().back() != in) {
    throw ShapeError("linear: input " + shape_str(x->value.shape()) + " vs weight " +
                     shape_str(w->value.shape()));
  }
  if (b && (b->value.rank() != 1 || b->value.dim(0) != out_dim)) throw ShapeError("linear: bias shape");
  const int rows = static_cast<int>(x->value.size() / in);
  Shape out_shape = x->value.shape();
  out_shape.back() = out_dim;
  Tensor out(out_shape);
  MapMat y(out.data(), rows, out_dim);
  y.noalias() = CMapMat(x->value.data(), rows, in) * CMapMat(w->value.data(), in, out_dim);
  if (b) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), out_dim);
  return make_node(std::move(out), {x, w, b}, [x, w, b, rows, in, out_dim](Node& n) {
    CMapMat dy(n.grad.data(), rows, out_dim);
    if (wants(x)) {
      MapMat(x->grad_buffer().data(), rows, in).noalias() += dy * CMapMat(w->value.data(), in, out_dim).transpose();
    }
    if (wants(w)) {
      MapMat(w->grad_buffer().data(), in, out_dim).noalias() += CMapMat(x->value.data(), rows, in).transpose() * dy;
    }
    if (wants(b)) {
      Eigen::Map<Eigen::RowVectorXd>(b->grad_buffer().data(), out_dim) += dy.colwise().sum();
    }
  });
}

Var conv_time(const Var& x, const Var& w, const Var& b, int stride) {
  const Shape& xs = x->value.shape();
  const Shape& ws = w->value.shape();
  if (xs.size() != 3 || ws.size() != 3 || ws[1] != xs[2]) {
    throw ShapeError("conv_time: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  }
  const int taps = ws[0];
  const int t_in = xs[0];
  const int slots = xs[1];
  const int cin = xs[2];
  const int cout = ws[2];
  if (stride < 1 || t_in % stride != 0) throw ShapeError("conv_time: length not divisible by stride");
  const int t_out = t_in / stride;
  const int pad = taps / 2;
  Tensor out({t_out, slots, cout}, 0.0);
  auto for_each_tap = [=](auto&& fn) {
    for (int k = 0; k < taps; ++k) {
      for (int t = 0; t < t_out; ++t) {
        const int src = t * stride + k - pad;
        if (src < 0 || src >= t_in) continue;
        // Stride 1: extend to the maximal contiguous run of valid frames.
        if (stride == 1) {
          int t_end = t;
          while (t_end + 1 < t_out && t_end + 1 + k - pad < t_in) ++t_end;
          fn(k, t, src, t_end - t + 1);
          break;
        }
        fn(k, t, src, 1);
      }
    }
  };
  MapMat y(out.data(), t_out * slots, cout);
  for_each_tap([&](int k, int t, int src, int run) {
    y.middleRows(t * slots, run * slots).noalias() +=
        CMapMat(x->value.data() + static_cast<std::size_t>(src) * slots * cin, run * slots, cin) *
        CMapMat(w->value.data() + static_cast<std::size_t>(k) * cin * cout, cin, cout);
  });
  if (b) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), cout);
  return make_node(std::move(out), {x, w, b}, [=](Node& n) {
    CMapMat dy(n.grad.data(), t_out * slots, cout);
    for_each_tap([&](int k, int t, int src, int run) {
      auto dy_blk = dy.middleRows(t * slots, run * slots);
      if (wants(x)) {
        MapMat(x->grad_buffer().data() + static_cast<std::size_t>(src) * slots * cin, run * slots, cin).noalias() +=
            dy_blk * CMapMat(w->value.data() + static_cast<std::size_t>(k) * cin * cout, cin, cout).transpose();
      }
      if (wants(w)) {
        MapMat(w->grad_buffer().data() + static_cast<std::size_t>(k) * cin * cout, cin, cout).noalias() +=
            CMapMat(x->value.data() + static_cast<std::size_t>(src) * slots * cin, run * slots, cin).transpose() *
            dy_blk;
      }
    });
    if (wants(b)) Eigen::Map<Eigen::RowVectorXd>(b->grad_buffer().data(), cout) += dy.colwise().sum();
  });
}

Var upsample_time(const Var& x, int factor) {
  const Shape& s = x->value.shape();
  const std::size_t row = x->value.size() / s[0];
  Shape os = s;
  os[0] *= factor;
  Tensor out(os);
  for (int t = 0; t < os[0]; ++t)
    std::copy_n(x->value.data() + (t / factor) * row, row, out.data() + t * row);
  return make_node(std::move(out), {x}, [x, factor, row](Node& n) {
    auto& g = x->grad_buffer();
    const int t_out = n.grad.dim(0);
    for (int t = 0; t < t_out; ++t)
      for (std::size_t i = 0; i < row; ++i) g[(t / factor) * row + i] += n.grad[t * row + i];
  });
}

Var group_norm(const Var& x, int groups, double eps) {
  const int c = x->value.shape().back();
  if (groups < 1 || c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const std::size_t rows = x->value.size() / c;
  const int cg = c / groups;
  const double count = static_cast<double>(rows) * cg;
  Tensor out(x->value.shape());
  std::vector<double> inv_std(groups);
  for (int g = 0; g < groups; ++g) {
    double m = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
      for (int k = 0; k < cg; ++k) m += x->value[r * c + g * cg + k];
    m /= count;
    double var = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
      for (int k = 0; k < cg; ++k) {
        const double d = x->value[r * c + g * cg + k] - m;
        var += d * d;
      }
    var /= count;
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (std::size_t r = 0; r < rows; ++r)
      for (int k = 0; k < cg; ++k) {
        const std::size_t i = r * c + g * cg + k;
        out[i] = (x->value[i] - m) * inv_std[g];
      }
  }
  Tensor xhat = out;
  return make_node(std::move(out), {x}, [x, xhat, inv_std, rows, c, cg, groups, count](Node& n) {
    auto& gx = x->grad_buffer();
    for (int g = 0; g < groups; ++g) {
      double mean_dy = 0.0;
      double mean_dy_xhat = 0.0;
      for (std::size_t r = 0; r < rows; ++r)
        for (int k = 0; k < cg; ++k) {
          const std::size_t i = r * c + g * cg + k;
          mean_dy += n.grad[i];
          mean_dy_xhat += n.grad[i] * xhat[i];
        }
      mean_dy /= count;
      mean_dy_xhat /= count;
      for (std::size_t r = 0; r < rows; ++r)
        for (int k = 0; k < cg; ++k) {
          const std::size_t i = r * c + g * cg + k;
          gx[i] += inv_std[g] * (n.grad[i] - mean_dy - xhat[i] * mean_dy_xhat);
        }
    }
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const int rank = parts[0]->value.rank();
  axis = norm_axis(axis, rank);
  Shape out_shape = parts[0]->value.shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && s[i] != parts[0]->value.shape()[i]) {
        throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(parts[0]->value.shape()));
      }
    }
    out_shape[axis] += s[axis];
  }
  const AxisSplit o = split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p->value.shape()[axis];
    for (std::size_t a = 0; a < o.outer; ++a)
      std::copy_n(p->value.data() + a * len * o.inner, len * o.inner, out.data() + (a * o.len + off) * o.inner);
    off += len;
  }
  return make_node(std::move(out), parts, [parts, offsets, o, axis](Node& n) {
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const auto& p = parts[pi];
      if (!wants(p)) continue;
      auto& g = p->grad_buffer();
      const std::size_t len = p->value.shape()[axis];
      for (std::size_t a = 0; a < o.outer; ++a)
        for (std::size_t i = 0; i < len * o.inner; ++i)
          g[a * len * o.inner + i] += n.grad[(a * o.len + offsets[pi]) * o.inner + i];
    }
  });
}

Var slice(const Var& x, int axis, int start, int length) {
  axis = norm_axis(axis, x->value.rank());
  const Shape& s = x->value.shape();
  if (start < 0 || length < 0 || start + length > s[axis]) {
    throw ShapeError("slice out of range on " + shape_str(s));
  }
  const AxisSplit o = split_axis(s, axis);
  Shape os = s;
  os[axis] = length;
  Tensor out(os);
  for (std::size_t a = 0; a < o.outer; ++a)
    std::copy_n(x->value.data() + (a * o.len + start) * o.inner, length * o.inner,
                out.data() + a * length * o.inner);
  return make_node(std::move(out), {x}, [x, o, start, length](Node& n) {
    auto& g = x->grad_buffer();
    for (std::size_t a = 0; a < o.outer; ++a)
      for (std::size_t i = 0; i < length * o.inner; ++i)
        g[(a * o.len + start) * o.inner + i] += n.grad[a * length * o.inner + i];
  });
}

Var take(const Var& x, int axis, const std::vector<int>& indices) {
  axis = norm_axis(axis, x->value.rank());
  const Shape& s = x->value.shape();
  for (int i : indices)
    if (i < 0 || i >= s[axis]) throw ShapeError("take: index out of range");
  const AxisSplit o = split_axis(s, axis);
  Shape os = s;
  os[axis] = static_cast<int>(indices.size());
  const std::size_t m = indices.size();
  Tensor out(os);
  for (std::size_t a = 0; a < o.outer; ++a)
    for (std::size_t j = 0; j < m; ++j)
      std::copy_n(x->value.data() + (a * o.len + indices[j]) * o.inner, o.inner,
                  out.data() + (a * m + j) * o.inner);
  return make_node(std::move(out), {x}, [x, o, indices, m](Node& n) {
    auto& g = x->grad_buffer();
    for (std::size_t a = 0; a < o.outer; ++a)
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < o.inner; ++i)
          g[(a * o.len + indices[j]) * o.inner + i] += n.grad[(a * m + j) * o.inner + i];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x->value.reshaped(std::move(shape));
  return make_node(std::move(out), {x}, [x](Node& n) {
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Var transpose01(const Var& x) {
  const Shape& s = x->value.shape();
  if (s.size() < 2) throw ShapeError("transpose01 needs rank >= 2");
  const int a = s[0];
  const int b = s[1];
  const std::size_t inner = x->value.size() / (static_cast<std::size_t>(a) * b);
  Shape os = s;
  std::swap(os[0], os[1]);
  Tensor out(os);
  for (int i = 0; i < a; ++i)
    for (int j = 0; j < b; ++j)
      std::copy_n(x->value.data() + (i * b + j) * inner, inner, out.data() + (j * a + i) * inner);
  return make_node(std::move(out), {x}, [x, a, b, inner](Node& n) {
    auto& g = x->grad_buffer();
    for (int i = 0; i < a; ++i)
      for (int j = 0; j < b; ++j)
        for (std::size_t k = 0; k < inner; ++k) g[(i * b + j) * inner + k] += n.grad[(j * a + i) * inner + k];
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads,
              std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  const Shape& qs = q->value.shape();
  const Shape& ks = k->value.shape();
  if (qs.size() != 3 || ks.size() != 3 || v->value.shape() != ks || qs[0] != ks[0] || qs[2] != ks[2]) {
    throw ShapeError("attention: q " + shape_str(qs) + " k " + shape_str(ks) + " v " +
                     shape_str(v->value.shape()));
  }
  const int groups = qs[0];
  const int lq = qs[1];
  const int lk = ks[1];
  const int d = qs[2];
  if (heads < 1 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (mask && mask->size() != static_cast<std::size_t>(lq) * lk) throw ShapeError("attention: mask shape");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const double neg_inf = -std::numeric_limits<double>::infinity();

  Tensor out(qs, 0.0);
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(groups) * heads * lq * lk);
  for (int g = 0; g < groups; ++g) {
    for (int h = 0; h < heads; ++h) {
      const std::size_t qoff = static_cast<std::size_t>(g) * lq * d + h * dh;
      const std::size_t koff = static_cast<std::size_t>(g) * lk * d + h * dh;
      CStrideMap qh(q->value.data() + qoff, lq, dh, Eigen::OuterStride<>(d));
      CStrideMap kh(k->value.data() + koff, lk, dh, Eigen::OuterStride<>(d));
      CStrideMap vh(v->value.data() + koff, lk, dh, Eigen::OuterStride<>(d));
      MapMat p(probs->data() + (static_cast<std::size_t>(g) * heads + h) * lq * lk, lq, lk);
      p.noalias() = qh * kh.transpose();
      p *= inv_sqrt;
      for (int i = 0; i < lq; ++i) {
        double mx = neg_inf;
        for (int j = 0; j < lk; ++j) {
          if (mask && !(*mask)[static_cast<std::size_t>(i) * lk + j]) {
            p(i, j) = neg_inf;
          } else {
            mx = std::max(mx, p(i, j));
          }
        }
        if (mx == neg_inf) throw ShapeError("attention: fully masked query row");
        double z = 0.0;
        for (int j = 0; j < lk; ++j) {
          p(i, j) = p(i, j) == neg_inf ? 0.0 : std::exp(p(i, j) - mx);
          z += p(i, j);
        }
        p.row(i) /= z;
      }
      StrideMap oh(out.data() + qoff, lq, dh, Eigen::OuterStride<>(d));
      oh.noalias() = p * vh;
    }
  }
  return make_node(std::move(out), {q, k, v}, [=](Node& n) {
    RowMat dp(lq, lk);
    RowMat ds(lq, lk);
    for (int g = 0; g < groups; ++g) {
      for (int h = 0; h < heads; ++h) {
        const std::size_t qoff = static_cast<std::size_t>(g) * lq * d + h * dh;
        const std::size_t koff = static_cast<std::size_t>(g) * lk * d + h * dh;
        CStrideMap qh(q->value.data() + qoff, lq, dh, Eigen::OuterStride<>(d));
        CStrideMap kh(k->value.data() + koff, lk, dh, Eigen::OuterStride<>(d));
        CStrideMap vh(v->value.data() + koff, lk, dh, Eigen::OuterStride<>(d));
        CStrideMap doh(n.grad.data() + qoff, lq, dh, Eigen::OuterStride<>(d));
        CMapMat p(probs->data() + (static_cast<std::size_t>(g) * heads + h) * lq * lk, lq, lk);
        if (wants(v)) {
          StrideMap dv(v->grad_buffer().data() + koff, lk, dh, Eigen::OuterStride<>(d));
          dv.noalias() += p.transpose() * doh;
        }
        if (!wants(q) && !wants(k)) continue;
        dp.noalias() = doh * vh.transpose();
        for (int i = 0; i < lq; ++i) {
          const double dot = p.row(i).dot(dp.row(i));
          ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
        }
        ds *= inv_sqrt;
        if (wants(q)) {
          StrideMap dq(q->grad_buffer().data() + qoff, lq, dh, Eigen::OuterStride<>(d));
          dq.noalias() += ds * kh;
        }
        if (wants(k)) {
          StrideMap dk(k->grad_buffer().data() + koff, lk, dh, Eigen::OuterStride<>(d));
          dk.noalias() += ds.transpose() * qh;
        }
      }
    }
  });
}

Var gather_rows(const Var& table, const std::vector<int>& indices) { return take(table, 0, indices); }

Var weighted_rows(const Var& table, const std::vector<std::pair<int, double>>& weights) {
  const int rows = table->value.dim(0);
  const int d = table->value.dim(1);
  Tensor out({d}, 0.0);
  for (const auto& [row, w] : weights) {
    if (row < 0 || row >= rows) throw ShapeError("weighted_rows: row out of range");
    for (int j = 0; j < d; ++j) out[j] += w * table->value[static_cast<std::size_t>(row) * d + j];
  }
  return make_node(std::move(out), {table}, [table, weights, d](Node& n) {
    auto& g = table->grad_buffer();
    for (const auto& [row, w] : weights)
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(row) * d + j] += w * n.grad[j];
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const int n = logits->value.dim(0);
  const int c = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != n) throw ShapeError("cross_entropy: label count");
  auto probs = std::make_shared<Tensor>(logits->value.shape());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c) throw ShapeError("cross_entropy: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max(mx, logits->value.at(i, j));
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(logits->value.at(i, j) - mx);
    for (int j = 0; j < c; ++j) probs->at(i, j) = std::exp(logits->value.at(i, j) - mx) / z;
    loss -= logits->value.at(i, labels[i]) - mx - std::log(z);
  }
  return make_node(Tensor::scalar(loss / n), {logits}, [logits, probs, labels, n, c](Node& node) {
    auto& g = logits->grad_buffer();
    const double s = node.grad[0] / n;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) g.at(i, j) += s * (probs->at(i, j) - (j == labels[i] ? 1.0 : 0.0));
  });
}

}  // namespace skeldiff::ad
