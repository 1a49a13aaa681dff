#pragma once

#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "skeldiff/autograd.hpp"

namespace skeldiff {

using Rng = std::mt19937_64;

double draw_normal(Rng& rng);
double draw_uniform(Rng& rng);
Tensor normal_tensor(Shape shape, Rng& rng);

/// Named, ordered collection of trainable leaves.
class ParameterStore {
 public:
  ad::Var create(const std::string& name, Tensor init);
  ad::Var find(const std::string& name) const;
  const std::vector<std::pair<std::string, ad::Var>>& entries() const { return entries_; }
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, ad::Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Fan-in scaled uniform init; `zero` gives an all-zero weight.
struct Linear {
  ad::Var weight;
  ad::Var bias;

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& rng, bool zero = false);
  ad::Var operator()(const ad::Var& x) const { return ad::linear(x, weight, bias); }
};

struct Conv1d {
  ad::Var weight;
  ad::Var bias;
  int stride = 1;

  Conv1d() = default;
  Conv1d(ParameterStore& store, const std::string& name, int in, int out, int stride, Rng& rng);
  ad::Var operator()(const ad::Var& x) const { return ad::conv_time(x, weight, bias, stride); }
};

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  long long step = 0;
};

/// Adam with bias correction. Learning rate is supplied per step.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterStore& params, double lr);
  AdamState& state() { return state_; }
  const AdamState& state() const { return state_; }

 private:
  double beta1_;
  double beta2_;
  double eps_;
  AdamState state_;
};

}  // namespace skeldiff
