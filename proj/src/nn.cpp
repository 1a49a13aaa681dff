#include "skeldiff/nn.hpp"

#include <cmath>

#include "skeldiff/error.hpp"

namespace skeldiff {

double draw_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

double draw_uniform(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

Tensor normal_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = draw_normal(rng);
  return t;
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

ad::Var ParameterStore::create(const std::string& name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
  auto var = ad::parameter(std::move(init));
  index_[name] = entries_.size();
  entries_.emplace_back(name, var);
  return var;
}

ad::Var ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : entries_[it->second].second;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : entries_) n += v->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, v] : entries_) v->grad = Tensor();
}

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& rng, bool zero) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = store.create(name + ".weight", zero ? Tensor({in, out}, 0.0) : uniform_tensor({in, out}, bound, rng));
  bias = store.create(name + ".bias", Tensor({out}, 0.0));
}

Conv1d::Conv1d(ParameterStore& store, const std::string& name, int in, int out, int stride_, Rng& rng)
    : stride(stride_) {
  const double bound = 1.0 / std::sqrt(3.0 * in);
  weight = store.create(name + ".weight", uniform_tensor({3, in, out}, bound, rng));
  bias = store.create(name + ".bias", Tensor({out}, 0.0));
}

void Adam::step(ParameterStore& params, double lr) {
  ++state_.step;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
  for (auto& [name, p] : params.entries()) {
    if (!p->has_grad()) continue;
    auto& m = state_.m[name];
    auto& v = state_.v[name];
    if (m.empty()) m = Tensor(p->value.shape(), 0.0);
    if (v.empty()) v = Tensor(p->value.shape(), 0.0);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      p->value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

}  // namespace skeldiff
