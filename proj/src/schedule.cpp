#include "skeldiff/schedule.hpp"

#include <cmath>
#include <numbers>

#include "skeldiff/error.hpp"

namespace skeldiff {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "cosine") return ScheduleKind::Cosine;
  if (name == "linear") return ScheduleKind::Linear;
  throw ConfigError("unknown diffusion schedule kind '" + name + "' (expected cosine or linear)");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::Cosine ? "cosine" : "linear"; }

DiffusionSchedule make_schedule(ScheduleKind kind, int steps) {
  if (steps < 1) throw ConfigError("diffusion schedule needs at least one step");
  DiffusionSchedule s;
  s.kind = kind;
  s.steps = steps;
  s.alpha_bar.resize(steps + 1);
  if (kind == ScheduleKind::Cosine) {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    for (int t = 0; t <= steps; ++t) s.alpha_bar[t] = f(t) / f0;
    s.alpha_bar[0] = 1.0;
  } else {
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= steps; ++t) {
      const double beta = steps == 1 ? 1e-4 : 1e-4 + (0.02 - 1e-4) * (t - 1) / (steps - 1);
      s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
    }
  }
  return s;
}

namespace {

void check_step(const DiffusionSchedule& s, int t) {
  if (t < 0 || t > s.steps) throw ConfigError("diffusion step " + std::to_string(t) + " outside [0, T]");
}

}  // namespace

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& schedule) {
  require_same_shape(x0, eps, "q_sample");
  check_step(schedule, t);
  const double a = std::sqrt(schedule.alpha_bar[t]);
  const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor cfg_combine(const Tensor& cond, const Tensor& uncond, double w) {
  require_same_shape(cond, uncond, "cfg_combine");
  Tensor out(cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + w * (cond[i] - uncond[i]);
  return out;
}

Tensor ddim_step(const Tensor& x_t, const Tensor& x0_hat, int t, int t_prev, const DiffusionSchedule& schedule) {
  require_same_shape(x_t, x0_hat, "ddim_step");
  check_step(schedule, t);
  check_step(schedule, t_prev);
  if (t == 0) throw ConfigError("ddim_step cannot start from t = 0");
  if (t_prev >= t) throw ConfigError("ddim_step requires t_prev < t");
  const double ab = schedule.alpha_bar[t];
  const double ab_prev = schedule.alpha_bar[t_prev];
  const double sa = std::sqrt(ab);
  const double sn = std::sqrt(1.0 - ab);
  const double sa_prev = std::sqrt(ab_prev);
  const double sn_prev = std::sqrt(1.0 - ab_prev);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eps_hat = (x_t[i] - sa * x0_hat[i]) / sn;
    out[i] = sa_prev * x0_hat[i] + sn_prev * eps_hat;
  }
  return out;
}

std::vector<int> ddim_timesteps(int total_steps, int n_steps) {
  if (n_steps < 1 || n_steps > total_steps) {
    throw ConfigError("inference steps must lie in [1, " + std::to_string(total_steps) + "]");
  }
  std::vector<int> ts;
  for (int i = 0; i < n_steps; ++i) {
    const long long num = static_cast<long long>(total_steps) * (n_steps - i);
    ts.push_back(static_cast<int>((num + n_steps / 2) / n_steps));
  }
  return ts;
}

Tensor ddim_sample_from(const DenoiseFn& denoise, Tensor x, const DiffusionSchedule& schedule, int n_steps,
                        const GuidanceConfig& guidance) {
  const auto ts = ddim_timesteps(schedule.steps, n_steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensor x0_hat = denoise(x, t, true);
    if (guidance.scale != 1.0) x0_hat = cfg_combine(x0_hat, denoise(x, t, false), guidance.scale);
    x = ddim_step(x, x0_hat, t, t_prev, schedule);
  }
  return x;
}

Tensor ddim_sample_loop(const DenoiseFn& denoise, const Shape& shape, const DiffusionSchedule& schedule, int n_steps,
                        const GuidanceConfig& guidance, Rng& rng) {
  return ddim_sample_from(denoise, normal_tensor(shape, rng), schedule, n_steps, guidance);
}

}  // namespace skeldiff
