#pragma once

#include <functional>
#include <string>
#include <vector>

#include "skeldiff/nn.hpp"
#include "skeldiff/tensor.hpp"

namespace skeldiff {

enum class ScheduleKind { Cosine, Linear };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Cumulative signal coefficients alpha_bar[0..T], alpha_bar[0] = 1, strictly decreasing.
struct DiffusionSchedule {
  ScheduleKind kind = ScheduleKind::Cosine;
  int steps = 0;
  std::vector<double> alpha_bar;
};

/// Cosine: alpha_bar(t) = f(t) / f(0), f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), s = 0.008.
/// Linear: betas evenly spaced in [1e-4, 0.02].
DiffusionSchedule make_schedule(ScheduleKind kind, int steps);

/// sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& schedule);

/// uncond + w (cond - uncond).
Tensor cfg_combine(const Tensor& cond, const Tensor& uncond, double w);

/// Deterministic (eta = 0) DDIM update from step t to t_prev given an x0 estimate.
Tensor ddim_step(const Tensor& x_t, const Tensor& x0_hat, int t, int t_prev, const DiffusionSchedule& schedule);

/// Descending timesteps visited by an n-step sampler: T, ..., evenly spaced, last > 0.
std::vector<int> ddim_timesteps(int total_steps, int n_steps);

struct GuidanceConfig {
  double scale = 2.5;
};

/// x0 prediction for (x_t, t); `conditional` false requests the null-style branch.
using DenoiseFn = std::function<Tensor(const Tensor& x_t, int t, bool conditional)>;

/// Starts from unit Gaussian noise of `shape` and runs n_steps DDIM updates
/// down to t = 0, combining branches with classifier-free guidance when scale != 1.
Tensor ddim_sample_loop(const DenoiseFn& denoise, const Shape& shape, const DiffusionSchedule& schedule, int n_steps,
                        const GuidanceConfig& guidance, Rng& rng);

/// Same loop from a given initial noise sample.
Tensor ddim_sample_from(const DenoiseFn& denoise, Tensor x_T, const DiffusionSchedule& schedule, int n_steps,
                        const GuidanceConfig& guidance);

}  // namespace skeldiff
