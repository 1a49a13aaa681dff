#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "skeldiff/dataio.hpp"
#include "skeldiff/denoiser.hpp"
#include "skeldiff/losses.hpp"
#include "skeldiff/nn.hpp"
#include "skeldiff/schedule.hpp"

namespace skeldiff {

struct ConditionDropout {
  double style = 0.1;
  double past = 0.5;
};

struct LossBreakdown {
  double total = 0;
  double diffusion = 0;
  double angular_velocity = 0;
  double global_position = 0;
  double global_velocity = 0;
  double foot_contact = 0;
};

struct TotalLoss {
  ad::Var total;
  LossBreakdown parts;
};

struct SampleConditions {
  int t = 1;
  bool drop_style = false;
  bool drop_past = false;
};

/// Diffusion step in [1, T] and the two dropout coins, in that order.
SampleConditions draw_sample_conditions(const DiffusionSchedule& schedule, const ConditionDropout& dropout, Rng& rng);

/// Batch-mean weighted loss. Draws per sample, in order: t in [1, T], style
/// dropout, past dropout, then root and rotation noise.
TotalLoss total_loss(const std::vector<MotionWindow>& batch, const Denoiser& model, const DiffusionSchedule& schedule,
                     const LossWeights& weights, const NormStats& stats, const ConditionDropout& dropout, Rng& rng);

struct TrainingConfig {
  int steps = 1000;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double lr_decay = 0.9999;
  ConditionDropout dropout;
  LossWeights weights;
  AugmentConfig augment;
  bool balance_styles = true;
  int log_every = 50;
  int checkpoint_every = 0;

  void validate() const;
};

/// Learning rate for the step with zero-based index `step`.
double learning_rate_at(const TrainingConfig& config, long long step);

/// Windows grouped per skeleton; each group is one dataset.
struct TrainingData {
  std::vector<std::vector<MotionWindow>> groups;
  std::vector<std::vector<double>> sample_weights;

  std::size_t window_count() const;
};

TrainingData make_training_data(const std::vector<MotionClip>& clips, const WindowSpec& spec, const NormStats& stats,
                                bool balance, const ContactThresholds& thresholds = {});

struct TrainingState {
  Denoiser model;
  Adam optimizer;
  Rng rng;
  long long step = 0;
};

struct StepReport {
  long long step = 0;
  double learning_rate = 0;
  int group = 0;
  LossBreakdown loss;
};

/// One optimizer update on a single-skeleton batch. Throws TrainingError on a
/// non-finite loss.
StepReport train_step(TrainingState& state, const TrainingData& data, const TrainingConfig& config,
                      const DiffusionSchedule& schedule, const NormStats& stats);

using StepCallback = std::function<void(const StepReport&)>;

/// Runs steps until state.step reaches config.steps.
void train_loop(TrainingState& state, const TrainingData& data, const TrainingConfig& config,
                const DiffusionSchedule& schedule, const NormStats& stats, const StepCallback& on_step = {});

/// CSV header and row for the metrics log.
std::string metrics_csv_header();
std::string metrics_csv_row(const StepReport& report);

}  // namespace skeldiff
