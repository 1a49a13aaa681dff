#include "skeldiff/training.hpp"

#include <cmath>
#include <sstream>

#include "skeldiff/bvh.hpp"
#include "skeldiff/error.hpp"

namespace skeldiff {

namespace {

int draw_index(const std::vector<double>& weights, Rng& rng) {
  double total = 0;
  for (double w : weights) total += w;
  double u = draw_uniform(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return static_cast<int>(i);
    u -= weights[i];
  }
  return static_cast<int>(weights.size()) - 1;
}

}  // namespace

SampleConditions draw_sample_conditions(const DiffusionSchedule& schedule, const ConditionDropout& dropout, Rng& rng) {
  SampleConditions c;
  c.t = std::uniform_int_distribution<int>(1, schedule.steps)(rng);
  c.drop_style = draw_uniform(rng) < dropout.style;
  c.drop_past = draw_uniform(rng) < dropout.past;
  return c;
}

TotalLoss total_loss(const std::vector<MotionWindow>& batch, const Denoiser& model, const DiffusionSchedule& schedule,
                     const LossWeights& weights, const NormStats& stats, const ConditionDropout& dropout, Rng& rng) {
  if (batch.empty()) throw TrainingError("empty batch");
  weights.validate();
  const auto& cfg = model.config();
  TotalLoss out;
  std::vector<ad::Var> terms;
  LossBreakdown& parts = out.parts;
  for (const auto& w : batch) {
    if (!w.topology || w.topology != batch.front().topology) {
      throw TrainingError("batch mixes skeletons; batches must share one topology");
    }
    const auto [t, drop_style, drop_past] = draw_sample_conditions(schedule, dropout, rng);
    const Tensor root_noise = normal_tensor(w.cur_root.shape(), rng);
    const Tensor rot_noise = normal_tensor(w.cur_rot.shape(), rng);

    DenoiserInput in;
    in.topology = w.topology;
    if (!drop_past && cfg.past_frames > 0) {
      in.past_root = w.past_root;
      in.past_rot = w.past_rot;
    }
    in.noisy_root = q_sample(w.cur_root, t, root_noise, schedule);
    in.noisy_rot = q_sample(w.cur_rot, t, rot_noise, schedule);
    in.trajectory = w.trajectory;
    in.style = drop_style ? StyleCondition::null_style() : StyleCondition::single(w.style_id);
    in.t = t;
    const auto pred = model.forward(in);

    const auto target_root = ad::constant(w.cur_root);
    const auto target_rot = ad::constant(w.cur_rot);
    const auto& topo = *w.topology;
    auto l_d = ad::add(diffusion_loss(pred.root, target_root), diffusion_loss(pred.rot, target_rot));
    auto total = ad::scale(l_d, weights.diffusion);
    parts.diffusion += l_d->value[0];

    auto add_term = [&](double weight, const std::function<ad::Var()>& make, double& slot) {
      if (weight == 0) return;
      auto l = make();
      slot += l->value[0];
      total = ad::add(total, ad::scale(l, weight));
    };
    const auto pred_root_m = denormalize_root(pred.root, stats);
    const auto target_root_m = denormalize_root(target_root, stats);
    add_term(weights.angular_velocity, [&] { return angular_velocity_loss(pred.rot, target_rot); },
             parts.angular_velocity);
    add_term(weights.global_position,
             [&] { return global_position_loss(topo, pred_root_m, pred.rot, target_root_m, target_rot); },
             parts.global_position);
    add_term(weights.global_velocity,
             [&] { return global_velocity_loss(topo, pred_root_m, pred.rot, target_root_m, target_rot); },
             parts.global_velocity);
    add_term(weights.foot_contact, [&] { return foot_contact_loss(topo, pred_root_m, pred.rot, w.contact); },
             parts.foot_contact);
    terms.push_back(total);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  ad::Var sum = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) sum = ad::add(sum, terms[i]);
  out.total = ad::scale(sum, inv);
  parts.total = out.total->value[0];
  parts.diffusion *= inv;
  parts.angular_velocity *= inv;
  parts.global_position *= inv;
  parts.global_velocity *= inv;
  parts.foot_contact *= inv;
  return out;
}

void TrainingConfig::validate() const {
  if (steps < 0) throw ConfigError("optim.steps must be nonnegative");
  if (batch_size < 1) throw ConfigError("optim.batch_size must be positive");
  if (!(learning_rate > 0)) throw ConfigError("optim.lr must be positive");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("optim.lr_decay must lie in (0, 1]");
  if (dropout.style < 0 || dropout.style > 1 || dropout.past < 0 || dropout.past > 1) {
    throw ConfigError("dropout probabilities must lie in [0, 1]");
  }
  weights.validate();
}

double learning_rate_at(const TrainingConfig& config, long long step) {
  return config.learning_rate * std::pow(config.lr_decay, static_cast<double>(step));
}

std::size_t TrainingData::window_count() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.size();
  return n;
}

TrainingData make_training_data(const std::vector<MotionClip>& clips, const WindowSpec& spec, const NormStats& stats,
                                bool balance, const ContactThresholds& thresholds) {
  std::vector<TopologyPtr> topologies;
  TrainingData data;
  for (const auto& clip : clips) {
    std::size_t g = 0;
    while (g < topologies.size() && topologies[g] != clip.topology && !(*topologies[g] == *clip.topology)) ++g;
    if (g == topologies.size()) {
      topologies.push_back(clip.topology);
      data.groups.emplace_back();
    }
    for (auto& w : make_windows(clip, spec, stats, thresholds)) {
      w.topology = topologies[g];
      data.groups[g].push_back(std::move(w));
    }
  }
  for (const auto& group : data.groups) {
    data.sample_weights.push_back(balance ? balance_styles(group)
                                          : std::vector<double>(group.size(), 1.0 / group.size()));
  }
  return data;
}

StepReport train_step(TrainingState& state, const TrainingData& data, const TrainingConfig& config,
                      const DiffusionSchedule& schedule, const NormStats& stats) {
  if (data.window_count() == 0) throw TrainingError("no training windows; clips may be shorter than F' + F");
  std::vector<double> group_sizes;
  for (const auto& g : data.groups) group_sizes.push_back(static_cast<double>(g.size()));
  const int group = draw_index(group_sizes, state.rng);

  std::vector<MotionWindow> batch;
  for (int b = 0; b < config.batch_size; ++b) {
    MotionWindow w = data.groups[group][draw_index(data.sample_weights[group], state.rng)];
    augment_window(w, state.rng, config.augment);
    batch.push_back(std::move(w));
  }

  StepReport report;
  report.step = state.step;
  report.group = group;
  report.learning_rate = learning_rate_at(config, state.step);
  state.model.parameters().zero_grad();
  auto loss = total_loss(batch, state.model, schedule, config.weights, stats, config.dropout, state.rng);
  report.loss = loss.parts;
  if (!std::isfinite(loss.parts.total)) {
    throw TrainingError("non-finite loss at step " + std::to_string(state.step) + " (diffusion " +
                        format_double(loss.parts.diffusion) + ")");
  }
  ad::backward(loss.total);
  state.optimizer.step(state.model.parameters(), report.learning_rate);
  ++state.step;
  return report;
}

void train_loop(TrainingState& state, const TrainingData& data, const TrainingConfig& config,
                const DiffusionSchedule& schedule, const NormStats& stats, const StepCallback& on_step) {
  config.validate();
  while (state.step < config.steps) {
    const auto report = train_step(state, data, config, schedule, stats);
    if (on_step) on_step(report);
  }
}

std::string metrics_csv_header() {
  return "step,total,diffusion,angular_velocity,global_position,global_velocity,foot_contact,lr";
}

std::string metrics_csv_row(const StepReport& r) {
  std::ostringstream s;
  s << r.step << ',' << format_double(r.loss.total) << ',' << format_double(r.loss.diffusion) << ','
    << format_double(r.loss.angular_velocity) << ',' << format_double(r.loss.global_position) << ','
    << format_double(r.loss.global_velocity) << ',' << format_double(r.loss.foot_contact) << ','
    << format_double(r.learning_rate);
  return s.str();
}

}  // namespace skeldiff
