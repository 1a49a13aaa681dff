#include "skeldiff/classifier.hpp"

#include <set>

#include "skeldiff/error.hpp"
#include "skeldiff/skeleton.hpp"

namespace skeldiff {

MotionClassifier::MotionClassifier(int joints, int classes, const ClassifierConfig& config)
    : joints_(joints), classes_(classes), config_(config) {
  if (joints < 1 || classes < 1 || config.hidden < 1 || config.window < 1) {
    throw ConfigError("invalid classifier configuration");
  }
  Rng rng(config.seed);
  conv1_ = Conv1d(params_, "conv1", joints * 3, config.hidden, 1, rng);
  conv2_ = Conv1d(params_, "conv2", config.hidden, config.hidden, 1, rng);
  conv3_ = Conv1d(params_, "conv3", config.hidden, config.hidden, 1, rng);
  head_ = Linear(params_, "head", config.hidden, classes, rng);
}

ad::Var MotionClassifier::features(const Tensor& positions) const {
  if (positions.rank() != 2 || positions.dim(1) != joints_ * 3) {
    throw ShapeError("classifier input " + shape_str(positions.shape()) + " for " + std::to_string(joints_) +
                     " joints");
  }
  auto x = ad::constant(positions.reshaped({positions.dim(0), 1, joints_ * 3}));
  x = ad::silu(conv1_(x));
  x = ad::silu(conv2_(x));
  x = ad::silu(conv3_(x));
  return ad::reshape(ad::mean_axis0(x), {1, config_.hidden});
}

ad::Var MotionClassifier::logits(const Tensor& positions) const { return head_(features(positions)); }

std::vector<Tensor> classifier_windows(const MotionClip& clip, int window) {
  const Tensor pos = forward_kinematics(*clip.topology, clip.root_pos, clip.joint_rot);
  const int frames = pos.dim(0);
  const int joints = pos.dim(1);
  Tensor rel({frames, joints * 3});
  for (int f = 0; f < frames; ++f) {
    for (int j = 0; j < joints; ++j) {
      rel.at(f, j * 3 + 0) = pos.at(f, j, 0) - pos.at(f, 0, 0);
      rel.at(f, j * 3 + 1) = pos.at(f, j, 1);
      rel.at(f, j * 3 + 2) = pos.at(f, j, 2) - pos.at(f, 0, 2);
    }
  }
  std::vector<Tensor> out;
  if (frames <= window) {
    out.push_back(std::move(rel));
    return out;
  }
  const int stride = std::max(1, window / 2);
  for (int s = 0; s + window <= frames; s += stride) out.push_back(rel.slice0(s, window));
  return out;
}

MotionClassifier train_fid_classifier(const std::vector<MotionClip>& clips, const std::vector<int>& labels,
                                      int classes, const ClassifierConfig& config) {
  if (clips.empty() || clips.size() != labels.size()) throw TrainingError("classifier needs labeled clips");
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
    throw TrainingError("classifier training needs at least two distinct classes");
  }
  const int joints = clips.front().topology->joint_count();
  std::vector<Tensor> inputs;
  std::vector<int> targets;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (clips[i].topology->joint_count() != joints) throw TopologyError("classifier clips must share a skeleton");
    for (auto& w : classifier_windows(clips[i], config.window)) {
      inputs.push_back(std::move(w));
      targets.push_back(labels[i]);
    }
  }
  MotionClassifier model(joints, classes, config);
  Adam adam;
  for (int step = 0; step < config.steps; ++step) {
    model.parameters().zero_grad();
    std::vector<ad::Var> rows;
    for (const auto& x : inputs) rows.push_back(model.logits(x));
    auto loss = ad::cross_entropy(ad::concat(rows, 0), targets);
    ad::backward(loss);
    adam.step(model.parameters(), config.learning_rate);
  }
  return model;
}

double classifier_accuracy(const MotionClassifier& model, const std::vector<MotionClip>& clips,
                           const std::vector<int>& labels) {
  ad::NoGradGuard guard;
  int correct = 0;
  int total = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    for (const auto& w : classifier_windows(clips[i], model.config().window)) {
      const Tensor l = model.logits(w)->value;
      int best = 0;
      for (int c = 1; c < model.class_count(); ++c)
        if (l[c] > l[best]) best = c;
      correct += best == labels[i];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / total : 0.0;
}

Eigen::MatrixXd classifier_features(const MotionClassifier& model, const std::vector<MotionClip>& clips) {
  ad::NoGradGuard guard;
  std::vector<Tensor> rows;
  for (const auto& c : clips)
    for (const auto& w : classifier_windows(c, model.config().window)) rows.push_back(model.features(w)->value);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), model.feature_dim());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int k = 0; k < model.feature_dim(); ++k) out(static_cast<Eigen::Index>(r), k) = rows[r][k];
  return out;
}

}  // namespace skeldiff
