#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "skeldiff/motion.hpp"
#include "skeldiff/nn.hpp"

namespace skeldiff {

struct ClassifierConfig {
  int hidden = 64;
  int window = 32;
  int steps = 300;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Temporal-convolution style classifier over FK joint positions of one
/// skeleton: three conv blocks, global average pooling and a linear head.
/// Features are the pooled activations.
class MotionClassifier {
 public:
  MotionClassifier(int joints, int classes, const ClassifierConfig& config);

  int feature_dim() const { return config_.hidden; }
  int class_count() const { return classes_; }
  const ClassifierConfig& config() const { return config_; }

  /// Input [T, J * 3] of root-relative joint positions.
  ad::Var features(const Tensor& positions) const;
  ad::Var logits(const Tensor& positions) const;
  ParameterStore& parameters() { return params_; }

 private:
  int joints_;
  int classes_;
  ClassifierConfig config_;
  ParameterStore params_;
  Conv1d conv1_, conv2_, conv3_;
  Linear head_;
};

/// Root-relative FK positions [T, J * 3] of each classifier window in a clip;
/// windows overlap by half. Clips no longer than `window` give one window.
std::vector<Tensor> classifier_windows(const MotionClip& clip, int window);

/// Cross-entropy training on labeled clips of one skeleton. Throws
/// TrainingError when fewer than two classes are present.
MotionClassifier train_fid_classifier(const std::vector<MotionClip>& clips, const std::vector<int>& labels,
                                      int classes, const ClassifierConfig& config);

double classifier_accuracy(const MotionClassifier& model, const std::vector<MotionClip>& clips,
                           const std::vector<int>& labels);

/// Feature rows [N, D], one per window over all clips.
Eigen::MatrixXd classifier_features(const MotionClassifier& model, const std::vector<MotionClip>& clips);

}  // namespace skeldiff
