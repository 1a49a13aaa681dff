#pragma once

#include <Eigen/Core>
#include <vector>

#include "skeldiff/dataio.hpp"
#include "skeldiff/motion.hpp"

namespace skeldiff {

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Mean and population covariance of feature rows [N, D].
FeatureStats feature_stats(const Eigen::MatrixXd& features);

/// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), negative eigenvalues clamped to zero.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// Per joint, time variance of global position summed over axes, averaged over joints.
double diversity_intra(const MotionClip& clip);
double diversity_intra(const std::vector<MotionClip>& clips);

/// Per joint, variance across clips of the time-mean global position, summed
/// over axes and averaged over joints.
double diversity_inter(const std::vector<MotionClip>& clips);

struct FootMetricConfig {
  double penetration_epsilon = 0.005;
  double ground_height = 0.0;
  double sliding_height = 0.01;
};

/// Percentage of frames with the toe strictly below ground - epsilon, per toe.
std::vector<double> foot_penetration(const MotionClip& clip, const FootMetricConfig& config = {});

/// Horizontal toe travel on frames whose toe height is below the sliding
/// threshold, averaged over toes.
double foot_sliding(const MotionClip& clip, const FootMetricConfig& config = {});

struct TrajectoryError {
  double position = 0;      // meters
  double rotation_deg = 0;  // degrees
};

/// Mean xz distance and geodesic root-orientation angle against a trajectory in meters.
TrajectoryError trajectory_error(const MotionClip& clip, const TrajectorySignal& trajectory);

}  // namespace skeldiff
