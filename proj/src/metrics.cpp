#include "skeldiff/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "skeldiff/error.hpp"

namespace skeldiff {

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

void require_toes(const MotionClip& clip) {
  if (clip.topology->toe_joint_ids().empty()) throw LabelingError("no toe joints configured");
}

}  // namespace

FeatureStats feature_stats(const Eigen::MatrixXd& features) {
  if (features.rows() == 0) throw StatsError("feature_stats: no samples");
  FeatureStats s;
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.cov = centered.transpose() * centered / static_cast<double>(features.rows());
  return s;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != a.mean.size() || b.cov.rows() != b.mean.size()) {
    throw ShapeError("frechet_distance: dimension mismatch");
  }
  const Eigen::MatrixXd sa = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = sa * b.cov * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

double diversity_intra(const MotionClip& clip) {
  const Tensor pos = forward_kinematics(*clip.topology, clip.root_pos, clip.joint_rot);
  const int frames = pos.dim(0);
  const int joints = pos.dim(1);
  if (frames < 2) throw ShapeError("diversity_intra needs at least two frames");
  double acc = 0;
  for (int j = 0; j < joints; ++j) {
    for (int k = 0; k < 3; ++k) {
      double mean = 0;
      for (int f = 0; f < frames; ++f) mean += pos.at(f, j, k);
      mean /= frames;
      double var = 0;
      for (int f = 0; f < frames; ++f) var += (pos.at(f, j, k) - mean) * (pos.at(f, j, k) - mean);
      acc += var / frames;
    }
  }
  return acc / joints;
}

double diversity_intra(const std::vector<MotionClip>& clips) {
  if (clips.empty()) throw ShapeError("diversity_intra: no clips");
  double acc = 0;
  for (const auto& c : clips) acc += diversity_intra(c);
  return acc / static_cast<double>(clips.size());
}

double diversity_inter(const std::vector<MotionClip>& clips) {
  if (clips.size() < 2) throw ShapeError("diversity_inter needs at least two clips");
  const auto& topo = *clips.front().topology;
  const int joints = topo.joint_count();
  std::vector<Tensor> means;
  for (const auto& c : clips) {
    if (!(*c.topology == topo)) throw TopologyError("diversity_inter: clips use different skeletons");
    const Tensor pos = forward_kinematics(*c.topology, c.root_pos, c.joint_rot);
    Tensor m({joints, 3}, 0.0);
    for (int f = 0; f < pos.dim(0); ++f)
      for (int j = 0; j < joints; ++j)
        for (int k = 0; k < 3; ++k) m.at(j, k) += pos.at(f, j, k) / pos.dim(0);
    means.push_back(std::move(m));
  }
  const double n = static_cast<double>(means.size());
  double acc = 0;
  for (int j = 0; j < joints; ++j) {
    for (int k = 0; k < 3; ++k) {
      double mean = 0;
      for (const auto& m : means) mean += m.at(j, k);
      mean /= n;
      double var = 0;
      for (const auto& m : means) var += (m.at(j, k) - mean) * (m.at(j, k) - mean);
      acc += var / n;
    }
  }
  return acc / joints;
}

std::vector<double> foot_penetration(const MotionClip& clip, const FootMetricConfig& config) {
  require_toes(clip);
  const Tensor pos = forward_kinematics(*clip.topology, clip.root_pos, clip.joint_rot);
  const int frames = pos.dim(0);
  std::vector<double> out;
  for (int toe : clip.topology->toe_joint_ids()) {
    int below = 0;
    for (int f = 0; f < frames; ++f)
      if (pos.at(f, toe, 1) < config.ground_height - config.penetration_epsilon) ++below;
    out.push_back(frames ? 100.0 * below / frames : 0.0);
  }
  return out;
}

double foot_sliding(const MotionClip& clip, const FootMetricConfig& config) {
  require_toes(clip);
  const Tensor pos = forward_kinematics(*clip.topology, clip.root_pos, clip.joint_rot);
  const auto& toes = clip.topology->toe_joint_ids();
  double acc = 0;
  for (int toe : toes) {
    for (int f = 1; f < pos.dim(0); ++f) {
      if (!(pos.at(f, toe, 1) - config.ground_height < config.sliding_height)) continue;
      acc += std::hypot(pos.at(f, toe, 0) - pos.at(f - 1, toe, 0), pos.at(f, toe, 2) - pos.at(f - 1, toe, 2));
    }
  }
  return acc / static_cast<double>(toes.size());
}

TrajectoryError trajectory_error(const MotionClip& clip, const TrajectorySignal& trajectory) {
  const int frames = clip.frame_count();
  if (trajectory.frame_count() != frames) {
    throw ShapeError("trajectory_error: clip has " + std::to_string(frames) + " frames, trajectory " +
                     std::to_string(trajectory.frame_count()));
  }
  if (frames == 0) return {};
  TrajectoryError e;
  for (int f = 0; f < frames; ++f) {
    e.position += std::hypot(clip.root_pos.at(f, 0) - trajectory.positions.at(f, 0),
                             clip.root_pos.at(f, 2) - trajectory.positions.at(f, 1));
    Rotation6D r;
    for (int k = 0; k < 6; ++k) r.v[k] = trajectory.rotations.at(f, k);
    const Mat3 rel = rot6d_at(clip.joint_rot, f, 0).transpose() * rot6d_to_matrix(r);
    const double c = std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0);
    e.rotation_deg += std::acos(c) * 180.0 / std::numbers::pi;
  }
  e.position /= frames;
  e.rotation_deg /= frames;
  return e;
}

}  // namespace skeldiff
