#pragma once

#include "skeldiff/autograd.hpp"
#include "skeldiff/dataio.hpp"
#include "skeldiff/skeleton.hpp"

namespace skeldiff {

struct LossWeights {
  double diffusion = 1.0;
  double angular_velocity = 1.0;
  double global_position = 1.0;
  double global_velocity = 1.0;
  double foot_contact = 1.0;

  /// Throws ConfigError on negative weights or a non-positive diffusion weight.
  void validate() const;
};

/// Mean squared error over all elements.
ad::Var diffusion_loss(const ad::Var& predicted, const ad::Var& target);

/// MSE between first-order frame differences of [F, J, 6] rotation features.
ad::Var angular_velocity_loss(const ad::Var& predicted_rot, const ad::Var& target_rot);

/// MSE between FK joint positions. Root positions are in meters.
ad::Var global_position_loss(const SkeletonTopology& topology, const ad::Var& predicted_root,
                             const ad::Var& predicted_rot, const ad::Var& target_root, const ad::Var& target_rot);

/// MSE between frame differences of FK joint positions.
ad::Var global_velocity_loss(const SkeletonTopology& topology, const ad::Var& predicted_root,
                             const ad::Var& predicted_rot, const ad::Var& target_root, const ad::Var& target_rot);

/// Mean toe speed over (frame, toe) pairs in contact; frame f pairs with the
/// displacement from f - 1. Zero when no pair is in contact.
ad::Var foot_contact_loss(const SkeletonTopology& topology, const ad::Var& predicted_root,
                          const ad::Var& predicted_rot, const Tensor& contact);

/// Differentiable inverse of normalize_root on a [F, 3] variable.
ad::Var denormalize_root(const ad::Var& root, const NormStats& stats);

}  // namespace skeldiff
