#include "skeldiff/losses.hpp"

#include "skeldiff/error.hpp"

namespace skeldiff {

namespace {

ad::Var frame_difference(const ad::Var& x, const char* what) {
  const int frames = x->value.dim(0);
  if (frames < 2) throw ShapeError(std::string(what) + " needs at least two frames");
  return ad::sub(ad::slice(x, 0, 1, frames - 1), ad::slice(x, 0, 0, frames - 1));
}

}  // namespace

void LossWeights::validate() const {
  if (!(diffusion > 0)) throw ConfigError("loss.w_d must be positive");
  for (double w : {angular_velocity, global_position, global_velocity, foot_contact}) {
    if (!(w >= 0)) throw ConfigError("loss weights must be nonnegative");
  }
}

ad::Var diffusion_loss(const ad::Var& predicted, const ad::Var& target) { return ad::mse(predicted, target); }

ad::Var angular_velocity_loss(const ad::Var& predicted_rot, const ad::Var& target_rot) {
  require_same_shape(predicted_rot->value, target_rot->value, "angular_velocity_loss");
  return ad::mse(frame_difference(predicted_rot, "angular_velocity_loss"),
                 frame_difference(target_rot, "angular_velocity_loss"));
}

ad::Var global_position_loss(const SkeletonTopology& topology, const ad::Var& predicted_root,
                             const ad::Var& predicted_rot, const ad::Var& target_root, const ad::Var& target_rot) {
  return ad::mse(forward_kinematics(topology, predicted_root, predicted_rot),
                 forward_kinematics(topology, target_root, target_rot));
}

ad::Var global_velocity_loss(const SkeletonTopology& topology, const ad::Var& predicted_root,
                             const ad::Var& predicted_rot, const ad::Var& target_root, const ad::Var& target_rot) {
  auto p = forward_kinematics(topology, predicted_root, predicted_rot);
  auto t = forward_kinematics(topology, target_root, target_rot);
  return ad::mse(frame_difference(p, "global_velocity_loss"), frame_difference(t, "global_velocity_loss"));
}

ad::Var foot_contact_loss(const SkeletonTopology& topology, const ad::Var& predicted_root,
                          const ad::Var& predicted_rot, const Tensor& contact) {
  const auto& toes = topology.toe_joint_ids();
  const int frames = predicted_root->value.dim(0);
  if (contact.rank() != 2 || contact.dim(0) != frames || contact.dim(1) != static_cast<int>(toes.size())) {
    throw ShapeError("foot_contact_loss: contact " + shape_str(contact.shape()) + " for " +
                     std::to_string(frames) + " frames and " + std::to_string(toes.size()) + " toes");
  }
  if (toes.empty() || frames < 2) return ad::constant(Tensor::scalar(0.0));
  Tensor mask({frames - 1, static_cast<int>(toes.size())});
  double count = 0;
  for (int f = 1; f < frames; ++f) {
    for (int t = 0; t < contact.dim(1); ++t) {
      mask.at(f - 1, t) = contact.at(f, t) > 0.5 ? 1.0 : 0.0;
      count += mask.at(f - 1, t);
    }
  }
  if (count == 0) return ad::constant(Tensor::scalar(0.0));
  auto pos = ad::take(forward_kinematics(topology, predicted_root, predicted_rot), 1, toes);
  auto speed = ad::row_norms(frame_difference(pos, "foot_contact_loss"));
  return ad::scale(ad::sum(ad::mul(speed, ad::constant(std::move(mask)))), 1.0 / count);
}

ad::Var denormalize_root(const ad::Var& root, const NormStats& stats) {
  Tensor half_range({1, 3});
  Tensor offset({1, 3});
  for (int k = 0; k < 3; ++k) {
    half_range[k] = 0.5 * (stats.max[k] - stats.min[k]);
    offset[k] = half_range[k] + stats.min[k];
  }
  return ad::add(ad::mul(root, ad::constant(std::move(half_range))), ad::constant(std::move(offset)));
}

}  // namespace skeldiff
