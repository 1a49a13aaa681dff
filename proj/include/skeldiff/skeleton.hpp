#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "skeldiff/autograd.hpp"
#include "skeldiff/tensor.hpp"

namespace skeldiff {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// First two columns of a rotation matrix, column-major: (c1.x, c1.y, c1.z, c2.x, c2.y, c2.z).
struct Rotation6D {
  std::array<double, 6> v{1, 0, 0, 0, 1, 0};
};

/// Joint hierarchy with rest offsets. Joints are topologically sorted:
/// parent_index[0] == -1 and parent_index[j] < j otherwise.
class SkeletonTopology {
 public:
  SkeletonTopology() = default;

  /// Validates and resolves `toe_names` by exact match. Throws TopologyError on
  /// structural problems and ConfigError on unknown toe names.
  static SkeletonTopology build(std::vector<std::string> names, std::vector<int> parents,
                                std::vector<Vec3> offsets, const std::vector<std::string>& toe_names);

  int joint_count() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& joint_names() const { return names_; }
  const std::vector<int>& parent_index() const { return parents_; }
  const std::vector<Vec3>& rest_offsets() const { return offsets_; }
  const std::vector<int>& toe_joint_ids() const { return toes_; }

  /// Number of edges between joint j and the root.
  int depth(int j) const;
  bool is_leaf(int j) const;
  /// Index of the named joint, or -1.
  int find(const std::string& name) const;

  /// Strict ancestors of j in ascending index order (root first).
  std::vector<int> ancestors(int j) const;

  bool operator==(const SkeletonTopology&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<int> parents_;
  std::vector<Vec3> offsets_;
  std::vector<int> toes_;
  std::vector<int> depth_;
};

using TopologyPtr = std::shared_ptr<const SkeletonTopology>;

/// Joint-attention visibility over J + 1 tokens ordered (root-position token, joint 0, ..., joint J-1).
class AncestorMask {
 public:
  AncestorMask() = default;
  AncestorMask(int tokens, std::vector<std::uint8_t> allowed);

  int token_count() const { return tokens_; }
  bool allowed(int query, int key) const { return (*allowed_)[static_cast<std::size_t>(query) * tokens_ + key] != 0; }
  std::shared_ptr<const std::vector<std::uint8_t>> data() const { return allowed_; }

 private:
  int tokens_ = 0;
  std::shared_ptr<const std::vector<std::uint8_t>> allowed_;
};

AncestorMask build_ancestor_mask(const SkeletonTopology& topology);

Mat3 rot6d_to_matrix(const Rotation6D& r);
Rotation6D matrix_to_rot6d(const Mat3& m);

Mat3 rotation_about(const Vec3& axis, double radians);

/// Decode rotation `j` of frame `f` from a [F, J, 6] tensor.
Mat3 rot6d_at(const Tensor& joint_rot, int f, int j);
void set_rot6d(Tensor& joint_rot, int f, int j, const Mat3& m);

/// Global joint positions [F, J, 3] from root positions [F, 3] and local 6D rotations [F, J, 6].
Tensor forward_kinematics(const SkeletonTopology& topology, const Tensor& root_pos, const Tensor& joint_rot);

/// Global joint rotations, one per frame and joint.
std::vector<std::vector<Mat3>> global_rotations(const SkeletonTopology& topology, const Tensor& joint_rot);

/// Differentiable forward kinematics with the same contract.
ad::Var forward_kinematics(const SkeletonTopology& topology, const ad::Var& root_pos, const ad::Var& joint_rot);

}  // namespace skeldiff
