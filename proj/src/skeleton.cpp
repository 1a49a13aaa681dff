#include "skeldiff/skeleton.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>

#include "skeldiff/error.hpp"

namespace skeldiff {

namespace {

constexpr double kDegenerateNorm = 1e-12;

struct GramSchmidt {
  Vec3 b;
  Vec3 c1;
  Vec3 c2;
  double norm_a = 0;
  double norm_u = 0;
  double dot = 0;
  Mat3 matrix;
};

GramSchmidt gram_schmidt(const double* v) {
  GramSchmidt g;
  const Vec3 a(v[0], v[1], v[2]);
  g.b = Vec3(v[3], v[4], v[5]);
  if (!a.allFinite() || !g.b.allFinite()) throw DegenerateRotationError("non-finite 6D rotation");
  g.norm_a = a.norm();
  if (g.norm_a < kDegenerateNorm) throw DegenerateRotationError("6D rotation has a zero first column");
  g.c1 = a / g.norm_a;
  g.dot = g.c1.dot(g.b);
  const Vec3 u = g.b - g.dot * g.c1;
  g.norm_u = u.norm();
  if (g.norm_u < kDegenerateNorm * std::max(1.0, g.b.norm())) {
    throw DegenerateRotationError("6D rotation columns are parallel or the second is zero");
  }
  g.c2 = u / g.norm_u;
  g.matrix.col(0) = g.c1;
  g.matrix.col(1) = g.c2;
  g.matrix.col(2) = g.c1.cross(g.c2);
  return g;
}

// Pulls a gradient on the decoded matrix back to the six raw components.
void gram_schmidt_backward(const GramSchmidt& g, const Mat3& grad_m, double* grad_v) {
  Vec3 gc1 = grad_m.col(0);
  Vec3 gc2 = grad_m.col(1);
  const Vec3 gc3 = grad_m.col(2);
  gc1 += g.c2.cross(gc3);
  gc2 += gc3.cross(g.c1);
  const Vec3 gu = (gc2 - g.c2 * g.c2.dot(gc2)) / g.norm_u;
  const Vec3 gb = gu - g.c1 * g.c1.dot(gu);
  gc1 -= g.dot * gu + g.b * g.c1.dot(gu);
  const Vec3 ga = (gc1 - g.c1 * g.c1.dot(gc1)) / g.norm_a;
  for (int i = 0; i < 3; ++i) {
    grad_v[i] += ga[i];
    grad_v[3 + i] += gb[i];
  }
}

void check_motion_shapes(const SkeletonTopology& topology, const Tensor& root_pos, const Tensor& joint_rot) {
  const int joints = topology.joint_count();
  if (root_pos.rank() != 2 || root_pos.dim(1) != 3 || joint_rot.rank() != 3 || joint_rot.dim(1) != joints ||
      joint_rot.dim(2) != 6 || joint_rot.dim(0) != root_pos.dim(0)) {
    throw ShapeError("forward_kinematics: root " + shape_str(root_pos.shape()) + " rotations " +
                     shape_str(joint_rot.shape()) + " for " + std::to_string(joints) + " joints");
  }
}

}  // namespace

SkeletonTopology SkeletonTopology::build(std::vector<std::string> names, std::vector<int> parents,
                                         std::vector<Vec3> offsets, const std::vector<std::string>& toe_names) {
  if (names.empty()) throw TopologyError("skeleton needs at least one joint");
  if (parents.size() != names.size() || offsets.size() != names.size()) {
    throw TopologyError("names, parents and offsets must have equal length");
  }
  if (parents[0] != -1) throw TopologyError("joint 0 must be the root (parent -1)");
  for (std::size_t j = 1; j < parents.size(); ++j) {
    if (parents[j] < 0) throw TopologyError("multiple roots: joint " + names[j] + " has no parent");
    if (parents[j] >= static_cast<int>(j)) {
      throw TopologyError("joint " + names[j] + " references a later or identical parent index " +
                          std::to_string(parents[j]));
    }
  }
  SkeletonTopology t;
  t.names_ = std::move(names);
  t.parents_ = std::move(parents);
  t.offsets_ = std::move(offsets);
  t.depth_.assign(t.names_.size(), 0);
  for (std::size_t j = 1; j < t.parents_.size(); ++j) t.depth_[j] = t.depth_[t.parents_[j]] + 1;
  for (const auto& toe : toe_names) {
    const int id = t.find(toe);
    if (id < 0) throw ConfigError("unknown toe joint '" + toe + "'");
    if (!t.is_leaf(id)) throw TopologyError("toe joint '" + toe + "' is not a leaf");
    t.toes_.push_back(id);
  }
  return t;
}

int SkeletonTopology::depth(int j) const {
  if (j < 0 || j >= joint_count()) throw TopologyError("joint index out of range");
  return depth_[j];
}

bool SkeletonTopology::is_leaf(int j) const {
  for (std::size_t k = j + 1; k < parents_.size(); ++k)
    if (parents_[k] == j) return false;
  return true;
}

int SkeletonTopology::find(const std::string& name) const {
  for (std::size_t j = 0; j < names_.size(); ++j)
    if (names_[j] == name) return static_cast<int>(j);
  return -1;
}

std::vector<int> SkeletonTopology::ancestors(int j) const {
  if (j < 0 || j >= joint_count()) {
    throw TopologyError("joint index " + std::to_string(j) + " out of range");
  }
  std::vector<int> out;
  for (int p = parents_[j]; p >= 0; p = parents_[p]) out.push_back(p);
  std::reverse(out.begin(), out.end());
  return out;
}

AncestorMask::AncestorMask(int tokens, std::vector<std::uint8_t> allowed)
    : tokens_(tokens), allowed_(std::make_shared<const std::vector<std::uint8_t>>(std::move(allowed))) {}

AncestorMask build_ancestor_mask(const SkeletonTopology& topology) {
  const int joints = topology.joint_count();
  const int tokens = joints + 1;
  std::vector<std::uint8_t> m(static_cast<std::size_t>(tokens) * tokens, 0);
  auto set = [&](int q, int k) { m[static_cast<std::size_t>(q) * tokens + k] = 1; };
  set(0, 0);
  set(0, 1);
  for (int j = 0; j < joints; ++j) {
    const int q = j + 1;
    set(q, 0);
    set(q, q);
    for (int a : topology.ancestors(j)) set(q, a + 1);
  }
  return AncestorMask(tokens, std::move(m));
}

Mat3 rot6d_to_matrix(const Rotation6D& r) { return gram_schmidt(r.v.data()).matrix; }

Rotation6D matrix_to_rot6d(const Mat3& m) {
  if (!m.allFinite() || (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-4 ||
      std::abs(m.determinant() - 1.0) > 1e-4) {
    throw ValidationError("matrix_to_rot6d: input is not a proper rotation");
  }
  Rotation6D r;
  for (int i = 0; i < 3; ++i) {
    r.v[i] = m(i, 0);
    r.v[3 + i] = m(i, 1);
  }
  return r;
}

Mat3 rotation_about(const Vec3& axis, double radians) {
  return Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix();
}

Mat3 rot6d_at(const Tensor& joint_rot, int f, int j) {
  const std::size_t off = (static_cast<std::size_t>(f) * joint_rot.dim(1) + j) * 6;
  return gram_schmidt(joint_rot.data() + off).matrix;
}

void set_rot6d(Tensor& joint_rot, int f, int j, const Mat3& m) {
  const std::size_t off = (static_cast<std::size_t>(f) * joint_rot.dim(1) + j) * 6;
  for (int i = 0; i < 3; ++i) {
    joint_rot[off + i] = m(i, 0);
    joint_rot[off + 3 + i] = m(i, 1);
  }
}

std::vector<std::vector<Mat3>> global_rotations(const SkeletonTopology& topology, const Tensor& joint_rot) {
  const int frames = joint_rot.dim(0);
  const int joints = topology.joint_count();
  const auto& parents = topology.parent_index();
  std::vector<std::vector<Mat3>> out(frames, std::vector<Mat3>(joints));
  for (int f = 0; f < frames; ++f) {
    for (int j = 0; j < joints; ++j) {
      const Mat3 local = rot6d_at(joint_rot, f, j);
      out[f][j] = parents[j] < 0 ? local : Mat3(out[f][parents[j]] * local);
    }
  }
  return out;
}

Tensor forward_kinematics(const SkeletonTopology& topology, const Tensor& root_pos, const Tensor& joint_rot) {
  check_motion_shapes(topology, root_pos, joint_rot);
  const int frames = root_pos.dim(0);
  const int joints = topology.joint_count();
  const auto& parents = topology.parent_index();
  const auto& offsets = topology.rest_offsets();
  Tensor out({frames, joints, 3});
  std::vector<Mat3> rg(joints);
  std::vector<Vec3> pos(joints);
  for (int f = 0; f < frames; ++f) {
    for (int j = 0; j < joints; ++j) {
      const Mat3 local = rot6d_at(joint_rot, f, j);
      const int p = parents[j];
      if (p < 0) {
        rg[j] = local;
        pos[j] = Vec3(root_pos.at(f, 0), root_pos.at(f, 1), root_pos.at(f, 2));
      } else {
        rg[j] = rg[p] * local;
        pos[j] = pos[p] + rg[p] * offsets[j];
      }
      for (int k = 0; k < 3; ++k) out.at(f, j, k) = pos[j][k];
    }
  }
  return out;
}

ad::Var forward_kinematics(const SkeletonTopology& topology, const ad::Var& root_pos, const ad::Var& joint_rot) {
  check_motion_shapes(topology, root_pos->value, joint_rot->value);
  Tensor out = forward_kinematics(topology, root_pos->value, joint_rot->value);
  const auto topo = std::make_shared<const SkeletonTopology>(topology);
  return ad::make_op(std::move(out), {root_pos, joint_rot}, [topo, root_pos, joint_rot](ad::Node& n) {
    const int frames = root_pos->value.dim(0);
    const int joints = topo->joint_count();
    const auto& parents = topo->parent_index();
    const auto& offsets = topo->rest_offsets();
    std::vector<GramSchmidt> gs(joints);
    std::vector<Mat3> rg(joints);
    std::vector<Vec3> gpos(joints);
    std::vector<Mat3> grg(joints);
    Tensor* groot = root_pos->requires_grad ? &root_pos->grad_buffer() : nullptr;
    Tensor* grot = joint_rot->requires_grad ? &joint_rot->grad_buffer() : nullptr;
    for (int f = 0; f < frames; ++f) {
      for (int j = 0; j < joints; ++j) {
        gs[j] = gram_schmidt(joint_rot->value.data() + (static_cast<std::size_t>(f) * joints + j) * 6);
        rg[j] = parents[j] < 0 ? gs[j].matrix : Mat3(rg[parents[j]] * gs[j].matrix);
        gpos[j] = Vec3(n.grad.at(f, j, 0), n.grad.at(f, j, 1), n.grad.at(f, j, 2));
        grg[j].setZero();
      }
      for (int j = joints - 1; j >= 0; --j) {
        const int p = parents[j];
        Mat3 grad_local;
        if (p < 0) {
          grad_local = grg[j];
          if (groot)
            for (int k = 0; k < 3; ++k) groot->at(f, k) += gpos[j][k];
        } else {
          gpos[p] += gpos[j];
          grg[p] += gpos[j] * offsets[j].transpose();
          grg[p] += grg[j] * gs[j].matrix.transpose();
          grad_local = rg[p].transpose() * grg[j];
        }
        if (grot) {
          gram_schmidt_backward(gs[j], grad_local, grot->data() + (static_cast<std::size_t>(f) * joints + j) * 6);
        }
      }
    }
  });
}

}  // namespace skeldiff
