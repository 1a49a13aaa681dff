#include "fixtures.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <atomic>
#include <fstream>
#include <functional>
#include <unistd.h>

#include "skeldiff/bvh.hpp"

namespace fixtures {

TopologyPtr chain3() {
  return std::make_shared<const SkeletonTopology>(SkeletonTopology::build(
      {"Hips", "Leg", "Toe_End"}, {-1, 0, 1}, {Vec3(0, 0, 0), Vec3(0, -0.5, 0), Vec3(0, -0.45, 0)}, {"Toe_End"}));
}

TopologyPtr biped7() {
  return std::make_shared<const SkeletonTopology>(SkeletonTopology::build(
      {"Hips", "LeftLeg", "LeftToe_End", "RightLeg", "RightToe_End", "Spine", "Head_End"}, {-1, 0, 1, 0, 3, 0, 5},
      {Vec3(0, 0, 0), Vec3(0.1, -0.5, 0), Vec3(0, -0.45, 0), Vec3(-0.1, -0.5, 0), Vec3(0, -0.45, 0),
       Vec3(0, 0.3, 0), Vec3(0, 0.3, 0)},
      {"LeftToe_End", "RightToe_End"}));
}

TopologyPtr chain_n(int joints) {
  std::vector<std::string> names;
  std::vector<int> parents;
  std::vector<Vec3> offsets;
  for (int j = 0; j < joints; ++j) {
    names.push_back("J" + std::to_string(j));
    parents.push_back(j - 1);
    offsets.push_back(j == 0 ? Vec3::Zero() : Vec3(0, 0.2, 0.05));
  }
  return std::make_shared<const SkeletonTopology>(SkeletonTopology::build(names, parents, offsets, {}));
}

TopologyPtr star(int leaves) {
  std::vector<std::string> names{"Center"};
  std::vector<int> parents{-1};
  std::vector<Vec3> offsets{Vec3::Zero()};
  for (int i = 0; i < leaves; ++i) {
    names.push_back("Leaf" + std::to_string(i));
    parents.push_back(0);
    offsets.push_back(Vec3(std::cos(i), 0.1 * i, std::sin(i)));
  }
  return std::make_shared<const SkeletonTopology>(SkeletonTopology::build(names, parents, offsets, {}));
}

TopologyPtr random_tree(int joints, Rng& rng) {
  std::vector<std::string> names;
  std::vector<int> parents;
  std::vector<Vec3> offsets;
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int j = 0; j < joints; ++j) {
    names.push_back("N" + std::to_string(j));
    parents.push_back(j == 0 ? -1 : std::uniform_int_distribution<int>(0, j - 1)(rng));
    offsets.push_back(j == 0 ? Vec3::Zero() : Vec3(u(rng), u(rng), u(rng)));
  }
  return std::make_shared<const SkeletonTopology>(SkeletonTopology::build(names, parents, offsets, {}));
}

Mat3 random_rotation(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

Tensor random_rotations(int frames, int joints, Rng& rng) {
  Tensor t({frames, joints, 6});
  for (int f = 0; f < frames; ++f)
    for (int j = 0; j < joints; ++j) set_rot6d(t, f, j, random_rotation(rng));
  return t;
}

Tensor identity_rotations(int frames, int joints) {
  Tensor t({frames, joints, 6});
  for (int f = 0; f < frames; ++f)
    for (int j = 0; j < joints; ++j) set_rot6d(t, f, j, Mat3::Identity());
  return t;
}

MotionClip walk_clip(const TopologyPtr& topology, int frames, double speed, double phase, int style_id) {
  MotionClip c;
  c.topology = topology;
  c.style_id = style_id;
  c.name = "walk";
  const int joints = topology->joint_count();
  c.root_pos = Tensor({frames, 3});
  c.joint_rot = Tensor({frames, joints, 6});
  const double w = 2.0 * std::acos(-1.0) / 16.0;
  for (int f = 0; f < frames; ++f) {
    c.root_pos.at(f, 0) = speed * f;
    c.root_pos.at(f, 1) = 0.95 + 0.02 * std::sin(2 * w * f + phase);
    c.root_pos.at(f, 2) = 0.1 * std::sin(0.5 * w * f);
    for (int j = 0; j < joints; ++j) {
      const double side = (j % 2 == 0) ? 1.0 : -1.0;
      const double angle = j == 0 ? 0.1 * std::sin(w * f) : 0.35 * side * std::sin(w * f + phase + 0.3 * j);
      set_rot6d(c.joint_rot, f, j, rotation_about(j == 0 ? Vec3::UnitY() : Vec3::UnitZ(), angle));
    }
  }
  return c;
}

MotionClip grounded(MotionClip clip) {
  const auto& toes = clip.topology->toe_joint_ids();
  if (toes.empty()) return clip;
  const Tensor pos = forward_kinematics(*clip.topology, clip.root_pos, clip.joint_rot);
  for (int f = 0; f < clip.frame_count(); ++f) {
    double lowest = pos.at(f, toes.front(), 1);
    for (int t : toes) lowest = std::min(lowest, pos.at(f, t, 1));
    clip.root_pos.at(f, 1) -= lowest;
  }
  return clip;
}

Tensor recursive_fk(const SkeletonTopology& topology, const Tensor& root, const Tensor& rot) {
  const int frames = root.dim(0);
  const int joints = topology.joint_count();
  Tensor out({frames, joints, 3});
  for (int f = 0; f < frames; ++f) {
    std::function<void(int, const Mat3&, const Vec3&)> visit = [&](int j, const Mat3& parent_rot, const Vec3& pos) {
      Rotation6D r;
      for (int k = 0; k < 6; ++k) r.v[k] = rot.at(f, j, k);
      const Mat3 global = parent_rot * rot6d_to_matrix(r);
      for (int k = 0; k < 3; ++k) out.at(f, j, k) = pos[k];
      for (int c = 0; c < joints; ++c) {
        if (topology.parent_index()[c] == j) visit(c, global, pos + global * topology.rest_offsets()[c]);
      }
    };
    visit(0, Mat3::Identity(), Vec3(root.at(f, 0), root.at(f, 1), root.at(f, 2)));
  }
  return out;
}

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.base_channels = 8;
  c.heads = 2;
  c.groupnorm_groups = 2;
  c.style_count = 3;
  c.style_embed_dim = 8;
  c.time_embed_dim = 8;
  c.trajectory_embed_dim = 8;
  c.frames = 8;
  c.past_frames = 4;
  return c;
}

DenoiserInput random_input(const DenoiserConfig& config, const TopologyPtr& topology, Rng& rng, bool with_past) {
  const int j = topology->joint_count();
  DenoiserInput in;
  in.topology = topology;
  if (with_past) {
    in.past_root = normal_tensor({config.past_frames, 3}, rng);
    in.past_rot = random_rotations(config.past_frames, j, rng);
  }
  in.noisy_root = normal_tensor({config.frames, 3}, rng);
  in.noisy_rot = normal_tensor({config.frames, j, 6}, rng);
  in.trajectory.positions = normal_tensor({config.frames, 2}, rng);
  in.trajectory.rotations = random_rotations(config.frames, 1, rng).reshaped({config.frames, 6});
  in.style = StyleCondition::single(1);
  in.t = 17;
  return in;
}

AttentionWeights random_attention(ParameterStore& store, int q_in, int kv_in, int width, Rng& rng) {
  return AttentionWeights{Linear(store, "q", q_in, width, rng), Linear(store, "k", kv_in, width, rng),
                          Linear(store, "v", kv_in, width, rng), Linear(store, "o", width, width, rng)};
}

double token_sensitivity(const std::function<Tensor(const Tensor&)>& layer, const Tensor& grid, int q, int k) {
  const int frames = grid.dim(0);
  const int tokens = grid.dim(1);
  const int channels = grid.dim(2);
  const double h = 1e-5;
  double worst = 0;
  for (int f = 0; f < frames; ++f)
    for (int c = 0; c < channels; ++c) {
      Tensor up = grid;
      Tensor down = grid;
      up.at(f, k, c) += h;
      down.at(f, k, c) -= h;
      const Tensor a = layer(up);
      const Tensor b = layer(down);
      for (int g = 0; g < frames; ++g)
        for (int e = 0; e < channels; ++e) {
          const std::size_t i = (static_cast<std::size_t>(g) * tokens + q) * channels + e;
          worst = std::max(worst, std::abs(a[i] - b[i]) / (2 * h));
        }
    }
  return worst;
}

RunConfig tiny_run_config() {
  RunConfig c;
  c.merge_json({{"model", {{"base_channels", 8}, {"heads", 2}, {"groupnorm_groups", 2}, {"style_embed_dim", 8},
                           {"time_embed_dim", 8}, {"trajectory_embed_dim", 8}, {"F", 8}, {"F_past", 4}}},
                {"diffusion", {{"train_steps", 10}, {"infer_steps", 2}}},
                {"data", {{"stride", 4}, {"toe_names", {"Toe_End"}}}},
                {"optim", {{"steps", 3}, {"batch_size", 2}, {"lr", 1e-3}, {"log_every", 0}}},
                {"metrics", {{"classifier_hidden", 8}, {"classifier_window", 8}, {"classifier_steps", 20}}}});
  return c;
}

std::filesystem::path write_walk_corpus(const std::filesystem::path& dir, int per_style, int frames) {
  const auto topo = chain3();
  std::ofstream manifest(dir / "manifest.jsonl");
  for (int style = 0; style < 2; ++style) {
    const std::string label = style == 0 ? "calm" : "brisk";
    std::filesystem::create_directories(dir / label);
    for (int i = 0; i < per_style; ++i) {
      const std::string rel = label + "/" + label + std::to_string(i) + ".bvh";
      write_bvh_file(dir / rel, *topo, walk_clip(topo, frames, 0.01 + 0.03 * style + 0.002 * i, 0.3 * i, style));
      manifest << R"({"path": ")" << rel << R"(", "style_name": ")" << label << R"(", "dataset_name": "walks"})"
               << "\n";
    }
  }
  return dir / "manifest.jsonl";
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("skeldiff_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace fixtures
