#include "skeldiff/generation.hpp"

#include <chrono>
#include <cmath>

#include "skeldiff/bvh.hpp"
#include "skeldiff/error.hpp"

namespace skeldiff {

namespace {

Tensor pack(const Tensor& root, const Tensor& rot) {
  Tensor out({static_cast<int>(root.size() + rot.size())});
  std::copy(root.values().begin(), root.values().end(), out.values().begin());
  std::copy(rot.values().begin(), rot.values().end(), out.values().begin() + root.size());
  return out;
}

SampledWindow unpack(const Tensor& flat, int frames, int joints) {
  SampledWindow w{Tensor({frames, 3}), Tensor({frames, joints, 6})};
  std::copy(flat.values().begin(), flat.values().begin() + w.root.size(), w.root.values().begin());
  std::copy(flat.values().begin() + w.root.size(), flat.values().end(), w.rot.values().begin());
  return w;
}

}  // namespace

Tensor blend_styles(const Tensor& table, const std::vector<std::pair<int, double>>& weights) {
  if (table.rank() != 2) throw ShapeError("blend_styles: table must be [S, D]");
  if (weights.empty()) throw ConfigError("blend_styles: no style weights");
  double total = 0;
  for (const auto& [id, w] : weights) {
    if (id < 0 || id >= table.dim(0)) throw ConfigError("unknown style id " + std::to_string(id));
    if (!(w >= 0)) throw ConfigError("style weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ConfigError("style weights must sum to 1");
  const int d = table.dim(1);
  Tensor out({d}, 0.0);
  for (const auto& [id, w] : weights)
    for (int k = 0; k < d; ++k) out[k] += w * table.at(id, k);
  return out;
}

TrajectorySignal normalize_trajectory(const TrajectorySignal& traj, const NormStats& stats) {
  TrajectorySignal out = traj;
  for (int f = 0; f < traj.frame_count(); ++f) {
    out.positions.at(f, 0) = 2.0 * (traj.positions.at(f, 0) - stats.min[0]) / (stats.max[0] - stats.min[0]) - 1.0;
    out.positions.at(f, 1) = 2.0 * (traj.positions.at(f, 1) - stats.min[2]) / (stats.max[2] - stats.min[2]) - 1.0;
  }
  return out;
}

SampledWindow generate_window(const Denoiser& model, const TopologyPtr& topology, const StyleCondition& style,
                              const TrajectorySignal& trajectory, const Tensor& past_root, const Tensor& past_rot,
                              const DiffusionSchedule& schedule, const SamplerSettings& settings, Rng& rng) {
  const int frames = model.config().frames;
  const int joints = topology->joint_count();
  if (trajectory.frame_count() != frames) {
    throw ShapeError("trajectory chunk has " + std::to_string(trajectory.frame_count()) + " frames, expected " +
                     std::to_string(frames));
  }
  model.style_embedding(style);  // validates ids and weights before sampling

  ad::NoGradGuard no_grad;
  DenoiserInput in;
  in.topology = topology;
  in.past_root = past_root;
  in.past_rot = past_rot;
  in.trajectory = trajectory;
  const DenoiseFn denoise = [&](const Tensor& x_t, int t, bool conditional) {
    SampledWindow x = unpack(x_t, frames, joints);
    in.noisy_root = std::move(x.root);
    in.noisy_rot = std::move(x.rot);
    in.style = conditional ? style : StyleCondition::null_style();
    in.t = t;
    const auto out = model.forward(in);
    return pack(out.root->value, out.rot->value);
  };
  const Shape shape{frames * 3 + frames * joints * 6};
  return unpack(ddim_sample_loop(denoise, shape, schedule, settings.ddim_steps, settings.guidance, rng), frames,
                joints);
}

GenerationResult autoregressive_generate(const Denoiser& model, const NormStats& stats,
                                         const DiffusionSchedule& schedule, const GenerationRequest& request) {
  const auto& cfg = model.config();
  if (!request.topology) throw ConfigError("generation request has no skeleton");
  const int frames = cfg.frames;
  const int past = cfg.past_frames;
  const int total = request.trajectory.frame_count();
  if (total <= 0 || total % frames != 0) {
    throw ConfigError("trajectory length " + std::to_string(total) + " is not a positive multiple of F = " +
                      std::to_string(frames));
  }
  const int chunks = total / frames;
  if (request.styles.size() != 1 && static_cast<int>(request.styles.size()) != chunks) {
    throw ConfigError("request gives " + std::to_string(request.styles.size()) + " style entries for " +
                      std::to_string(chunks) + " chunks");
  }
  const int joints = request.topology->joint_count();

  Tensor past_root;
  Tensor past_rot;
  if (request.seed_motion && past > 0) {
    const MotionClip& seed = *request.seed_motion;
    if (seed.topology && seed.topology->joint_count() != joints) {
      throw ConfigError("seed motion skeleton does not match the request skeleton");
    }
    if (seed.frame_count() < past) {
      throw ConfigError("seed motion has " + std::to_string(seed.frame_count()) + " frames, needs " +
                        std::to_string(past));
    }
    const int start = seed.frame_count() - past;
    past_root = normalize_root(seed.root_pos.slice0(start, past), stats);
    past_rot = seed.joint_rot.slice0(start, past);
  }

  const TrajectorySignal traj = normalize_trajectory(request.trajectory, stats);
  Rng rng(request.seed);
  GenerationResult result;
  Tensor all_root({total, 3});
  Tensor all_rot({total, joints, 6});
  for (int c = 0; c < chunks; ++c) {
    const StyleCondition& style = request.styles.size() == 1 ? request.styles[0] : request.styles[c];
    const TrajectorySignal chunk{traj.positions.slice0(c * frames, frames), traj.rotations.slice0(c * frames, frames)};
    WindowRecord rec;
    rec.past_root = past_root;
    rec.past_rot = past_rot;
    const auto t0 = std::chrono::steady_clock::now();
    rec.output = generate_window(model, request.topology, style, chunk, past_root, past_rot, schedule,
                                 request.sampler, rng);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::copy(rec.output.root.values().begin(), rec.output.root.values().end(),
              all_root.values().begin() + static_cast<std::ptrdiff_t>(c) * frames * 3);
    std::copy(rec.output.rot.values().begin(), rec.output.rot.values().end(),
              all_rot.values().begin() + static_cast<std::ptrdiff_t>(c) * frames * joints * 6);
    if (past > 0) {
      past_root = rec.output.root.slice0(frames - past, past);
      past_rot = rec.output.rot.slice0(frames - past, past);
    }
    result.windows.push_back(std::move(rec));
  }
  result.clip.topology = request.topology;
  result.clip.frame_rate = request.frame_rate;
  result.clip.root_pos = denormalize_root(all_root, stats);
  result.clip.joint_rot = std::move(all_rot);
  result.clip.name = "generated";
  return result;
}

void export_generation(const MotionClip& clip, const std::filesystem::path& path) {
  if (clip.frame_count() == 0) throw ExportError("cannot export an empty clip");
  write_bvh_file(path, *clip.topology, clip);
}

}  // namespace skeldiff
