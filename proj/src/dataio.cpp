#include "skeldiff/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "skeldiff/error.hpp"

namespace skeldiff {

using nlohmann::json;

NormStats compute_norm_stats(const std::vector<MotionClip>& training_clips) {
  if (training_clips.empty()) throw StatsError("normalization stats need at least one clip");
  NormStats s;
  for (int k = 0; k < 3; ++k) {
    s.min[k] = std::numeric_limits<double>::infinity();
    s.max[k] = -std::numeric_limits<double>::infinity();
  }
  for (const auto& clip : training_clips)
    for (int f = 0; f < clip.frame_count(); ++f)
      for (int k = 0; k < 3; ++k) {
        s.min[k] = std::min(s.min[k], clip.root_pos.at(f, k));
        s.max[k] = std::max(s.max[k], clip.root_pos.at(f, k));
      }
  for (int k = 0; k < 3; ++k) {
    if (!(s.min[k] < s.max[k])) {
      throw StatsError("root position axis " + std::to_string(k) + " has no range (min = max)");
    }
  }
  return s;
}

Tensor normalize_root(const Tensor& root_pos, const NormStats& stats) {
  Tensor out = root_pos;
  const std::size_t rows = out.size() / 3;
  for (std::size_t r = 0; r < rows; ++r)
    for (int k = 0; k < 3; ++k)
      out[r * 3 + k] = 2.0 * (root_pos[r * 3 + k] - stats.min[k]) / (stats.max[k] - stats.min[k]) - 1.0;
  return out;
}

Tensor denormalize_root(const Tensor& root_pos, const NormStats& stats) {
  Tensor out = root_pos;
  const std::size_t rows = out.size() / 3;
  for (std::size_t r = 0; r < rows; ++r)
    for (int k = 0; k < 3; ++k)
      out[r * 3 + k] = (root_pos[r * 3 + k] + 1.0) * 0.5 * (stats.max[k] - stats.min[k]) + stats.min[k];
  return out;
}

TrajectorySignal extract_trajectory(const MotionClip& clip, int start, int count) {
  if (start < 0 || count < 0 || start + count > clip.frame_count()) {
    throw ShapeError("trajectory span [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside clip of " + std::to_string(clip.frame_count()) + " frames");
  }
  const int joints = clip.joint_rot.dim(1);
  TrajectorySignal t{Tensor({count, 2}), Tensor({count, 6})};
  for (int f = 0; f < count; ++f) {
    t.positions.at(f, 0) = clip.root_pos.at(start + f, 0);
    t.positions.at(f, 1) = clip.root_pos.at(start + f, 2);
    for (int k = 0; k < 6; ++k) t.rotations.at(f, k) = clip.joint_rot[(static_cast<std::size_t>(start + f) * joints) * 6 + k];
  }
  return t;
}

TrajectorySignal trajectory_from_path(const std::vector<std::array<double, 3>>& x_z_yaw_deg) {
  const int n = static_cast<int>(x_z_yaw_deg.size());
  TrajectorySignal t{Tensor({n, 2}), Tensor({n, 6})};
  for (int f = 0; f < n; ++f) {
    t.positions.at(f, 0) = x_z_yaw_deg[f][0];
    t.positions.at(f, 1) = x_z_yaw_deg[f][1];
    const Rotation6D r = matrix_to_rot6d(rotation_about(Vec3::UnitY(), x_z_yaw_deg[f][2] * std::numbers::pi / 180.0));
    for (int k = 0; k < 6; ++k) t.rotations.at(f, k) = r.v[k];
  }
  return t;
}

Tensor label_foot_contacts(const MotionClip& clip, const ContactThresholds& thresholds) {
  const auto& toes = clip.topology->toe_joint_ids();
  if (toes.empty()) throw LabelingError("no toe joints configured for contact labeling");
  const Tensor pos = forward_kinematics(*clip.topology, clip.root_pos, clip.joint_rot);
  const int frames = clip.frame_count();
  const int n_toes = static_cast<int>(toes.size());
  Tensor contact({frames, n_toes}, 0.0);
  for (int f = 0; f < frames; ++f) {
    const int a = f == 0 ? 0 : f - 1;
    const int b = f == 0 ? std::min(1, frames - 1) : f;
    for (int t = 0; t < n_toes; ++t) {
      const int j = toes[t];
      double speed2 = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double d = pos.at(b, j, k) - pos.at(a, j, k);
        speed2 += d * d;
      }
      const bool low = pos.at(f, j, 1) < thresholds.height;
      const bool slow = std::sqrt(speed2) < thresholds.speed;
      contact.at(f, t) = (low && slow) ? 1.0 : 0.0;
    }
  }
  return contact;
}

std::vector<MotionWindow> make_windows(const MotionClip& clip, const WindowSpec& spec, const NormStats& stats,
                                       const ContactThresholds& thresholds) {
  if (spec.frames < 1 || spec.past_frames < 0 || spec.stride < 1) throw ConfigError("invalid window spec");
  std::vector<MotionWindow> out;
  const int total = clip.frame_count();
  const int span = spec.past_frames + spec.frames;
  if (total < span) return out;

  MotionClip normalized = clip;
  normalized.root_pos = normalize_root(clip.root_pos, stats);
  const Tensor contact = clip.topology->toe_joint_ids().empty()
                             ? Tensor({total, 0})
                             : label_foot_contacts(clip, thresholds);
  const int n_toes = contact.dim(1);
  for (int start = 0; start + span <= total; start += spec.stride) {
    MotionWindow w;
    w.topology = clip.topology;
    w.style_id = clip.style_id;
    w.dataset_id = clip.dataset_id;
    w.start = start;
    w.past_root = normalized.root_pos.slice0(start, spec.past_frames);
    w.past_rot = clip.joint_rot.slice0(start, spec.past_frames);
    w.cur_root = normalized.root_pos.slice0(start + spec.past_frames, spec.frames);
    w.cur_rot = clip.joint_rot.slice0(start + spec.past_frames, spec.frames);
    w.trajectory = extract_trajectory(normalized, start + spec.past_frames, spec.frames);
    w.contact = n_toes ? contact.slice0(start + spec.past_frames, spec.frames) : Tensor({spec.frames, 0});
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<double> balance_styles(const std::vector<MotionWindow>& windows) {
  std::map<int, int> counts;
  for (const auto& w : windows) ++counts[w.style_id];
  std::vector<double> weights(windows.size());
  const double styles = static_cast<double>(counts.size());
  for (std::size_t i = 0; i < windows.size(); ++i) weights[i] = 1.0 / (styles * counts[windows[i].style_id]);
  return weights;
}

Tensor gaussian_smooth(const Tensor& rows, double sigma) {
  if (!(sigma > 0)) return rows;
  const int n = rows.dim(0);
  const int d = static_cast<int>(rows.size() / std::max(n, 1));
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double z = std::accumulate(kernel.begin(), kernel.end(), 0.0);
  for (auto& k : kernel) k /= z;
  // Half-sample symmetric reflection: (c b a | a b c | c b a).
  auto reflect = [n](int i) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
  };
  Tensor out(rows.shape(), 0.0);
  for (int f = 0; f < n; ++f)
    for (int i = -radius; i <= radius; ++i) {
      const int src = reflect(f + i);
      for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(f) * d + c] += kernel[i + radius] * rows[static_cast<std::size_t>(src) * d + c];
    }
  return out;
}

TrajectorySignal rotate_trajectory(const TrajectorySignal& traj, double yaw) {
  TrajectorySignal out = traj;
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  const Mat3 ry = rotation_about(Vec3::UnitY(), yaw);
  for (int f = 0; f < traj.frame_count(); ++f) {
    const double x = traj.positions.at(f, 0);
    const double z = traj.positions.at(f, 1);
    out.positions.at(f, 0) = c * x + s * z;
    out.positions.at(f, 1) = -s * x + c * z;
    Rotation6D r;
    for (int k = 0; k < 6; ++k) r.v[k] = traj.rotations.at(f, k);
    const Rotation6D rotated = matrix_to_rot6d(ry * rot6d_to_matrix(r));
    for (int k = 0; k < 6; ++k) out.rotations.at(f, k) = rotated.v[k];
  }
  return out;
}

namespace {

struct AugmentDraw {
  bool smooth = false;
  bool rotate = false;
  double yaw = 0.0;
};

AugmentDraw draw_augmentation(Rng& rng, double p_smooth, double p_rotate) {
  if (p_smooth < 0 || p_smooth > 1 || p_rotate < 0 || p_rotate > 1) {
    throw ConfigError("augmentation probabilities must lie in [0, 1]");
  }
  AugmentDraw d;
  d.smooth = draw_uniform(rng) < p_smooth;
  d.rotate = draw_uniform(rng) < p_rotate;
  if (d.rotate) d.yaw = 2.0 * std::numbers::pi * draw_uniform(rng);
  return d;
}

void rotate_root_stream(Tensor& root, Tensor& rot, double yaw) {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  const Mat3 ry = rotation_about(Vec3::UnitY(), yaw);
  for (int f = 0; f < root.dim(0); ++f) {
    const double x = root.at(f, 0);
    const double z = root.at(f, 2);
    root.at(f, 0) = c * x + s * z;
    root.at(f, 2) = -s * x + c * z;
    set_rot6d(rot, f, 0, ry * rot6d_at(rot, f, 0));
  }
}

}  // namespace

TrajectorySignal augment_trajectory(const TrajectorySignal& traj, Rng& rng, double p_smooth, double p_rotate,
                                    double sigma) {
  const AugmentDraw d = draw_augmentation(rng, p_smooth, p_rotate);
  TrajectorySignal out = traj;
  if (d.smooth) out.positions = gaussian_smooth(out.positions, sigma);
  if (d.rotate) out = rotate_trajectory(out, d.yaw);
  return out;
}

void augment_window(MotionWindow& window, Rng& rng, const AugmentConfig& config) {
  const AugmentDraw d = draw_augmentation(rng, config.p_smooth, config.p_rotate);
  if (d.smooth) window.trajectory.positions = gaussian_smooth(window.trajectory.positions, config.sigma);
  if (d.rotate) {
    window.trajectory = rotate_trajectory(window.trajectory, d.yaw);
    rotate_root_stream(window.past_root, window.past_rot, d.yaw);
    rotate_root_stream(window.cur_root, window.cur_rot, d.yaw);
  }
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(lineno, std::string("manifest: ") + e.what());
    }
    ManifestRecord r;
    if (!j.contains("path") || !j.contains("style_name")) {
      throw ParseError(lineno, "manifest record needs 'path' and 'style_name'");
    }
    r.path = j.at("path").get<std::string>();
    r.style_name = j.at("style_name").get<std::string>();
    r.dataset_name = j.value("dataset_name", std::string("default"));
    r.split = j.value("split", std::string());
    if (r.split == "auto") r.split.clear();
    if (!r.split.empty() && r.split != "train" && r.split != "val" && r.split != "test") {
      throw ParseError(lineno, "manifest split must be train, val, test or auto");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Split> stratified_split(const std::vector<int>& style_of_clip, std::uint64_t seed,
                                    std::array<double, 3> fractions) {
  const int n = static_cast<int>(style_of_clip.size());
  std::map<int, std::vector<int>> by_style;
  for (int i = 0; i < n; ++i) by_style[style_of_clip[i]].push_back(i);

  // Global targets by largest remainder.
  std::array<int, 3> target{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = fractions[k] * n;
    target[k] = static_cast<int>(std::floor(exact));
    rem[k] = exact - target[k];
    assigned += target[k];
  }
  for (int left = n - assigned; left > 0; --left) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (rem[k] > rem[best]) best = k;
    ++target[best];
    rem[best] = -1.0;
  }

  struct StyleQuota {
    int style;
    std::array<int, 3> count{};
    std::array<double, 3> rem{};
    int left = 0;
  };
  std::vector<StyleQuota> quotas;
  std::array<int, 3> used{};
  for (const auto& [style, clips] : by_style) {
    StyleQuota q{style};
    const int m = static_cast<int>(clips.size());
    int sum = 0;
    for (int k = 0; k < 3; ++k) {
      const double exact = fractions[k] * m;
      q.count[k] = static_cast<int>(std::floor(exact));
      q.rem[k] = exact - q.count[k];
      sum += q.count[k];
      used[k] += q.count[k];
    }
    q.left = m - sum;
    quotas.push_back(q);
  }
  struct Candidate {
    double rem;
    int split;
    int quota;
  };
  std::vector<Candidate> candidates;
  for (int qi = 0; qi < static_cast<int>(quotas.size()); ++qi)
    for (int k = 0; k < 3; ++k) candidates.push_back({quotas[qi].rem[k], k, qi});
  std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.rem != b.rem) return a.rem > b.rem;
    if (a.split != b.split) return a.split < b.split;
    return a.quota < b.quota;
  });
  for (const auto& c : candidates) {
    auto& q = quotas[c.quota];
    if (q.left > 0 && used[c.split] < target[c.split]) {
      ++q.count[c.split];
      ++used[c.split];
      --q.left;
    }
  }
  // Anything still unplaced goes to the first split with room, else train.
  for (auto& q : quotas) {
    while (q.left > 0) {
      int k = 0;
      while (k < 3 && used[k] >= target[k]) ++k;
      if (k == 3) k = 0;
      ++q.count[k];
      ++used[k];
      --q.left;
    }
  }

  Rng rng(seed);
  std::vector<Split> out(n, Split::Train);
  for (const auto& q : quotas) {
    std::vector<int> clips = by_style[q.style];
    std::shuffle(clips.begin(), clips.end(), rng);
    int i = 0;
    for (int k = 0; k < 3; ++k)
      for (int c = 0; c < q.count[k]; ++c) out[clips[i++]] = static_cast<Split>(k);
  }
  return out;
}

const std::vector<MotionClip>& Dataset::split(Split s) const {
  switch (s) {
    case Split::Train:
      return train;
    case Split::Val:
      return val;
    default:
      return test;
  }
}

namespace {

bool same_structure(const SkeletonTopology& a, const SkeletonTopology& b) {
  return a.joint_names() == b.joint_names() && a.parent_index() == b.parent_index();
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  return Split::Test;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    default:
      return "test";
  }
}

}  // namespace

Dataset build_dataset(const std::vector<ManifestRecord>& records, const std::filesystem::path& base_dir,
                      const DatasetOptions& options) {
  if (records.empty()) throw ConfigError("manifest has no records");
  Dataset ds;
  std::map<std::string, int> dataset_index;
  std::map<std::string, int> style_index;
  std::vector<MotionClip> clips;
  std::vector<std::string> errors;
  for (const auto& r : records) {
    const std::filesystem::path p = std::filesystem::path(r.path).is_absolute() ? std::filesystem::path(r.path) : base_dir / r.path;
    MotionClip clip;
    try {
      clip = read_bvh_file(p, options.bvh);
      clip.validate();
    } catch (const Error& e) {
      errors.push_back(p.string() + ": " + e.what());
      continue;
    }
    auto [dit, dnew] = dataset_index.try_emplace(r.dataset_name, static_cast<int>(ds.dataset_names.size()));
    if (dnew) {
      ds.dataset_names.push_back(r.dataset_name);
      ds.topologies.push_back(clip.topology);
    } else if (!same_structure(*ds.topologies[dit->second], *clip.topology)) {
      errors.push_back(p.string() + ": skeleton differs from the rest of dataset '" + r.dataset_name + "'");
      continue;
    }
    const std::string key = r.dataset_name + "/" + r.style_name;
    auto [sit, snew] = style_index.try_emplace(key, static_cast<int>(ds.style_names.size()));
    if (snew) ds.style_names.push_back(key);
    clip.topology = ds.topologies[dit->second];
    clip.dataset_id = dit->second;
    clip.style_id = sit->second;
    clips.push_back(std::move(clip));
  }
  if (!errors.empty()) {
    std::string msg = "failed to load " + std::to_string(errors.size()) + " clip(s):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw Error(msg);
  }

  std::vector<int> auto_ids;
  std::vector<int> auto_styles;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split.empty()) {
      auto_ids.push_back(static_cast<int>(i));
      auto_styles.push_back(clips[i].style_id);
    }
  }
  const auto auto_splits = stratified_split(auto_styles, options.seed);
  std::vector<Split> splits(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!records[i].split.empty()) splits[i] = parse_split(records[i].split);
  for (std::size_t i = 0; i < auto_ids.size(); ++i) splits[auto_ids[i]] = auto_splits[i];

  for (std::size_t i = 0; i < clips.size(); ++i) {
    switch (splits[i]) {
      case Split::Train:
        ds.train.push_back(std::move(clips[i]));
        break;
      case Split::Val:
        ds.val.push_back(std::move(clips[i]));
        break;
      case Split::Test:
        ds.test.push_back(std::move(clips[i]));
        break;
    }
  }
  if (ds.train.empty()) throw ConfigError("training split is empty");
  ds.stats = options.normalize_root ? compute_norm_stats(ds.train) : NormStats::identity();
  return ds;
}

json topology_to_json(const SkeletonTopology& topology) {
  json offsets = json::array();
  for (const auto& o : topology.rest_offsets()) offsets.push_back({o[0], o[1], o[2]});
  std::vector<std::string> toes;
  for (int t : topology.toe_joint_ids()) toes.push_back(topology.joint_names()[t]);
  return {{"names", topology.joint_names()}, {"parents", topology.parent_index()}, {"offsets", offsets}, {"toes", toes}};
}

SkeletonTopology topology_from_json(const json& j) {
  std::vector<Vec3> offsets;
  for (const auto& o : j.at("offsets")) offsets.emplace_back(o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>());
  return SkeletonTopology::build(j.at("names").get<std::vector<std::string>>(), j.at("parents").get<std::vector<int>>(),
                                 std::move(offsets), j.at("toes").get<std::vector<std::string>>());
}

json stats_to_json(const NormStats& stats) { return {{"min", stats.min}, {"max", stats.max}}; }

NormStats stats_from_json(const json& j) {
  NormStats s;
  s.min = j.at("min").get<std::array<double, 3>>();
  s.max = j.at("max").get<std::array<double, 3>>();
  return s;
}

json tensor_to_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  json j;
  j["format_version"] = 1;
  j["stats"] = stats_to_json(dataset.stats);
  j["styles"] = dataset.style_names;
  j["datasets"] = json::array();
  for (std::size_t d = 0; d < dataset.dataset_names.size(); ++d) {
    j["datasets"].push_back({{"name", dataset.dataset_names[d]}, {"topology", topology_to_json(*dataset.topologies[d])}});
  }
  j["clips"] = json::array();
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    for (const auto& c : dataset.split(s)) {
      j["clips"].push_back({{"name", c.name},
                            {"split", split_name(s)},
                            {"dataset_id", c.dataset_id},
                            {"style_id", c.style_id},
                            {"frame_rate", c.frame_rate},
                            {"root_pos", tensor_to_json(c.root_pos)},
                            {"joint_rot", tensor_to_json(c.joint_rot)}});
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(1) << "\n";
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (j.value("format_version", 0) != 1) throw ConfigError(path.string() + ": unsupported dataset format");
  Dataset ds;
  ds.stats = stats_from_json(j.at("stats"));
  ds.style_names = j.at("styles").get<std::vector<std::string>>();
  for (const auto& d : j.at("datasets")) {
    ds.dataset_names.push_back(d.at("name").get<std::string>());
    ds.topologies.push_back(std::make_shared<const SkeletonTopology>(topology_from_json(d.at("topology"))));
  }
  for (const auto& c : j.at("clips")) {
    MotionClip clip;
    clip.name = c.at("name").get<std::string>();
    clip.dataset_id = c.at("dataset_id").get<int>();
    clip.style_id = c.at("style_id").get<int>();
    clip.frame_rate = c.at("frame_rate").get<double>();
    clip.root_pos = tensor_from_json(c.at("root_pos"));
    clip.joint_rot = tensor_from_json(c.at("joint_rot"));
    clip.topology = ds.topologies.at(clip.dataset_id);
    const Split s = parse_split(c.at("split").get<std::string>());
    (s == Split::Train ? ds.train : s == Split::Val ? ds.val : ds.test).push_back(std::move(clip));
  }
  return ds;
}

}  // namespace skeldiff
