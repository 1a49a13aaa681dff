#include "skeldiff/bvh.hpp"

#include <Eigen/Geometry>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "skeldiff/error.hpp"

namespace skeldiff {

namespace {

enum class Channel { Xpos, Ypos, Zpos, Xrot, Yrot, Zrot };

struct Token {
  std::string text;
  int line;
};

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  int line = 1;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '\n') {
      ++line;
      ++i;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else {
      const std::size_t start = i;
      while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      out.push_back({std::string(text.substr(start, i - start)), line});
    }
  }
  return out;
}

double to_number(const Token& t) {
  double v = 0.0;
  const char* first = t.text.data();
  const char* last = first + t.text.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ParseError(t.line, "expected a number, got '" + t.text + "'");
  return v;
}

Channel to_channel(const Token& t) {
  if (t.text == "Xposition") return Channel::Xpos;
  if (t.text == "Yposition") return Channel::Ypos;
  if (t.text == "Zposition") return Channel::Zpos;
  if (t.text == "Xrotation") return Channel::Xrot;
  if (t.text == "Yrotation") return Channel::Yrot;
  if (t.text == "Zrotation") return Channel::Zrot;
  throw ParseError(t.line, "unsupported channel '" + t.text + "'");
}

class HierarchyParser {
 public:
  HierarchyParser(const std::vector<Token>& tokens, double scale) : tokens_(tokens), scale_(scale) {}

  std::size_t parse() {
    expect("HIERARCHY");
    expect("ROOT");
    parse_joint(-1);
    return pos_;
  }

  std::vector<std::string> names;
  std::vector<int> parents;
  std::vector<Vec3> offsets;
  std::vector<std::vector<Channel>> channels;

 private:
  const Token& next() {
    if (pos_ >= tokens_.size()) {
      throw ParseError(tokens_.empty() ? 1 : tokens_.back().line, "unexpected end of file in HIERARCHY");
    }
    return tokens_[pos_++];
  }

  const Token& peek() {
    if (pos_ >= tokens_.size()) {
      throw ParseError(tokens_.empty() ? 1 : tokens_.back().line, "unexpected end of file in HIERARCHY");
    }
    return tokens_[pos_];
  }

  void expect(const char* word) {
    const Token& t = next();
    if (t.text != word) throw ParseError(t.line, std::string("expected '") + word + "', got '" + t.text + "'");
  }

  Vec3 parse_offset() {
    expect("OFFSET");
    Vec3 v;
    for (int k = 0; k < 3; ++k) v[k] = to_number(next()) * scale_;
    return v;
  }

  void parse_joint(int parent) {
    const Token& name = next();
    const int id = static_cast<int>(names.size());
    names.push_back(name.text);
    parents.push_back(parent);
    offsets.emplace_back(Vec3::Zero());
    channels.emplace_back();
    expect("{");
    offsets[id] = parse_offset();
    if (peek().text == "CHANNELS") {
      next();
      const Token& count_tok = next();
      const int count = static_cast<int>(to_number(count_tok));
      if (count < 0 || count > 6) throw ParseError(count_tok.line, "invalid channel count");
      for (int c = 0; c < count; ++c) channels[id].push_back(to_channel(next()));
    }
    while (true) {
      const Token& t = next();
      if (t.text == "}") return;
      if (t.text == "JOINT") {
        parse_joint(id);
      } else if (t.text == "End") {
        expect("Site");
        expect("{");
        const int end_id = static_cast<int>(names.size());
        names.push_back(name.text + "_End");
        parents.push_back(id);
        offsets.emplace_back(Vec3::Zero());
        channels.emplace_back();
        offsets[end_id] = parse_offset();
        expect("}");
      } else {
        throw ParseError(t.line, "unexpected token '" + t.text + "' in joint " + name.text);
      }
    }
  }

  const std::vector<Token>& tokens_;
  double scale_;
  std::size_t pos_ = 0;
};

Mat3 axis_rotation(Channel c, double degrees) {
  const double r = degrees * std::numbers::pi / 180.0;
  switch (c) {
    case Channel::Xrot:
      return Eigen::AngleAxisd(r, Vec3::UnitX()).toRotationMatrix();
    case Channel::Yrot:
      return Eigen::AngleAxisd(r, Vec3::UnitY()).toRotationMatrix();
    default:
      return Eigen::AngleAxisd(r, Vec3::UnitZ()).toRotationMatrix();
  }
}

void append_line(std::string& out, int indent, const std::string& text) {
  out.append(static_cast<std::size_t>(indent), '\t');
  out += text;
  out += '\n';
}

std::string offset_line(const Vec3& v) {
  return "OFFSET " + format_double(v[0]) + " " + format_double(v[1]) + " " + format_double(v[2]);
}

}  // namespace

std::string format_double(double v) {
  if (v == 0.0) return "0";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

Mat3 euler_zyx_deg_to_matrix(const Vec3& zyx_deg) {
  return axis_rotation(Channel::Zrot, zyx_deg[0]) * axis_rotation(Channel::Yrot, zyx_deg[1]) *
         axis_rotation(Channel::Xrot, zyx_deg[2]);
}

Vec3 matrix_to_euler_zyx_deg(const Mat3& m) {
  const double to_deg = 180.0 / std::numbers::pi;
  const double cy = std::hypot(m(0, 0), m(1, 0));
  double z, y, x;
  y = std::atan2(-m(2, 0), cy);
  if (cy > 1e-9) {
    z = std::atan2(m(1, 0), m(0, 0));
    x = std::atan2(m(2, 1), m(2, 2));
  } else {
    // Gimbal lock: fold the X rotation into Z.
    x = 0.0;
    z = std::atan2(-m(0, 1), m(1, 1));
  }
  return Vec3(z * to_deg, y * to_deg, x * to_deg);
}

MotionClip parse_bvh(std::string_view text, const BvhOptions& options) {
  const auto tokens = tokenize(text);
  HierarchyParser h(tokens, options.scale);
  std::size_t pos = h.parse();

  auto next = [&]() -> const Token& {
    if (pos >= tokens.size()) {
      throw ParseError(tokens.empty() ? 1 : tokens.back().line, "unexpected end of file in MOTION header");
    }
    return tokens[pos++];
  };
  auto expect = [&](const char* word) {
    const Token& t = next();
    if (t.text != word) throw ParseError(t.line, std::string("expected '") + word + "', got '" + t.text + "'");
  };
  expect("MOTION");
  expect("Frames:");
  const Token& frames_tok = next();
  const double frames_d = to_number(frames_tok);
  if (frames_d < 0 || frames_d != std::floor(frames_d)) throw ParseError(frames_tok.line, "invalid frame count");
  const int frames = static_cast<int>(frames_d);
  expect("Frame");
  expect("Time:");
  const Token& dt_tok = next();
  const double frame_time = to_number(dt_tok);
  if (!(frame_time > 0)) throw ParseError(dt_tok.line, "frame time must be positive");

  std::size_t channel_total = 0;
  for (const auto& c : h.channels) channel_total += c.size();

  std::vector<std::string> toes;
  for (const auto& name : options.toe_names)
    if (std::find(h.names.begin(), h.names.end(), name) != h.names.end()) toes.push_back(name);

  auto topology = std::make_shared<SkeletonTopology>(
      SkeletonTopology::build(h.names, h.parents, h.offsets, toes));
  const int joints = topology->joint_count();

  MotionClip clip;
  clip.frame_rate = 1.0 / frame_time;
  clip.root_pos = Tensor({frames, 3});
  clip.joint_rot = Tensor({frames, joints, 6});

  for (int f = 0; f < frames; ++f) {
    if (channel_total == 0) {
      // Rows of a channel-less file are empty lines and carry no tokens.
      for (int k = 0; k < 3; ++k) clip.root_pos.at(f, k) = h.offsets[0][k];
      for (int j = 0; j < joints; ++j) set_rot6d(clip.joint_rot, f, j, Mat3::Identity());
      continue;
    }
    if (pos >= tokens.size()) {
      throw ParseError(tokens.back().line, "expected " + std::to_string(frames) + " frames, got " + std::to_string(f));
    }
    const int line = tokens[pos].line;
    std::size_t end = pos;
    while (end < tokens.size() && tokens[end].line == line) ++end;
    if (end - pos != channel_total) {
      throw ParseError(line, "frame has " + std::to_string(end - pos) + " values, expected " +
                                 std::to_string(channel_total));
    }
    for (int j = 0; j < joints; ++j) {
      Mat3 r = Mat3::Identity();
      Vec3 p = h.offsets[j];
      for (Channel c : h.channels[j]) {
        const double v = to_number(tokens[pos++]);
        switch (c) {
          case Channel::Xpos:
            p[0] = h.offsets[j][0] + v * options.scale;
            break;
          case Channel::Ypos:
            p[1] = h.offsets[j][1] + v * options.scale;
            break;
          case Channel::Zpos:
            p[2] = h.offsets[j][2] + v * options.scale;
            break;
          default:
            r = r * axis_rotation(c, v);
        }
      }
      if (j == 0)
        for (int k = 0; k < 3; ++k) clip.root_pos.at(f, k) = p[k];
      set_rot6d(clip.joint_rot, f, j, r);
    }
  }
  if (pos != tokens.size()) throw ParseError(tokens[pos].line, "trailing data after the last frame");

  // The root offset lives in root_pos; the topology keeps a zero root offset.
  auto offsets = topology->rest_offsets();
  offsets[0] = Vec3::Zero();
  clip.topology = std::make_shared<const SkeletonTopology>(
      SkeletonTopology::build(topology->joint_names(), topology->parent_index(), offsets, toes));
  return clip;
}

std::string write_bvh(const SkeletonTopology& topology, const MotionClip& clip) {
  const int joints = topology.joint_count();
  const int frames = clip.frame_count();
  if (clip.joint_rot.rank() != 3 || clip.joint_rot.dim(1) != joints || clip.joint_rot.dim(0) != frames) {
    throw ExportError("write_bvh: clip does not match topology");
  }
  if (frames < 1) throw ExportError("write_bvh: clip has no frames");
  if (!(clip.frame_rate > 0) || !std::isfinite(clip.frame_rate)) throw ExportError("write_bvh: invalid frame rate");
  for (double v : clip.root_pos.values())
    if (!std::isfinite(v)) throw ExportError("write_bvh: non-finite root position");
  for (double v : clip.joint_rot.values())
    if (!std::isfinite(v)) throw ExportError("write_bvh: non-finite rotation");

  const auto& parents = topology.parent_index();
  const auto& names = topology.joint_names();
  std::vector<std::vector<int>> children(joints);
  for (int j = 1; j < joints; ++j) children[parents[j]].push_back(j);
  auto is_end_site = [&](int j) { return j > 0 && children[j].empty() && names[j] == names[parents[j]] + "_End"; };

  std::string out = "HIERARCHY\n";
  std::vector<int> order;
  auto emit = [&](auto&& self, int j, int indent) -> void {
    if (is_end_site(j)) {
      append_line(out, indent, "End Site");
      append_line(out, indent, "{");
      append_line(out, indent + 1, offset_line(topology.rest_offsets()[j]));
      append_line(out, indent, "}");
      return;
    }
    order.push_back(j);
    append_line(out, indent, (j == 0 ? "ROOT " : "JOINT ") + names[j]);
    append_line(out, indent, "{");
    append_line(out, indent + 1, offset_line(j == 0 ? Vec3::Zero().eval() : topology.rest_offsets()[j]));
    append_line(out, indent + 1,
                j == 0 ? "CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation"
                       : "CHANNELS 3 Zrotation Yrotation Xrotation");
    for (int c : children[j]) self(self, c, indent + 1);
    append_line(out, indent, "}");
  };
  emit(emit, 0, 0);

  out += "MOTION\n";
  out += "Frames: " + std::to_string(frames) + "\n";
  out += "Frame Time: " + format_double(1.0 / clip.frame_rate) + "\n";
  for (int f = 0; f < frames; ++f) {
    std::string row;
    for (int k = 0; k < 3; ++k) row += format_double(clip.root_pos.at(f, k)) + " ";
    for (int j : order) {
      const Vec3 e = matrix_to_euler_zyx_deg(rot6d_at(clip.joint_rot, f, j));
      for (int k = 0; k < 3; ++k) row += format_double(e[k]) + " ";
    }
    row.pop_back();
    out += row + "\n";
  }
  return out;
}

MotionClip read_bvh_file(const std::filesystem::path& path, const BvhOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  MotionClip clip = parse_bvh(ss.str(), options);
  clip.name = path.stem().string();
  return clip;
}

void write_bvh_file(const std::filesystem::path& path, const SkeletonTopology& topology, const MotionClip& clip) {
  const std::string text = write_bvh(topology, clip);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ExportError("cannot write " + path.string());
  out << text;
  if (!out) throw ExportError("write failed for " + path.string());
}

void MotionClip::validate() const {
  if (!topology) throw ValidationError("clip has no topology");
  const int joints = topology->joint_count();
  if (root_pos.rank() != 2 || root_pos.dim(1) != 3) throw ValidationError("root_pos must be [F, 3]");
  if (joint_rot.rank() != 3 || joint_rot.dim(0) != root_pos.dim(0) || joint_rot.dim(1) != joints ||
      joint_rot.dim(2) != 6) {
    throw ValidationError("joint_rot must be [F, J, 6] matching the topology");
  }
  if (frame_count() < 2) throw ValidationError("clip needs at least two frames");
  if (!(frame_rate > 0)) throw ValidationError("frame rate must be positive");
  for (int f = 0; f < frame_count(); ++f)
    for (int j = 0; j < joints; ++j) {
      try {
        rot6d_at(joint_rot, f, j);
      } catch (const DegenerateRotationError& e) {
        throw ValidationError("frame " + std::to_string(f) + " joint " + std::to_string(j) + ": " + e.what());
      }
    }
}

}  // namespace skeldiff
