#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "skeldiff/motion.hpp"

namespace skeldiff {

struct BvhOptions {
  /// Multiplies OFFSET and position channels, e.g. 0.01 for centimetre files.
  double scale = 1.0;
  /// Leaf joints to flag as toes. Names not present in the file are skipped.
  std::vector<std::string> toe_names;
};

/// Parses BVH text. End Sites become leaf joints named "<parent>_End" with
/// identity rotation; joints keep the file's depth-first order. Position
/// channels on non-root joints are read and discarded. Throws ParseError.
MotionClip parse_bvh(std::string_view text, const BvhOptions& options = {});

/// Writes ZYX Euler rotation channels on every joint plus XYZ position channels
/// on the root. Leaf joints named "<parent>_End" are written as End Sites. Throws
/// ExportError on non-finite values.
std::string write_bvh(const SkeletonTopology& topology, const MotionClip& clip);

MotionClip read_bvh_file(const std::filesystem::path& path, const BvhOptions& options = {});
void write_bvh_file(const std::filesystem::path& path, const SkeletonTopology& topology, const MotionClip& clip);

/// Z-Y-X intrinsic Euler angles in degrees: R = Rz(z) * Ry(y) * Rx(x).
Vec3 matrix_to_euler_zyx_deg(const Mat3& m);
Mat3 euler_zyx_deg_to_matrix(const Vec3& zyx_deg);

/// Shortest decimal representation that parses back to the same double.
std::string format_double(double v);

}  // namespace skeldiff
