#pragma once

#include <string>

#include "skeldiff/skeleton.hpp"
#include "skeldiff/tensor.hpp"

namespace skeldiff {

/// A motion sequence on one skeleton: root positions [F, 3] in meters and
/// local joint rotations [F, J, 6].
struct MotionClip {
  TopologyPtr topology;
  double frame_rate = 30.0;
  Tensor root_pos;
  Tensor joint_rot;
  int style_id = 0;
  int dataset_id = 0;
  std::string name;

  int frame_count() const { return root_pos.empty() ? 0 : root_pos.dim(0); }

  /// Throws ValidationError unless shapes agree with the topology, there are at
  /// least two frames, the frame rate is positive and every rotation decodes.
  void validate() const;
};

}  // namespace skeldiff
