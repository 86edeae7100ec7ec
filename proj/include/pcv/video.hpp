#pragma once

#include "pcv/geom.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pcv {

using geom::Points;

// One frame: N unordered 3-D points.
struct PointCloudFrame {
  Points coords;

  Eigen::Index size() const { return coords.rows(); }
};

struct PointCloudVideo {
  std::vector<PointCloudFrame> frames;
  std::optional<int> label;
  std::map<std::string, std::string> meta;

  int num_frames() const { return static_cast<int>(frames.size()); }
  // Point count of frame 0, or 0 for an empty video.
  Eigen::Index points_per_frame() const { return frames.empty() ? 0 : frames.front().size(); }
};

// Throws std::invalid_argument unless the video has T >= 2 nonempty frames
// of equal size with finite coordinates.
void validate_video(const PointCloudVideo& video);

}  // namespace pcv
