#include "pcv/video.hpp"

#include <stdexcept>

namespace pcv {

void validate_video(const PointCloudVideo& video) {
  if (video.num_frames() < 2) throw std::invalid_argument("video needs at least two frames");
  const auto n = video.points_per_frame();
  if (n < 1) throw std::invalid_argument("frames must be nonempty");
  for (const auto& f : video.frames) {
    if (f.size() != n) throw std::invalid_argument("frames differ in point count");
    if (!f.coords.allFinite()) throw std::invalid_argument("frame coordinates must be finite");
  }
}

}  // namespace pcv
