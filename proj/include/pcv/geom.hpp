#pragma once

// Point-set primitives used by set abstraction: farthest point sampling,
// kNN grouping, localization and the temporal roll pairing.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace pcv::geom {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Index = Eigen::Index;

// [M x K] support indices, row-major.
struct NeighborIndex {
  Index queries = 0;
  Index k = 0;
  std::vector<Index> indices;

  Index at(Index query, Index slot) const { return indices[static_cast<std::size_t>(query * k + slot)]; }
};

enum class FpsStart {
  kFirstIndex,  // start at point 0
  kCanonical,   // start at the lexicographically smallest coordinate
};

// Iterative farthest point selection. With a seed the start point is drawn
// uniformly under that seed; otherwise `start` decides.
std::vector<Index> farthest_point_sample(const Points& coords, Index count,
                                         std::optional<std::uint64_t> seed = std::nullopt,
                                         FpsStart start = FpsStart::kFirstIndex);

// k nearest supports per query, ties to the lower index. When k exceeds the
// support count the sorted neighbors are repeated cyclically.
NeighborIndex knn_group(const Points& queries, const Points& supports, Index k);

// neighbors is [M*K x 3] grouped by query; returns neighbors[i*K+j] - centers[i].
Points localize(const Points& neighbors, const Points& centers, Index k);

enum class RollBoundary {
  kCircular,  // last frame pairs with the first
  kClamp,     // last frame pairs with itself
};

// (support_frame, query_frame) per output frame.
std::vector<std::pair<int, int>> temporal_roll_pairs(int frames, RollBoundary boundary = RollBoundary::kCircular);

}  // namespace pcv::geom
