#include "pcv/geom.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace pcv::geom {

namespace {

double squared_distance(const Points& a, Index i, const Points& b, Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

Index canonical_start(const Points& coords) {
  Index best = 0;
  for (Index i = 1; i < coords.rows(); ++i) {
    const auto lhs = coords.row(i);
    const auto rhs = coords.row(best);
    if (std::lexicographical_compare(lhs.data(), lhs.data() + 3, rhs.data(), rhs.data() + 3)) best = i;
  }
  return best;
}

}  // namespace

std::vector<Index> farthest_point_sample(const Points& coords, Index count, std::optional<std::uint64_t> seed,
                                         FpsStart start) {
  const Index n = coords.rows();
  if (count <= 0) throw std::invalid_argument("sample count must be positive");
  if (count > n) throw std::invalid_argument("sample count exceeds point count");
  if (!coords.allFinite()) throw std::invalid_argument("coordinates must be finite");

  Index first = 0;
  if (seed) {
    std::mt19937_64 rng(*seed);
    first = std::uniform_int_distribution<Index>(0, n - 1)(rng);
  } else if (start == FpsStart::kCanonical) {
    first = canonical_start(coords);
  }

  std::vector<Index> picked;
  picked.reserve(static_cast<std::size_t>(count));
  std::vector<double> min_dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  Index current = first;
  for (Index s = 0; s < count; ++s) {
    picked.push_back(current);
    taken[static_cast<std::size_t>(current)] = true;
    Index next = -1;
    double best = -1.0;
    for (Index i = 0; i < n; ++i) {
      auto& d = min_dist[static_cast<std::size_t>(i)];
      d = std::min(d, squared_distance(coords, i, coords, current));
      if (!taken[static_cast<std::size_t>(i)] && d > best) {
        best = d;
        next = i;
      }
    }
    current = next;
  }
  return picked;
}

NeighborIndex knn_group(const Points& queries, const Points& supports, Index k) {
  if (k < 1) throw std::invalid_argument("k must be positive");
  if (queries.rows() < 1 || supports.rows() < 1) throw std::invalid_argument("queries and supports must be nonempty");
  const Index n = supports.rows();
  const Index take = std::min(k, n);

  NeighborIndex out;
  out.queries = queries.rows();
  out.k = k;
  out.indices.resize(static_cast<std::size_t>(out.queries * k));

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (Index q = 0; q < queries.rows(); ++q) {
    for (Index i = 0; i < n; ++i) dist[static_cast<std::size_t>(i)] = squared_distance(queries, q, supports, i);
    std::iota(order.begin(), order.end(), Index{0});
    const auto closer = [&](Index a, Index b) {
      const double da = dist[static_cast<std::size_t>(a)];
      const double db = dist[static_cast<std::size_t>(b)];
      return da < db || (da == db && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + take, order.end(), closer);
    for (Index j = 0; j < k; ++j) {
      out.indices[static_cast<std::size_t>(q * k + j)] = order[static_cast<std::size_t>(j % take)];
    }
  }
  return out;
}

Points localize(const Points& neighbors, const Points& centers, Index k) {
  if (k < 1 || neighbors.rows() != centers.rows() * k) throw std::invalid_argument("localize: shape mismatch");
  Points out(neighbors.rows(), 3);
  for (Index i = 0; i < centers.rows(); ++i) {
    out.middleRows(i * k, k) = neighbors.middleRows(i * k, k).rowwise() - centers.row(i);
  }
  return out;
}

std::vector<std::pair<int, int>> temporal_roll_pairs(int frames, RollBoundary boundary) {
  if (frames < 2) throw std::invalid_argument("temporal roll requires at least two frames");
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(static_cast<std::size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    int query = (t + 1) % frames;
    if (boundary == RollBoundary::kClamp && t == frames - 1) query = t;
    pairs.emplace_back(t, query);
  }
  return pairs;
}

}  // namespace pcv::geom
