#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "festa/errors.hpp"
#include "festa/random.hpp"

namespace festa {

using Vec3 = Eigen::Vector3d;

struct PointCloud {
  std::vector<Vec3> points;
  // Object ids, one per point when present.
  std::optional<std::vector<int>> labels;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  bool has_labels() const noexcept { return labels.has_value(); }

  void validate() const {
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!points[i].allFinite()) {
        throw InvalidInput("point " + std::to_string(i) + " has a non-finite coordinate");
      }
    }
    if (labels) {
      if (labels->size() != points.size()) {
        throw InvalidInput("label count " + std::to_string(labels->size()) +
                           " does not match point count " + std::to_string(points.size()));
      }
      for (int l : *labels) {
        if (l < 0) throw InvalidInput("negative label");
      }
    }
  }
};

inline void validate_points(std::span<const Vec3> points) {
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite()) {
      throw InvalidInput("point " + std::to_string(i) + " has a non-finite coordinate");
    }
  }
}

/// Groups of indices into a source cloud, stored flat (CSR layout): group i
/// owns members()[offsets()[i] .. offsets()[i+1]).
class Grouping {
 public:
  Grouping() = default;
  Grouping(std::vector<Vec3> centers, std::vector<std::size_t> offsets,
           std::vector<std::size_t> members, std::size_t cap,
           std::vector<std::uint8_t> fallback = {})
      : centers_(std::move(centers)),
        offsets_(std::move(offsets)),
        members_(std::move(members)),
        fallback_(std::move(fallback)),
        cap_(cap) {
    if (fallback_.empty()) fallback_.assign(centers_.size(), 0);
  }

  std::size_t size() const noexcept { return centers_.size(); }
  std::size_t cap() const noexcept { return cap_; }
  const std::vector<Vec3>& centers() const noexcept { return centers_; }
  const std::vector<std::size_t>& offsets() const noexcept { return offsets_; }
  const std::vector<std::size_t>& members() const noexcept { return members_; }

  std::span<const std::size_t> group(std::size_t i) const {
    return {members_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
  }

  // True when a radius query found nothing and the nearest neighbour was used.
  bool used_fallback(std::size_t i) const { return fallback_[i] != 0; }

  // Group id of every flat member row.
  std::vector<std::size_t> segment_ids() const {
    std::vector<std::size_t> ids(members_.size());
    for (std::size_t g = 0; g < size(); ++g) {
      std::fill(ids.begin() + static_cast<std::ptrdiff_t>(offsets_[g]),
                ids.begin() + static_cast<std::ptrdiff_t>(offsets_[g + 1]), g);
    }
    return ids;
  }

 private:
  std::vector<Vec3> centers_;
  std::vector<std::size_t> offsets_{0};
  std::vector<std::size_t> members_;
  std::vector<std::uint8_t> fallback_;
  std::size_t cap_ = 0;
};

namespace detail {

struct Candidate {
  double d2;
  std::size_t index;
  friend bool operator<(const Candidate& a, const Candidate& b) {
    return a.d2 < b.d2 || (a.d2 == b.d2 && a.index < b.index);
  }
};

}  // namespace detail

/// Exact nearest-neighbour queries over a fixed point set. Small sets are
/// scanned directly; larger ones go through a uniform grid. Both paths return
/// identical results: ascending squared distance, ties to the lower index.
class NeighborIndex {
 public:
  static constexpr std::size_t kBruteForceBelow = 256;

  explicit NeighborIndex(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
    if (points_.size() >= kBruteForceBelow) build_grid();
  }

  std::size_t size() const noexcept { return points_.size(); }
  const std::vector<Vec3>& points() const noexcept { return points_; }

  void knn(const Vec3& q, std::size_t k, std::vector<std::size_t>& out) const {
    k = std::min(k, points_.size());
    if (k == 0) return;
    if (cells_.empty()) {
      knn_brute(q, k, out);
    } else {
      knn_grid(q, k, out);
    }
  }

  // All points with squared distance <= radius^2, nearest first, at most cap.
  void within(const Vec3& q, double radius, std::size_t cap, std::vector<std::size_t>& out) const {
    std::vector<detail::Candidate> found;
    const double r2 = radius * radius;
    if (cells_.empty()) {
      for (std::size_t i = 0; i < points_.size(); ++i) {
        const double d2 = (points_[i] - q).squaredNorm();
        if (d2 <= r2) found.push_back({d2, i});
      }
    } else {
      std::array<long, 3> lo{}, hi{};
      for (int a = 0; a < 3; ++a) {
        lo[a] = clamp_cell(std::floor((q[a] - radius - origin_[a]) / cell_), a);
        hi[a] = clamp_cell(std::floor((q[a] + radius - origin_[a]) / cell_), a);
      }
      for (long x = lo[0]; x <= hi[0]; ++x)
        for (long y = lo[1]; y <= hi[1]; ++y)
          for (long z = lo[2]; z <= hi[2]; ++z) {
            const std::size_t c = cell_id(x, y, z);
            for (std::size_t s = cell_start_[c]; s < cell_start_[c + 1]; ++s) {
              const std::size_t i = cells_[s];
              const double d2 = (points_[i] - q).squaredNorm();
              if (d2 <= r2) found.push_back({d2, i});
            }
          }
    }
    std::sort(found.begin(), found.end());
    if (found.size() > cap) found.resize(cap);
    for (const auto& c : found) out.push_back(c.index);
  }

 private:
  void knn_brute(const Vec3& q, std::size_t k, std::vector<std::size_t>& out) const {
    std::vector<detail::Candidate> all(points_.size());
    for (std::size_t i = 0; i < points_.size(); ++i) all[i] = {(points_[i] - q).squaredNorm(), i};
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
    for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].index);
  }

  void knn_grid(const Vec3& q, std::size_t k, std::vector<std::size_t>& out) const {
    std::array<long, 3> c{};
    for (int a = 0; a < 3; ++a) c[a] = clamp_cell(std::floor((q[a] - origin_[a]) / cell_), a);

    std::priority_queue<detail::Candidate> heap;  // max-heap of the best k so far
    for (long r = 0;; ++r) {
      for (long x = c[0] - r; x <= c[0] + r; ++x) {
        if (x < 0 || x >= dims_[0]) continue;
        for (long y = c[1] - r; y <= c[1] + r; ++y) {
          if (y < 0 || y >= dims_[1]) continue;
          for (long z = c[2] - r; z <= c[2] + r; ++z) {
            if (z < 0 || z >= dims_[2]) continue;
            const long cheb = std::max({std::labs(x - c[0]), std::labs(y - c[1]), std::labs(z - c[2])});
            if (cheb != r) continue;
            const std::size_t cell = cell_id(x, y, z);
            for (std::size_t s = cell_start_[cell]; s < cell_start_[cell + 1]; ++s) {
              const std::size_t i = cells_[s];
              const detail::Candidate cand{(points_[i] - q).squaredNorm(), i};
              if (heap.size() < k) {
                heap.push(cand);
              } else if (cand < heap.top()) {
                heap.pop();
                heap.push(cand);
              }
            }
          }
        }
      }
      // Lower bound on the distance to any cell outside the visited cube.
      double bound = std::numeric_limits<double>::infinity();
      for (int a = 0; a < 3; ++a) {
        if (c[a] + r + 1 < dims_[a]) {
          bound = std::min(bound, std::max(0.0, origin_[a] + static_cast<double>(c[a] + r + 1) * cell_ - q[a]));
        }
        if (c[a] - r - 1 >= 0) {
          bound = std::min(bound, std::max(0.0, q[a] - (origin_[a] + static_cast<double>(c[a] - r) * cell_)));
        }
      }
      if (std::isinf(bound)) break;  // cube covers the whole grid
      if (heap.size() == k && heap.top().d2 < bound * bound) break;
    }
    std::vector<detail::Candidate> best;
    best.reserve(heap.size());
    while (!heap.empty()) {
      best.push_back(heap.top());
      heap.pop();
    }
    std::sort(best.begin(), best.end());
    for (const auto& b : best) out.push_back(b.index);
  }

  long clamp_cell(double v, int axis) const {
    if (!(v >= 0.0)) return 0;
    return std::min(static_cast<long>(v), dims_[axis] - 1);
  }

  std::size_t cell_id(long x, long y, long z) const {
    return static_cast<std::size_t>((x * dims_[1] + y) * dims_[2] + z);
  }

  void build_grid() {
    Vec3 lo = points_.front(), hi = points_.front();
    for (const auto& p : points_) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const Vec3 extent = (hi - lo).cwiseMax(1e-9);
    const double target_cells = std::max(1.0, static_cast<double>(points_.size()) / 2.0);
    cell_ = std::cbrt(extent.prod() / target_cells);
    // Flat clouds have near-zero volume; never let cells get absurdly thin.
    cell_ = std::max(cell_, extent.maxCoeff() / 64.0);
    origin_ = lo;
    std::size_t total = 1;
    for (int a = 0; a < 3; ++a) {
      dims_[a] = std::clamp<long>(static_cast<long>(std::floor(extent[a] / cell_)) + 1, 1, 64);
      total *= static_cast<std::size_t>(dims_[a]);
    }
    std::vector<std::size_t> cell_of(points_.size());
    cell_start_.assign(total + 1, 0);
    for (std::size_t i = 0; i < points_.size(); ++i) {
      const auto& p = points_[i];
      cell_of[i] = cell_id(clamp_cell(std::floor((p.x() - origin_.x()) / cell_), 0),
                           clamp_cell(std::floor((p.y() - origin_.y()) / cell_), 1),
                           clamp_cell(std::floor((p.z() - origin_.z()) / cell_), 2));
      ++cell_start_[cell_of[i] + 1];
    }
    for (std::size_t c = 0; c < total; ++c) cell_start_[c + 1] += cell_start_[c];
    cells_.resize(points_.size());
    std::vector<std::size_t> cursor(cell_start_.begin(), cell_start_.end() - 1);
    for (std::size_t i = 0; i < points_.size(); ++i) cells_[cursor[cell_of[i]]++] = i;
  }

  std::vector<Vec3> points_;
  Vec3 origin_ = Vec3::Zero();
  double cell_ = 1.0;
  std::array<long, 3> dims_{1, 1, 1};
  std::vector<std::size_t> cell_start_;
  std::vector<std::size_t> cells_;
};

/// Farthest point sampling. The first pick is uniform under `seed`; each later
/// pick maximises the minimum distance to the picks so far (lowest index on
/// ties). Returns indices in selection order.
inline std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> points, std::size_t m,
                                                      std::uint64_t seed) {
  if (m == 0 || m > points.size()) {
    throw InvalidArgument("farthest_point_sample: m=" + std::to_string(m) + " with " +
                          std::to_string(points.size()) + " points");
  }
  validate_points(points);
  Rng rng(seed);
  std::vector<std::size_t> picked;
  picked.reserve(m);
  picked.push_back(static_cast<std::size_t>(uniform_index(rng, points.size())));
  std::vector<double> min_d2(points.size(), std::numeric_limits<double>::infinity());
  while (picked.size() < m) {
    const Vec3& last = points[picked.back()];
    std::size_t best = 0;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double d2 = (points[i] - last).squaredNorm();
      if (d2 < min_d2[i]) min_d2[i] = d2;
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    picked.push_back(best);
  }
  return picked;
}

inline std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t m,
                                                      std::uint64_t seed) {
  return farthest_point_sample(std::span<const Vec3>(cloud.points), m, seed);
}

inline Grouping knn_group(std::span<const Vec3> centers, const NeighborIndex& index, std::size_t k) {
  if (index.size() == 0) throw InvalidArgument("knn_group: empty cloud");
  if (k == 0) throw InvalidArgument("knn_group: k must be positive");
  std::vector<std::size_t> offsets{0}, members;
  members.reserve(centers.size() * std::min(k, index.size()));
  for (const auto& c : centers) {
    index.knn(c, k, members);
    offsets.push_back(members.size());
  }
  return Grouping({centers.begin(), centers.end()}, std::move(offsets), std::move(members), k);
}

inline Grouping knn_group(std::span<const Vec3> centers, std::span<const Vec3> cloud, std::size_t k) {
  if (cloud.empty()) throw InvalidArgument("knn_group: empty cloud");
  validate_points(cloud);
  return knn_group(centers, NeighborIndex(cloud), k);
}

inline Grouping knn_group(std::span<const Vec3> centers, const PointCloud& cloud, std::size_t k) {
  return knn_group(centers, std::span<const Vec3>(cloud.points), k);
}

/// Ball query truncated to the `cap` nearest. A center with nothing in range
/// keeps its single nearest neighbour and is flagged as a fallback.
inline Grouping radius_group(std::span<const Vec3> centers, const NeighborIndex& index, double radius,
                             std::size_t cap) {
  if (index.size() == 0) throw InvalidArgument("radius_group: empty cloud");
  if (!(radius > 0.0)) throw InvalidArgument("radius_group: radius must be positive");
  if (cap == 0) throw InvalidArgument("radius_group: cap must be positive");
  std::vector<std::size_t> offsets{0}, members;
  std::vector<std::uint8_t> fallback;
  fallback.reserve(centers.size());
  for (const auto& c : centers) {
    const std::size_t before = members.size();
    index.within(c, radius, cap, members);
    const bool empty = members.size() == before;
    if (empty) index.knn(c, 1, members);
    fallback.push_back(empty ? 1 : 0);
    offsets.push_back(members.size());
  }
  return Grouping({centers.begin(), centers.end()}, std::move(offsets), std::move(members), cap,
                  std::move(fallback));
}

inline Grouping radius_group(std::span<const Vec3> centers, std::span<const Vec3> cloud, double radius,
                             std::size_t cap) {
  if (cloud.empty()) throw InvalidArgument("radius_group: empty cloud");
  validate_points(cloud);
  return radius_group(centers, NeighborIndex(cloud), radius, cap);
}

inline Grouping radius_group(std::span<const Vec3> centers, const PointCloud& cloud, double radius,
                             std::size_t cap) {
  return radius_group(centers, std::span<const Vec3>(cloud.points), radius, cap);
}

namespace detail {

inline double mean_nearest_d2(std::span<const Vec3> from, std::span<const Vec3> to) {
  double sum = 0.0;
  if (to.size() < NeighborIndex::kBruteForceBelow) {
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, (p - q).squaredNorm());
      sum += best;
    }
  } else {
    NeighborIndex index(to);
    std::vector<std::size_t> nn;
    for (const auto& p : from) {
      nn.clear();
      index.knn(p, 1, nn);
      sum += (p - to[nn[0]]).squaredNorm();
    }
  }
  return sum / static_cast<double>(from.size());
}

}  // namespace detail

/// Symmetric Chamfer distance with squared nearest-neighbour distances.
inline double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.empty() || b.empty()) throw InvalidArgument("chamfer_distance: empty input");
  return detail::mean_nearest_d2(a, b) + detail::mean_nearest_d2(b, a);
}

inline double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  return chamfer_distance(std::span<const Vec3>(a.points), std::span<const Vec3>(b.points));
}

inline PointCloud warp(const PointCloud& cloud, std::span<const Vec3> flow) {
  if (flow.size() != cloud.size()) {
    throw InvalidArgument("warp: flow has " + std::to_string(flow.size()) + " vectors for " +
                          std::to_string(cloud.size()) + " points");
  }
  PointCloud out = cloud;
  for (std::size_t i = 0; i < out.points.size(); ++i) out.points[i] += flow[i];
  return out;
}

/// Indices sorting points lexicographically by (x, y, z), ties by index.
inline std::vector<std::size_t> canonical_order(std::span<const Vec3> points) {
  std::vector<std::size_t> order(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& p = points[a];
    const auto& q = points[b];
    if (p.x() != q.x()) return p.x() < q.x();
    if (p.y() != q.y()) return p.y() < q.y();
    if (p.z() != q.z()) return p.z() < q.z();
    return a < b;
  });
  return order;
}

}  // namespace festa
