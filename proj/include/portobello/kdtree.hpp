#pragma once

#include "portobello/pointcloud.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace portobello {

struct Neighbor {
  std::size_t index = 0;
  double squared_distance = 0.0;

  double distance() const { return std::sqrt(squared_distance); }
  bool operator==(const Neighbor&) const = default;
};

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

/// Static kd-tree over a point set, split at the median of the widest axis.
///
/// Results are exact. Ties on distance are broken by the smaller point index,
/// so answers match an exhaustive scan element for element.
class KdTree {
 public:
  static constexpr std::size_t kLeafSize = 8;

  KdTree() = default;

  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) { build(); }

  explicit KdTree(const PointCloud& cloud) {
    points_.reserve(cloud.size());
    for (const auto& p : cloud.points) points_.push_back(p.position);
    build();
  }

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  const Vec3& point(std::size_t i) const { return points_[i]; }
  std::span<const Vec3> points() const { return points_; }

  /// Exact nearest neighbor. Precondition: the tree is non-empty.
  Neighbor nearest(const Vec3& q) const {
    Neighbor best{std::numeric_limits<std::size_t>::max(), std::numeric_limits<double>::infinity()};
    if (!nodes_.empty()) nearest_rec(0, q, best);
    return best;
  }

  /// Nearest neighbor within `max_distance`, or nothing.
  std::optional<Neighbor> nearest_within(const Vec3& q, double max_distance) const {
    Neighbor best{std::numeric_limits<std::size_t>::max(), max_distance * max_distance};
    bool found = false;
    if (!nodes_.empty()) nearest_within_rec(0, q, best, found);
    if (!found) return std::nullopt;
    return best;
  }

  /// All points with distance <= radius, ascending by (distance, index).
  std::vector<Neighbor> radius_search(const Vec3& q, double radius) const {
    std::vector<Neighbor> out;
    if (radius < 0.0 || nodes_.empty()) return out;
    radius_rec(0, q, radius * radius, out);
    std::sort(out.begin(), out.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.squared_distance != b.squared_distance ? a.squared_distance < b.squared_distance
                                                      : a.index < b.index;
    });
    return out;
  }

 private:
  struct Node {
    std::uint32_t begin = 0, end = 0;  // range in order_ for leaves
    std::int32_t left = -1, right = -1;
    int axis = 0;
    double split = 0.0;
    bool leaf() const { return left < 0; }
  };

  void build() {
    order_.resize(points_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<std::uint32_t>(i);
    nodes_.clear();
    if (!points_.empty()) build_rec(0, static_cast<std::uint32_t>(points_.size()));
  }

  std::int32_t build_rec(std::uint32_t begin, std::uint32_t end) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) return id;

    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::uint32_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] == lo[axis]) return id;  // all coincident

    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                       return points_[a][axis] < points_[b][axis];
                     });
    const double split = points_[order_[mid]][axis];
    const std::int32_t left = build_rec(begin, mid);
    const std::int32_t right = build_rec(mid, end);
    Node& n = nodes_[static_cast<std::size_t>(id)];
    n.axis = axis;
    n.split = split;
    n.left = left;
    n.right = right;
    return id;
  }

  static bool better(double d2, std::size_t idx, const Neighbor& best) {
    return d2 < best.squared_distance || (d2 == best.squared_distance && idx < best.index);
  }

  // Left subtree holds coordinates <= split, right holds >= split.
  void nearest_rec(std::int32_t id, const Vec3& q, Neighbor& best) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.leaf()) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = squared_distance(points_[idx], q);
        if (better(d2, idx, best)) best = {idx, d2};
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::int32_t first = diff <= 0.0 ? n.left : n.right;
    const std::int32_t second = diff <= 0.0 ? n.right : n.left;
    nearest_rec(first, q, best);
    if (diff * diff <= best.squared_distance) nearest_rec(second, q, best);
  }

  void nearest_within_rec(std::int32_t id, const Vec3& q, Neighbor& best, bool& found) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.leaf()) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = squared_distance(points_[idx], q);
        if (d2 <= best.squared_distance && (!found || better(d2, idx, best))) {
          best = {idx, d2};
          found = true;
        }
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::int32_t first = diff <= 0.0 ? n.left : n.right;
    const std::int32_t second = diff <= 0.0 ? n.right : n.left;
    nearest_within_rec(first, q, best, found);
    if (diff * diff <= best.squared_distance) nearest_within_rec(second, q, best, found);
  }

  void radius_rec(std::int32_t id, const Vec3& q, double r2, std::vector<Neighbor>& out) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.leaf()) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = squared_distance(points_[idx], q);
        if (d2 <= r2) out.push_back({idx, d2});
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    if (diff <= 0.0 || diff * diff <= r2) radius_rec(n.left, q, r2, out);
    if (diff >= 0.0 || diff * diff <= r2) radius_rec(n.right, q, r2, out);
  }

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace portobello
