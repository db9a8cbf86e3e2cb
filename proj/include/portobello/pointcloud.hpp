#pragma once

#include "portobello/rigid_transform.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace portobello {

struct Point {
  Vec3 position = Vec3::Zero();
  float intensity = 0.0f;

  bool operator==(const Point&) const = default;
};

struct PointCloud {
  std::vector<Point> points;
  std::string frame = "map";
  bool has_intensity = false;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool operator==(const PointCloud&) const = default;
};

inline PointCloud transform_cloud(const PointCloud& cloud, const RigidTransform& t) {
  PointCloud out = cloud;
  const Eigen::Matrix3d r = t.rotation_matrix();
  for (auto& p : out.points) p.position = r * p.position + t.translation();
  return out;
}

/// Integer voxel coordinates of a position.
struct VoxelKey {
  std::int64_t x, y, z;
  bool operator==(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const noexcept {
    std::uint64_t h = static_cast<std::uint64_t>(k.x) * 73856093ULL;
    h ^= static_cast<std::uint64_t>(k.y) * 19349663ULL;
    h ^= static_cast<std::uint64_t>(k.z) * 83492791ULL;
    return static_cast<std::size_t>(h);
  }
};

inline VoxelKey voxel_of(const Vec3& p, double voxel) {
  return {static_cast<std::int64_t>(std::floor(p.x() / voxel)),
          static_cast<std::int64_t>(std::floor(p.y() / voxel)),
          static_cast<std::int64_t>(std::floor(p.z() / voxel))};
}

/// One point per occupied voxel, at the centroid of the voxel's members.
/// Output order follows the first occurrence of each voxel in the input.
inline PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  if (!(voxel > 0.0)) throw std::invalid_argument("voxel size must be positive");
  struct Acc {
    Vec3 sum = Vec3::Zero();
    double intensity = 0.0;
    std::size_t n = 0;
  };
  std::unordered_map<VoxelKey, std::size_t, VoxelKeyHash> slot;
  slot.reserve(cloud.size());
  std::vector<Acc> acc;
  for (const auto& p : cloud.points) {
    auto [it, inserted] = slot.try_emplace(voxel_of(p.position, voxel), acc.size());
    if (inserted) acc.emplace_back();
    Acc& a = acc[it->second];
    a.sum += p.position;
    a.intensity += p.intensity;
    ++a.n;
  }
  PointCloud out;
  out.frame = cloud.frame;
  out.has_intensity = cloud.has_intensity;
  out.points.reserve(acc.size());
  for (const auto& a : acc) {
    const double n = static_cast<double>(a.n);
    out.points.push_back({a.n == 1 ? a.sum : Vec3(a.sum / n),
                          static_cast<float>(a.intensity / n)});
  }
  return out;
}

}  // namespace portobello
