#pragma once

#include "portobello/errors.hpp"
#include "portobello/icp.hpp"
#include "portobello/kdtree.hpp"
#include "portobello/pointcloud.hpp"
#include "portobello/time.hpp"

#include <limits>
#include <memory>
#include <utility>
#include <vector>

namespace portobello {

struct MapBuildConfig {
  double voxel_size = 0.2;         // m
  double keyframe_distance = 1.0;  // m
  double keyframe_angle = 0.17;    // rad
  IcpConfig icp;
};

struct Keyframe {
  std::size_t scan_index = 0;
  RigidTransform pose;
};

/// Immutable map: the cloud, its kd-tree, and the trajectory it was built from.
class PointCloudMap {
 public:
  PointCloudMap() = default;
  explicit PointCloudMap(PointCloud cloud, std::vector<Keyframe> keyframes = {},
                         std::vector<RigidTransform> scan_poses = {})
      : cloud_(std::move(cloud)),
        index_(std::make_shared<const KdTree>(cloud_)),
        keyframes_(std::move(keyframes)),
        scan_poses_(std::move(scan_poses)) {}

  const PointCloud& cloud() const { return cloud_; }
  const KdTree& index() const { return *index_; }
  std::shared_ptr<const KdTree> shared_index() const { return index_; }
  const std::vector<Keyframe>& keyframes() const { return keyframes_; }
  /// Registered pose of every input scan, including non-keyframes.
  const std::vector<RigidTransform>& scan_poses() const { return scan_poses_; }
  std::size_t size() const { return cloud_.size(); }

 private:
  PointCloud cloud_;
  std::shared_ptr<const KdTree> index_ = std::make_shared<const KdTree>();
  std::vector<Keyframe> keyframes_;
  std::vector<RigidTransform> scan_poses_;
};

/// A scan plus the odometry delta from the previous scan's pose.
struct OdometryScan {
  PointCloud scan;
  RigidTransform prior;
};

namespace detail {

template <typename ScanAt, typename GuessFor>
PointCloudMap build_map_impl(std::size_t n, ScanAt scan_at, GuessFor guess_for, const MapBuildConfig& cfg) {
  if (n == 0) throw std::invalid_argument("build_map: no scans");
  if (!(cfg.voxel_size > 0 && cfg.keyframe_distance > 0 && cfg.keyframe_angle > 0)) {
    throw std::invalid_argument("build_map: config values must be positive");
  }

  auto merge = [&](PointCloud& map, const PointCloud& scan, const RigidTransform& pose) {
    const PointCloud placed = transform_cloud(voxel_downsample(scan, cfg.voxel_size), pose);
    map.points.insert(map.points.end(), placed.points.begin(), placed.points.end());
    map = voxel_downsample(map, cfg.voxel_size);
  };

  PointCloud map;
  map.frame = "map";
  map.has_intensity = scan_at(0).has_intensity;
  std::vector<Keyframe> keyframes{{0, RigidTransform::identity()}};
  std::vector<RigidTransform> poses{RigidTransform::identity()};
  merge(map, scan_at(0), RigidTransform::identity());
  KdTree index(map);

  for (std::size_t i = 1; i < n; ++i) {
    const RigidTransform guess = guess_for(i, poses);
    const PointCloud reg_scan = voxel_downsample(scan_at(i), cfg.voxel_size);
    IcpResult r;
    try {
      r = icp_align(reg_scan, index, guess, cfg.icp);
    } catch (const NoCorrespondences&) {
      throw RegistrationDiverged(i, std::numeric_limits<double>::infinity());
    }
    if (!r.converged) throw RegistrationDiverged(i, r.fitness);
    poses.push_back(r.transform);

    const RigidTransform& last = keyframes.back().pose;
    if (translation_distance(last, r.transform) >= cfg.keyframe_distance ||
        rotation_distance(last, r.transform) >= cfg.keyframe_angle) {
      keyframes.push_back({i, r.transform});
      merge(map, scan_at(i), r.transform);
      index = KdTree(map);
    }
  }
  return PointCloudMap(std::move(map), std::move(keyframes), std::move(poses));
}

}  // namespace detail

/// Incremental scan-to-map registration seeded by odometry, with keyframing.
///
/// The first scan defines the map origin. Each later scan is aligned against
/// the accumulated map starting from previous pose * prior, and is merged
/// only after enough motion since the last keyframe.
inline PointCloudMap build_map(const std::vector<OdometryScan>& scans, const MapBuildConfig& cfg) {
  return detail::build_map_impl(
      scans.size(), [&](std::size_t i) -> const PointCloud& { return scans[i].scan; },
      [&](std::size_t i, const std::vector<RigidTransform>& poses) { return poses.back() * scans[i].prior; }, cfg);
}

/// Same pipeline without odometry: the prior for each scan is the previous
/// inter-scan motion, scaled to the stamp spacing (constant velocity).
inline PointCloudMap build_map(const std::vector<Timestamp>& stamps, const std::vector<PointCloud>& clouds,
                               const MapBuildConfig& cfg) {
  if (stamps.size() != clouds.size()) throw std::invalid_argument("build_map: stamps and clouds differ in length");
  return detail::build_map_impl(
      clouds.size(), [&](std::size_t i) -> const PointCloud& { return clouds[i]; },
      [&](std::size_t i, const std::vector<RigidTransform>& poses) {
        if (i < 2) return poses.back();
        const RigidTransform delta = poses[i - 2].inverse() * poses[i - 1];
        const double prev_dt = seconds_between(stamps[i - 1], stamps[i - 2]);
        const double ratio = prev_dt > 0.0 ? seconds_between(stamps[i], stamps[i - 1]) / prev_dt : 1.0;
        const RigidTransform step = RigidTransform::from_axis_angle(delta.log_rotation() * ratio, delta.translation() * ratio);
        return poses.back() * step;
      },
      cfg);
}

}  // namespace portobello
