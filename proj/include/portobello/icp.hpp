#pragma once

#include "portobello/errors.hpp"
#include "portobello/kdtree.hpp"
#include "portobello/pointcloud.hpp"
#include "portobello/rigid_transform.hpp"

#include <Eigen/SVD>

#include <vector>

namespace portobello {

struct IcpConfig {
  int max_iterations = 30;
  double max_correspondence_distance = 1.0;  // m
  double convergence_translation = 1e-4;     // m
  double convergence_rotation = 1e-4;        // rad
  double fitness_threshold = 0.25;           // m^2
  /// Minimum share of scan points with a gated correspondence for a result to
  /// count as converged. Stops a handful of stray matches from passing as a fit.
  double min_inlier_ratio = 0.3;
};

struct IcpResult {
  RigidTransform transform;
  double fitness = 0.0;  // mean squared correspondence distance, m^2
  int iterations = 0;
  bool converged = false;
  std::size_t inliers = 0;
  /// Fitness at the guess, then after each update.
  std::vector<double> fitness_history;
};

/// Least-squares rigid transform taking `src` onto `dst` (Kabsch).
inline RigidTransform kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  const std::size_t n = src.size();
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= static_cast<double>(n);
  cd /= static_cast<double>(n);
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < n; ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Eigen::Matrix3d r = v * d * u.transpose();
  return {Quat(r), cd - r * cs};
}

namespace detail {

struct Matches {
  std::vector<Vec3> src, dst;
  double sum_sq = 0.0;
  double fitness() const { return src.empty() ? 0.0 : sum_sq / static_cast<double>(src.size()); }
};

inline Matches match(const std::vector<Vec3>& scan, const KdTree& map, const RigidTransform& pose,
                     double max_dist) {
  Matches m;
  m.src.reserve(scan.size());
  m.dst.reserve(scan.size());
  const Eigen::Matrix3d r = pose.rotation_matrix();
  for (const auto& p : scan) {
    const Vec3 q = r * p + pose.translation();
    if (auto nb = map.nearest_within(q, max_dist)) {
      m.src.push_back(p);
      m.dst.push_back(map.point(nb->index));
      m.sum_sq += nb->squared_distance;
    }
  }
  return m;
}

}  // namespace detail

/// Point-to-point ICP of `scan` (sensor/vehicle coordinates) against a map.
/// Returns the pose of the scan frame in the map frame.
inline IcpResult icp_align(const PointCloud& scan, const KdTree& map, const RigidTransform& guess,
                           const IcpConfig& cfg) {
  if (scan.empty()) throw std::invalid_argument("icp_align: empty scan");
  if (map.empty()) throw std::invalid_argument("icp_align: empty map");

  std::vector<Vec3> pts;
  pts.reserve(scan.size());
  for (const auto& p : scan.points) pts.push_back(p.position);

  IcpResult res;
  res.transform = guess;
  auto m = detail::match(pts, map, guess, cfg.max_correspondence_distance);
  if (m.src.empty()) throw NoCorrespondences("no correspondences within " +
                                             std::to_string(cfg.max_correspondence_distance) +
                                             " m at the initial guess");
  res.fitness_history.push_back(m.fitness());

  while (res.iterations < cfg.max_iterations) {
    // Solve in the map frame: current scan points -> their matches.
    const RigidTransform step = [&] {
      std::vector<Vec3> moved(m.src.size());
      for (std::size_t i = 0; i < m.src.size(); ++i) moved[i] = res.transform.apply(m.src[i]);
      return kabsch(moved, m.dst);
    }();
    res.transform = step * res.transform;
    ++res.iterations;
    m = detail::match(pts, map, res.transform, cfg.max_correspondence_distance);
    res.fitness_history.push_back(m.fitness());
    if (m.src.empty()) break;
    if (step.translation().norm() < cfg.convergence_translation &&
        step.angle() < cfg.convergence_rotation) {
      break;
    }
  }

  res.inliers = m.src.size();
  res.fitness = m.fitness();
  const double ratio = static_cast<double>(res.inliers) / static_cast<double>(pts.size());
  res.converged = res.inliers > 0 && res.fitness <= cfg.fitness_threshold &&
                  ratio >= cfg.min_inlier_ratio;
  return res;
}

}  // namespace portobello
