#pragma once

#include "portobello/errors.hpp"
#include "portobello/icp.hpp"
#include "portobello/kdtree.hpp"
#include "portobello/pointcloud.hpp"
#include "portobello/rigid_transform.hpp"
#include "portobello/time.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

namespace portobello {

struct LocalizerConfig {
  IcpConfig icp;
  double scan_voxel = 0.3;          // m, applied to each scan before alignment
  double velocity_smoothing = 0.5;  // weight of the newest finite-difference estimate
};

struct PoseEstimate {
  Timestamp stamp;
  RigidTransform map_to_vehicle;
  double fitness = 0.0;
  int iterations_used = 0;
  bool converged = false;

  bool operator==(const PoseEstimate&) const = default;
};

/// Constant-velocity motion state. Velocities are expressed in the map frame.
struct MotionState {
  RigidTransform pose;
  Vec3 linear_velocity = Vec3::Zero();   // m/s
  Vec3 angular_velocity = Vec3::Zero();  // rad/s, axis-angle rate
  Timestamp stamp;

  bool operator==(const MotionState&) const = default;
};

/// Constant-velocity extrapolation of `state` to time `to`.
inline RigidTransform predict(const MotionState& state, Timestamp to) {
  if (to < state.stamp) throw std::invalid_argument("predict: target time precedes state");
  const double dt = seconds_between(to, state.stamp);
  if (dt == 0.0) return state.pose;
  const RigidTransform delta_rot = RigidTransform::from_axis_angle(state.angular_velocity * dt);
  return {delta_rot.rotation() * state.pose.rotation(),
          state.pose.translation() + state.linear_velocity * dt};
}

struct YawSearch {
  double span = 0.0;  // search covers [-span, +span], rad
  double step = 0.0;  // rad
};

/// Establishes the starting state from a known pose, optionally searching yaw
/// offsets and keeping the best-fitting converged candidate.
inline MotionState initialize(const KdTree& map, const PointCloud& scan, const RigidTransform& pose,
                              Timestamp stamp, const LocalizerConfig& cfg,
                              std::optional<YawSearch> yaw_search = std::nullopt) {
  if (map.empty()) throw InitializationFailed("map is empty");
  if (scan.empty()) throw InitializationFailed("first scan is empty");
  const PointCloud reg = voxel_downsample(scan, cfg.scan_voxel);

  std::vector<double> offsets{0.0};
  if (yaw_search) {
    if (!(yaw_search->step > 0.0) || yaw_search->span < 0.0) {
      throw std::invalid_argument("yaw search needs step > 0 and span >= 0");
    }
    const int n = static_cast<int>(std::floor(yaw_search->span / yaw_search->step + 1e-9));
    for (int k = 1; k <= n; ++k) {
      offsets.push_back(k * yaw_search->step);
      offsets.push_back(-k * yaw_search->step);
    }
  }

  std::optional<IcpResult> best;
  for (double off : offsets) {
    const RigidTransform guess{
        Quat(Eigen::AngleAxisd(off, Vec3::UnitZ())) * pose.rotation(), pose.translation()};
    try {
      IcpResult r = icp_align(reg, map, guess, cfg.icp);
      if (r.converged && (!best || r.fitness < best->fitness)) best = std::move(r);
    } catch (const NoCorrespondences&) {
    }
  }
  if (!best) throw InitializationFailed("no candidate pose converged against the map");
  return MotionState{best->transform, Vec3::Zero(), Vec3::Zero(), stamp};
}

/// One localization step: predict to `stamp`, refine against the map, and
/// re-estimate velocities. A failed alignment holds the prediction and is
/// reported as an unconverged estimate rather than an error.
///
/// `prior` optionally replaces the constant-velocity prediction with an
/// odometry-derived guess.
inline std::pair<MotionState, PoseEstimate> localizer_update(
    const MotionState& state, const PointCloud& scan, Timestamp stamp, const KdTree& map,
    const LocalizerConfig& cfg, std::optional<RigidTransform> prior = std::nullopt) {
  const RigidTransform guess = prior ? *prior : predict(state, stamp);
  PoseEstimate est{stamp, guess, 0.0, 0, false};

  if (!scan.empty()) {
    const PointCloud reg = voxel_downsample(scan, cfg.scan_voxel);
    try {
      const IcpResult r = icp_align(reg, map, guess, cfg.icp);
      est.fitness = r.fitness;
      est.iterations_used = r.iterations;
      est.converged = r.converged;
      if (r.converged) est.map_to_vehicle = r.transform;
    } catch (const NoCorrespondences&) {
    }
  }

  MotionState next = state;
  next.pose = est.map_to_vehicle;
  next.stamp = stamp;
  const double dt = seconds_between(stamp, state.stamp);
  if (est.converged && dt > 0.0) {
    const Vec3 v = (est.map_to_vehicle.translation() - state.pose.translation()) / dt;
    const Vec3 w = (est.map_to_vehicle * state.pose.inverse()).log_rotation() / dt;
    const double a = cfg.velocity_smoothing;
    next.linear_velocity = a * v + (1.0 - a) * state.linear_velocity;
    next.angular_velocity = a * w + (1.0 - a) * state.angular_velocity;
  }
  return {next, est};
}

/// Stateful convenience wrapper over `localizer_update`.
class Localizer {
 public:
  Localizer(std::shared_ptr<const KdTree> map, LocalizerConfig cfg)
      : map_(std::move(map)), cfg_(cfg) {}

  void initialize(const PointCloud& first_scan, const RigidTransform& pose, Timestamp stamp,
                  std::optional<YawSearch> search = std::nullopt) {
    state_ = portobello::initialize(*map_, first_scan, pose, stamp, cfg_, search);
  }
  void reset(const MotionState& state) { state_ = state; }

  PoseEstimate update(const PointCloud& scan, Timestamp stamp) {
    if (!state_) throw std::logic_error("Localizer::update before initialize");
    auto [next, est] = localizer_update(*state_, scan, stamp, *map_, cfg_);
    state_ = next;
    return est;
  }

  RigidTransform predict(Timestamp at) const {
    if (!state_) throw std::logic_error("Localizer::predict before initialize");
    return portobello::predict(*state_, std::max(at, state_->stamp));
  }

  bool initialized() const { return state_.has_value(); }
  const MotionState& state() const { return *state_; }
  const LocalizerConfig& config() const { return cfg_; }

 private:
  std::shared_ptr<const KdTree> map_;
  LocalizerConfig cfg_;
  std::optional<MotionState> state_;
};

}  // namespace portobello
