#pragma once

#include "portobello/errors.hpp"
#include "portobello/rigid_transform.hpp"
#include "portobello/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace portobello {

struct WaypointFollower {
  double lookahead = 3.0;    // m
  double max_accel = 2.0;    // m/s^2, also used for braking
  double stop_hold = 3.0;    // s at each stop waypoint
  double max_deviation = 5.0;  // m from the route before giving up
};

/// Route polyline with cumulative arc length.
class RoutePath {
 public:
  RoutePath() = default;
  explicit RoutePath(std::vector<RouteWaypoint> wps) : wps_(std::move(wps)) {
    if (wps_.size() < 2) throw std::invalid_argument("route needs at least two waypoints");
    arc_.resize(wps_.size(), 0.0);
    for (std::size_t i = 1; i < wps_.size(); ++i) {
      arc_[i] = arc_[i - 1] + (wps_[i].position - wps_[i - 1].position).norm();
    }
  }

  double length() const { return arc_.back(); }
  const std::vector<RouteWaypoint>& waypoints() const { return wps_; }
  double arc_at(std::size_t i) const { return arc_[i]; }

  Vec3 point_at(double s) const {
    s = std::clamp(s, 0.0, length());
    const std::size_t i = segment_at(s);
    const double len = arc_[i + 1] - arc_[i];
    const double r = len > 0 ? (s - arc_[i]) / len : 0.0;
    return wps_[i].position + r * (wps_[i + 1].position - wps_[i].position);
  }

  /// Segment index containing arc length s.
  std::size_t segment_at(double s) const {
    auto it = std::upper_bound(arc_.begin(), arc_.end(), s);
    const auto i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, it - arc_.begin() - 1));
    return std::min(i, wps_.size() - 2);
  }

  struct Projection {
    double arc = 0.0;
    double distance = 0.0;
    std::size_t segment = 0;
  };

  /// Closest point to p on segments [first, last].
  Projection project(const Vec3& p, std::size_t first = 0,
                     std::size_t last = std::numeric_limits<std::size_t>::max()) const {
    last = std::min(last, wps_.size() - 2);
    Projection best{0.0, std::numeric_limits<double>::infinity(), first};
    for (std::size_t i = first; i <= last; ++i) {
      const Vec3 a = wps_[i].position, b = wps_[i + 1].position;
      const Vec3 ab = b - a;
      const double len2 = ab.squaredNorm();
      const double r = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
      const double d = (a + r * ab - p).norm();
      if (d < best.distance) best = {arc_[i] + r * std::sqrt(len2), d, i};
    }
    return best;
  }

 private:
  std::vector<RouteWaypoint> wps_;
  std::vector<double> arc_;
};

enum class VehicleStatus { running, holding_at_stop, paused, finished };

inline const char* status_name(VehicleStatus s) {
  switch (s) {
    case VehicleStatus::running: return "running";
    case VehicleStatus::holding_at_stop: return "holding-at-stop";
    case VehicleStatus::paused: return "paused";
    case VehicleStatus::finished: return "finished";
  }
  return "unknown";
}

/// Point-kinematic vehicle steered by pure pursuit along a route, with a
/// trapezoidal speed profile that brakes into stop waypoints.
class VehicleSim {
 public:
  VehicleSim(const std::vector<RouteWaypoint>& route, WaypointFollower cfg)
      : path_(route), cfg_(cfg) {
    position_ = route.front().position;
    const Vec3 d = route[1].position - route[0].position;
    yaw_ = std::atan2(d.y(), d.x());
    for (std::size_t i = 1; i < route.size(); ++i) {
      if (route[i].stop || i + 1 == route.size()) stops_.push_back(i);
    }
  }

  RigidTransform pose() const { return RigidTransform::from_yaw(yaw_, position_); }
  double speed() const { return speed_; }
  VehicleStatus status() const { return status_; }
  bool finished() const { return status_ == VehicleStatus::finished; }
  const RoutePath& path() const { return path_; }
  double progress() const { return arc_; }

  /// While attached, stop holds last until `proceed()` instead of timing out.
  void set_operator_attached(bool attached) { operator_attached_ = attached; }

  /// Releases a stop hold. Returns false when not holding.
  bool proceed() {
    if (status_ != VehicleStatus::holding_at_stop) return false;
    release_stop();
    return true;
  }
  /// Operator pause: brake to a standstill and wait for `resume()`.
  bool pause() {
    if (status_ == VehicleStatus::finished || paused_) return false;
    paused_ = true;
    return true;
  }
  bool resume() {
    if (!paused_) return false;
    paused_ = false;
    return true;
  }

  void step(double dt) {
    if (status_ == VehicleStatus::finished) return;

    if (status_ == VehicleStatus::holding_at_stop) {
      hold_elapsed_ += dt;
      if (!operator_attached_ && hold_elapsed_ >= cfg_.stop_hold - 1e-9) release_stop();
      return;
    }

    const std::size_t stop_idx = stops_[next_stop_];
    const double stop_arc = path_.arc_at(stop_idx);
    const double to_stop = std::max(0.0, stop_arc - arc_);

    // speed profile
    const std::size_t seg = path_.segment_at(arc_);
    double desired = path_.waypoints()[seg + 1].target_speed;
    desired = std::min(desired, std::sqrt(2.0 * cfg_.max_accel * to_stop));
    if (paused_) desired = 0.0;
    const double dv = cfg_.max_accel * dt;
    speed_ = std::clamp(desired, speed_ - dv, speed_ + dv);
    speed_ = std::max(0.0, speed_);

    // pure pursuit toward the lookahead point
    const Vec3 target = path_.point_at(std::min(arc_ + cfg_.lookahead, stop_arc));
    const Vec3 to_target = target - position_;
    const double ld = to_target.head<2>().norm();
    double travel = speed_ * dt;
    if (travel >= to_stop) travel = to_stop;
    if (ld > 1e-6 && travel > 0.0) {
      const double alpha = std::remainder(std::atan2(to_target.y(), to_target.x()) - yaw_, 2 * std::numbers::pi);
      const double curvature = 2.0 * std::sin(alpha) / ld;
      // arc motion for one step
      const double dyaw = curvature * travel;
      if (std::abs(dyaw) < 1e-9) {
        position_.x() += travel * std::cos(yaw_);
        position_.y() += travel * std::sin(yaw_);
      } else {
        const double r = 1.0 / curvature;
        position_.x() += r * (std::sin(yaw_ + dyaw) - std::sin(yaw_));
        position_.y() += -r * (std::cos(yaw_ + dyaw) - std::cos(yaw_));
      }
      yaw_ = std::remainder(yaw_ + dyaw, 2 * std::numbers::pi);
    }

    const std::size_t window_lo = seg > 2 ? seg - 2 : 0;
    const auto proj = path_.project(position_, window_lo, seg + 3);
    if (proj.distance > cfg_.max_deviation) {
      throw RouteUnreachable("vehicle deviated " + std::to_string(proj.distance) + " m from the route");
    }
    arc_ = std::max(arc_, proj.arc);
    position_.z() = path_.point_at(arc_).z();

    const bool arrived = stop_arc - arc_ <= 0.02 || (travel >= to_stop && to_stop > 0.0) ||
                         (to_stop == 0.0 && speed_ == 0.0);
    if (arrived) {
      speed_ = 0.0;
      if (stop_idx + 1 == path_.waypoints().size()) {
        status_ = VehicleStatus::finished;
      } else {
        status_ = VehicleStatus::holding_at_stop;
        hold_elapsed_ = 0.0;
      }
    } else {
      status_ = paused_ && speed_ == 0.0 ? VehicleStatus::paused : VehicleStatus::running;
    }
  }

 private:
  void release_stop() {
    status_ = paused_ ? VehicleStatus::paused : VehicleStatus::running;
    arc_ = std::max(arc_, path_.arc_at(stops_[next_stop_]));
    ++next_stop_;
  }

  RoutePath path_;
  WaypointFollower cfg_;
  Vec3 position_ = Vec3::Zero();
  double yaw_ = 0.0;
  double speed_ = 0.0;
  double arc_ = 0.0;
  std::vector<std::size_t> stops_;
  std::size_t next_stop_ = 0;
  double hold_elapsed_ = 0.0;
  bool operator_attached_ = false;
  bool paused_ = false;
  VehicleStatus status_ = VehicleStatus::running;
};

}  // namespace portobello
