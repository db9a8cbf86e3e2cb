#pragma once

#include "portobello/scenario.hpp"
#include "portobello/time.hpp"

#include <cmath>
#include <initializer_list>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace portobello {

struct AgentRuntime {
  std::string id;
  RigidTransform pose;
  bool started = false;
  bool active = true;
  bool finished = false;
  std::size_t next_waypoint = 0;
  double distance_traveled = 0.0;
  bool operator==(const AgentRuntime&) const = default;
};

struct TriggerRuntime {
  bool armed = true;
  bool was_inside = false;  // an undefined previous state counts as outside
  bool fired = false;
  bool operator==(const TriggerRuntime&) const = default;
};

struct TriggerEvent {
  Timestamp stamp;
  std::string trigger_id;
  RigidTransform vehicle_pose_at_fire;
  std::vector<EventAction> actions_executed;
  bool operator==(const TriggerEvent&) const = default;
};

/// Mutable execution state of one scenario run.
struct RunState {
  std::shared_ptr<const Scenario> scenario;
  std::vector<AgentRuntime> agents;      // scenario order
  std::vector<TriggerRuntime> triggers;  // scenario order

  explicit RunState(std::shared_ptr<const Scenario> s) : scenario(std::move(s)) {
    for (const auto& a : scenario->agents) {
      agents.push_back({a.id, a.initial_pose, false, a.initially_active, a.path.empty(), 0, 0.0});
    }
    triggers.resize(scenario->triggers.size());
  }
  explicit RunState(const Scenario& s) : RunState(std::make_shared<const Scenario>(s)) {}

  AgentRuntime* agent(const std::string& id) {
    for (auto& a : agents) if (a.id == id) return &a;
    return nullptr;
  }
};

inline void apply_action(RunState& state, const EventAction& action) {
  std::visit(
      [&](const auto& a) {
        using T = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<T, EmitMarker>) {
          return;
        } else {
          AgentRuntime* agent = state.agent(a.agent_id);
          if (!agent) return;
          if constexpr (std::is_same_v<T, StartAgent>) agent->started = true;
          if constexpr (std::is_same_v<T, StopAgent>) agent->started = false;
          if constexpr (std::is_same_v<T, SetActive>) agent->active = a.active;
        }
      },
      action);
}

/// Fires every armed trigger whose volume the vehicle origin entered this
/// step. Simultaneous firings run in scenario order; bindings for a trigger
/// run in scenario order too.
inline std::vector<TriggerEvent> trigger_step(RunState& state, const RigidTransform& vehicle_pose,
                                              Timestamp stamp) {
  std::vector<TriggerEvent> events;
  const Vec3 p = vehicle_pose.translation();
  const auto& sc = *state.scenario;
  for (std::size_t i = 0; i < sc.triggers.size(); ++i) {
    TriggerRuntime& tr = state.triggers[i];
    const bool inside = contains(sc.triggers[i].shape, p);
    const bool entered = inside && !tr.was_inside;
    tr.was_inside = inside;
    if (!entered || !tr.armed) continue;

    TriggerEvent ev{stamp, sc.triggers[i].id, vehicle_pose, {}};
    for (const auto& b : sc.bindings) {
      if (b.trigger_id != ev.trigger_id) continue;
      for (const auto& a : b.actions) {
        apply_action(state, a);
        ev.actions_executed.push_back(a);
      }
    }
    tr.fired = true;
    if (sc.triggers[i].one_shot) tr.armed = false;
    events.push_back(std::move(ev));
  }
  return events;
}

/// Advances started agents along their paths by `dt` seconds with exact
/// arc-length carry-over across waypoints. Agents face their direction of
/// travel and halt at the final waypoint.
inline void agent_step(RunState& state, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("agent_step: dt must be positive");
  const auto& sc = *state.scenario;
  for (std::size_t i = 0; i < state.agents.size(); ++i) {
    AgentRuntime& a = state.agents[i];
    if (!a.started || a.finished) continue;
    const auto& path = sc.agents[i].path;
    Vec3 pos = a.pose.translation();
    Quat heading = a.pose.rotation();
    double budget = dt;
    while (budget > 0.0 && a.next_waypoint < path.size()) {
      const PathPoint& target = path[a.next_waypoint];
      const Vec3 delta = target.waypoint - pos;
      const double dist = delta.norm();
      if (dist > 0.0 && (delta.x() != 0.0 || delta.y() != 0.0)) {
        heading = Quat(Eigen::AngleAxisd(std::atan2(delta.y(), delta.x()), Vec3::UnitZ()));
      }
      const double need = dist / target.speed;
      // Arrivals within rounding noise of the budget land on the waypoint.
      if (need <= budget * (1.0 + 1e-12) + 1e-15) {
        pos = target.waypoint;
        a.distance_traveled += dist;
        budget -= need;
        ++a.next_waypoint;
      } else {
        pos += delta * (target.speed * budget / dist);
        a.distance_traveled += target.speed * budget;
        budget = 0.0;
      }
    }
    if (a.next_waypoint >= path.size()) a.finished = true;
    a.pose = RigidTransform(heading, pos);
  }
}

inline double horizontal_distance(const Vec3& a, const Vec3& b) {
  return std::hypot(a.x() - b.x(), a.y() - b.y());
}

namespace detail {

/// Sign of the exact real sum of `terms` (Shewchuk grow-expansion).
inline int exact_sum_sign(std::initializer_list<double> terms) {
  std::vector<double> e;
  for (double q : terms) {
    std::vector<double> next;
    for (double c : e) {
      const double s = q + c;
      const double bv = s - q;
      const double h = (q - (s - bv)) + (c - bv);
      if (h != 0.0) next.push_back(h);
      q = s;
    }
    if (q != 0.0) next.push_back(q);
    e = std::move(next);
  }
  return e.empty() ? 0 : (e.back() > 0.0 ? 1 : -1);
}

}  // namespace detail

/// dx^2 + dy^2 <= r^2, decided exactly on the double-precision XY offsets.
inline bool within_horizontal(const Vec3& a, const Vec3& b, double r) {
  const double dx = a.x() - b.x(), dy = a.y() - b.y();
  const double px = dx * dx, py = dy * dy, pr = r * r;
  return detail::exact_sum_sign({px, std::fma(dx, dx, -px), py, std::fma(dy, dy, -py), -pr, -std::fma(r, r, -pr)}) <= 0;
}

/// Ids of active agents whose horizontal distance from the vehicle origin is
/// at most `render_distance` (inclusive).
inline std::set<std::string> visibility_filter(const RigidTransform& vehicle_pose,
                                               const std::vector<AgentRuntime>& agents,
                                               double render_distance) {
  if (!(render_distance > 0.0)) throw std::invalid_argument("render_distance must be positive");
  std::set<std::string> out;
  for (const auto& a : agents) {
    if (a.active && within_horizontal(a.pose.translation(), vehicle_pose.translation(), render_distance)) {
      out.insert(a.id);
    }
  }
  return out;
}

}  // namespace portobello
