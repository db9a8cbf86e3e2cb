#pragma once

#include "portobello/follower.hpp"
#include "portobello/localization.hpp"
#include "portobello/random.hpp"
#include "portobello/run_log.hpp"
#include "portobello/scenario_runtime.hpp"

#include <algorithm>
#include <atomic>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

namespace portobello {

// ---------------------------------------------------------------------------
// Operator commands, applied at tick boundaries.

enum class OperatorCommand { pause, resume, proceed };

class CommandQueue {
 public:
  void push(OperatorCommand c) {
    std::lock_guard lock(mutex_);
    queue_.push_back(c);
  }
  std::vector<OperatorCommand> drain() {
    std::lock_guard lock(mutex_);
    std::vector<OperatorCommand> out(queue_.begin(), queue_.end());
    queue_.clear();
    return out;
  }

 private:
  std::mutex mutex_;
  std::deque<OperatorCommand> queue_;
};

/// Immutable view of one tick, handed to observers (publishers, pacing).
struct TickSnapshot {
  Timestamp stamp;
  RigidTransform vehicle;
  VehicleStatus status = VehicleStatus::running;
  double speed = 0.0;
  std::vector<AgentRuntime> agents;
  std::set<std::string> visible;
  std::vector<TriggerEvent> new_events;
  std::vector<TriggerRuntime> triggers;
};

using TickObserver = std::function<void(const TickSnapshot&)>;

struct SimOptions {
  double dt = 0.02;  // s
  std::vector<Disturbance> disturbances;
  std::shared_ptr<CommandQueue> commands;
  bool operator_attached = false;
  double max_duration = 3600.0;        // s
  double agent_sample_period = 0.1;    // s
  TickObserver on_tick;
  const std::atomic<bool>* cancel = nullptr;
};

struct ReplayOptions {
  double tick_hz = 50.0;
  std::optional<YawSearch> yaw_search;
  double agent_sample_period = 0.1;
  std::vector<Disturbance> disturbances;  // recorded in the log; apply with inject() beforehand
  TickObserver on_tick;
  const std::atomic<bool>* cancel = nullptr;
};

namespace detail {

inline std::int64_t to_nanos(double s) { return static_cast<std::int64_t>(std::llround(s * 1e9)); }

inline bool in_window(Timestamp t, double start, double duration) {
  return t.nanos() >= to_nanos(start) && t.nanos() < to_nanos(start + duration);
}

inline std::vector<AgentPose> agent_poses(const RunState& st) {
  std::vector<AgentPose> out;
  for (const auto& a : st.agents) out.push_back({a.id, a.pose});
  return out;
}

inline void sample_agents(RunLog& log, const RunState& st, Timestamp t, const RigidTransform& vehicle) {
  const auto visible = visibility_filter(vehicle, st.agents, st.scenario->render_distance);
  for (const auto& a : st.agents) log.agents.push_back({t, a.id, a.pose, a.active, visible.contains(a.id)});
}

inline void log_events(RunLog& log, const RunState& st, const std::vector<TriggerEvent>& events) {
  for (const auto& e : events) log.triggers.push_back({e, agent_poses(st)});
}

inline TickSnapshot snapshot(const RunState& st, Timestamp t, const RigidTransform& vehicle,
                             VehicleStatus status, double speed, std::vector<TriggerEvent> events) {
  return {t, vehicle, status, speed, st.agents,
          visibility_filter(vehicle, st.agents, st.scenario->render_distance), std::move(events), st.triggers};
}

inline void validate_disturbances(const std::vector<Disturbance>& ds) {
  for (const auto& d : ds) {
    std::visit(
        [](const auto& v) {
          if (!(v.start >= 0.0) || !(v.duration > 0.0)) {
            throw std::invalid_argument("disturbance needs start >= 0 and duration > 0");
          }
        },
        d);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// In-lab twin: simulated vehicle following the route.

inline RunLog run_sim(const Scenario& scenario, const WaypointFollower& follower, const SimOptions& opt = {}) {
  if (scenario.route.size() < 2) throw std::invalid_argument("run_sim: scenario has no route");
  if (!(opt.dt > 0.0)) throw std::invalid_argument("run_sim: dt must be positive");
  detail::validate_disturbances(opt.disturbances);

  RunLog log;
  log.header.mode = RunMode::sim;
  log.header.scenario_hash = scenario_hash(scenario);
  log.header.config = {{"dt", opt.dt},
                       {"lookahead", follower.lookahead},
                       {"max_accel", follower.max_accel},
                       {"stop_hold", follower.stop_hold},
                       {"operator_attached", opt.operator_attached}};
  log.disturbances = opt.disturbances;

  RunState state(scenario);
  VehicleSim vehicle(scenario.route, follower);
  vehicle.set_operator_attached(opt.operator_attached);

  const std::int64_t dt_nanos = detail::to_nanos(opt.dt);
  const auto sample_every = std::max<std::int64_t>(1, std::llround(opt.agent_sample_period / opt.dt));
  const auto max_ticks = static_cast<std::int64_t>(std::ceil(opt.max_duration / opt.dt));

  auto record = [&](std::int64_t k, std::vector<TriggerEvent> events) {
    const Timestamp t(k * dt_nanos);
    const RigidTransform pose = vehicle.pose();
    log.poses.push_back({t, pose});
    detail::log_events(log, state, events);
    if (k % sample_every == 0) detail::sample_agents(log, state, t, pose);
    if (opt.on_tick) opt.on_tick(detail::snapshot(state, t, pose, vehicle.status(), vehicle.speed(), std::move(events)));
  };

  record(0, trigger_step(state, vehicle.pose(), Timestamp(0)));
  for (std::int64_t k = 1; !vehicle.finished() && k <= max_ticks; ++k) {
    if (opt.cancel && opt.cancel->load()) break;
    if (opt.commands) {
      for (auto c : opt.commands->drain()) {
        if (c == OperatorCommand::pause) vehicle.pause();
        if (c == OperatorCommand::resume) vehicle.resume();
        if (c == OperatorCommand::proceed) vehicle.proceed();
      }
    }
    const Timestamp before((k - 1) * dt_nanos);
    const bool frozen = std::any_of(opt.disturbances.begin(), opt.disturbances.end(), [&](const Disturbance& d) {
      const auto* p = std::get_if<PauseDisturbance>(&d);
      return p && detail::in_window(before, p->start, p->duration);
    });
    if (!frozen) vehicle.step(opt.dt);
    agent_step(state, opt.dt);
    record(k, trigger_step(state, vehicle.pose(), Timestamp(k * dt_nanos)));
  }
  return log;
}

// ---------------------------------------------------------------------------
// On-road twin: localizer on recorded or synthesized scans.

namespace detail {

inline std::vector<TimeSpan> unconverged_spans(const std::vector<PoseEstimate>& est) {
  std::vector<TimeSpan> spans;
  if (est.size() < 2) return spans;
  std::vector<std::int64_t> gaps;
  for (std::size_t i = 1; i < est.size(); ++i) gaps.push_back(est[i].stamp.nanos() - est[i - 1].stamp.nanos());
  std::nth_element(gaps.begin(), gaps.begin() + static_cast<std::ptrdiff_t>(gaps.size() / 2), gaps.end());
  const std::int64_t nominal = gaps[gaps.size() / 2];

  auto add = [&](Timestamp a, Timestamp b) {
    if (!spans.empty() && spans.back().end >= a) {
      spans.back().end = std::max(spans.back().end, b);
    } else {
      spans.push_back({a, b});
    }
  };
  for (std::size_t i = 0; i < est.size(); ++i) {
    if (i > 0 && est[i].stamp.nanos() - est[i - 1].stamp.nanos() > nominal * 3 / 2) add(est[i - 1].stamp, est[i].stamp);
    if (!est[i].converged) {
      const Timestamp end = i + 1 < est.size() ? est[i + 1].stamp : est[i].stamp;
      add(est[i].stamp, end);
    }
  }
  return spans;
}

}  // namespace detail

inline RunLog run_replay(const Scenario& scenario, const ScanStream& scans, const RigidTransform& initial_pose,
                         std::shared_ptr<const KdTree> map, const LocalizerConfig& cfg,
                         const ReplayOptions& opt = {}) {
  RunLog log;
  log.header.mode = RunMode::replay;
  log.header.scenario_hash = scenario_hash(scenario);
  log.header.config = {{"tick_hz", opt.tick_hz},
                       {"scan_voxel", cfg.scan_voxel},
                       {"velocity_smoothing", cfg.velocity_smoothing},
                       {"icp",
                        {{"max_iterations", cfg.icp.max_iterations},
                         {"max_correspondence_distance", cfg.icp.max_correspondence_distance},
                         {"convergence_translation", cfg.icp.convergence_translation},
                         {"convergence_rotation", cfg.icp.convergence_rotation},
                         {"fitness_threshold", cfg.icp.fitness_threshold},
                         {"min_inlier_ratio", cfg.icp.min_inlier_ratio}}}};
  log.disturbances = opt.disturbances;
  if (scans.empty()) {
    log.header.error = "NoScans: scan stream is empty";
    return log;
  }
  if (!std::is_sorted(scans.begin(), scans.end(), [](const auto& a, const auto& b) { return a.stamp < b.stamp; })) {
    throw std::invalid_argument("run_replay: scans must be time-ordered");
  }

  Localizer loc(map, cfg);
  try {
    loc.initialize(scans.front().cloud, initial_pose, scans.front().stamp, opt.yaw_search);
  } catch (const InitializationFailed& e) {
    log.header.error = std::string("InitializationFailed: ") + e.what();
    return log;
  }
  log.estimates.push_back({scans.front().stamp, loc.state().pose, 0.0, 0, true});

  RunState state(scenario);
  const std::int64_t tick = detail::to_nanos(1.0 / opt.tick_hz);
  const std::int64_t t0 = scans.front().stamp.nanos();
  const std::int64_t t_end = scans.back().stamp.nanos();
  const auto sample_every = std::max<std::int64_t>(1, std::llround(opt.agent_sample_period * opt.tick_hz));
  std::size_t next_scan = 1;

  for (std::int64_t k = 0; t0 + k * tick <= t_end; ++k) {
    if (opt.cancel && opt.cancel->load()) break;
    const Timestamp t(t0 + k * tick);
    while (next_scan < scans.size() && scans[next_scan].stamp <= t) {
      log.estimates.push_back(loc.update(scans[next_scan].cloud, scans[next_scan].stamp));
      ++next_scan;
    }
    const RigidTransform pose = loc.predict(t);
    if (k > 0) agent_step(state, static_cast<double>(tick) * 1e-9);
    auto events = trigger_step(state, pose, t);
    log.poses.push_back({t, pose});
    detail::log_events(log, state, events);
    if (k % sample_every == 0) detail::sample_agents(log, state, t, pose);
    if (opt.on_tick) {
      opt.on_tick(detail::snapshot(state, t, pose, VehicleStatus::running, loc.state().linear_velocity.norm(),
                                   std::move(events)));
    }
  }
  log.unconverged = detail::unconverged_spans(log.estimates);
  return log;
}

// ---------------------------------------------------------------------------
// Disturbance injection

/// Applies pause, dropout, and clutter disturbances to a scan stream.
inline ScanStream inject(const std::vector<Disturbance>& disturbances, const ScanStream& input) {
  detail::validate_disturbances(disturbances);
  ScanStream scans = input;
  for (const auto& d : disturbances) {
    if (const auto* p = std::get_if<PauseDisturbance>(&d)) {
      const std::int64_t start = detail::to_nanos(p->start), shift = detail::to_nanos(p->duration);
      ScanStream out;
      std::optional<PointCloud> held;
      for (const auto& s : scans) {
        if (s.stamp.nanos() < start) {
          out.push_back(s);
          held = s.cloud;
        }
      }
      for (const auto& s : scans) {
        if (s.stamp.nanos() < start) continue;
        if (!held) held = s.cloud;
        // the vehicle waits: the scene seen at the pause repeats on the original grid
        if (s.stamp.nanos() < start + shift) out.push_back({s.stamp, *held});
      }
      for (const auto& s : scans) {
        if (s.stamp.nanos() >= start) out.push_back({Timestamp(s.stamp.nanos() + shift), s.cloud});
      }
      std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.stamp < b.stamp; });
      scans = std::move(out);
    } else if (const auto* o = std::get_if<DropoutDisturbance>(&d)) {
      std::erase_if(scans, [&](const StampedScan& s) { return detail::in_window(s.stamp, o->start, o->duration); });
    } else if (const auto* c = std::get_if<ClutterDisturbance>(&d)) {
      for (std::size_t i = 0; i < scans.size(); ++i) {
        if (!detail::in_window(scans[i].stamp, c->start, c->duration)) continue;
        Rng rng(mix_seed(c->seed, static_cast<std::uint64_t>(scans[i].stamp.nanos())));
        for (int n = 0; n < c->count; ++n) {
          Vec3 u;
          do {
            u = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
          } while (u.squaredNorm() > 1.0);
          scans[i].cloud.points.push_back({c->center + c->radius * u, 0.0f});
        }
      }
    }
  }
  return scans;
}

/// Applies pause disturbances to a time-stamped trajectory: the vehicle holds
/// its pose for the pause and every later sample shifts by the duration.
inline std::vector<PoseSample> inject(const std::vector<Disturbance>& disturbances,
                                      const std::vector<PoseSample>& trajectory) {
  detail::validate_disturbances(disturbances);
  std::vector<PoseSample> traj = trajectory;
  for (const auto& d : disturbances) {
    const auto* p = std::get_if<PauseDisturbance>(&d);
    if (!p || traj.size() < 2) continue;
    const std::int64_t start = detail::to_nanos(p->start), shift = detail::to_nanos(p->duration);
    const std::int64_t step = traj[1].stamp.nanos() - traj[0].stamp.nanos();
    std::vector<PoseSample> out;
    std::optional<RigidTransform> held;
    for (const auto& s : traj) {
      if (s.stamp.nanos() < start) {
        out.push_back(s);
        continue;
      }
      if (!held) {
        held = s.pose;
        for (std::int64_t t = s.stamp.nanos(); t < s.stamp.nanos() + shift; t += step) out.push_back({Timestamp(t), *held});
      }
      out.push_back({Timestamp(s.stamp.nanos() + shift), s.pose});
    }
    traj = std::move(out);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Twinning comparison

struct TriggerComparison {
  std::string trigger_id;
  double position_distance = 0.0;  // m, map frame
  double time_offset = 0.0;        // s, b - a
  double agent_divergence = 0.0;   // m, max over agents at the firing instant
};

struct TwinningReport {
  bool sequences_equal = false;
  std::vector<std::string> a_sequence, b_sequence;
  std::vector<TriggerComparison> triggers;
  double max_position_distance = 0.0;
  double max_abs_time_offset = 0.0;
  double max_agent_divergence = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& t : triggers) {
      per.push_back({{"trigger_id", t.trigger_id},
                     {"position_distance_m", t.position_distance},
                     {"time_offset_s", t.time_offset},
                     {"agent_divergence_m", t.agent_divergence}});
    }
    return {{"sequences_equal", sequences_equal},
            {"a_sequence", a_sequence},
            {"b_sequence", b_sequence},
            {"triggers", per},
            {"max_position_distance_m", max_position_distance},
            {"max_abs_time_offset_s", max_abs_time_offset},
            {"max_agent_divergence_m", max_agent_divergence}};
  }
};

inline TwinningReport compare_runs(const RunLog& a, const RunLog& b) {
  if (a.header.scenario_hash != b.header.scenario_hash) {
    throw ScenarioMismatch("runs executed different scenarios (" + a.header.scenario_hash + " vs " +
                           b.header.scenario_hash + ")");
  }
  TwinningReport r;
  r.a_sequence = a.trigger_ids();
  r.b_sequence = b.trigger_ids();
  r.sequences_equal = r.a_sequence == r.b_sequence;

  // k-th firing of an id in a pairs with the k-th firing of that id in b
  std::map<std::string, std::vector<const LoggedTrigger*>> b_by_id;
  for (const auto& t : b.triggers) b_by_id[t.event.trigger_id].push_back(&t);
  std::map<std::string, std::size_t> seen;
  for (const auto& ta : a.triggers) {
    const auto& id = ta.event.trigger_id;
    const std::size_t k = seen[id]++;
    auto it = b_by_id.find(id);
    if (it == b_by_id.end() || k >= it->second.size()) continue;
    const LoggedTrigger& tb = *it->second[k];
    TriggerComparison c;
    c.trigger_id = id;
    c.position_distance = translation_distance(ta.event.vehicle_pose_at_fire, tb.event.vehicle_pose_at_fire);
    c.time_offset = seconds_between(tb.event.stamp, ta.event.stamp);
    for (const auto& pa : ta.agents) {
      for (const auto& pb : tb.agents) {
        if (pa.agent_id == pb.agent_id) c.agent_divergence = std::max(c.agent_divergence, translation_distance(pa.pose, pb.pose));
      }
    }
    r.max_position_distance = std::max(r.max_position_distance, c.position_distance);
    r.max_abs_time_offset = std::max(r.max_abs_time_offset, std::abs(c.time_offset));
    r.max_agent_divergence = std::max(r.max_agent_divergence, c.agent_divergence);
    r.triggers.push_back(c);
  }
  return r;
}

/// Ground-truth pose at t: interpolated between samples, held past either end.
inline RigidTransform pose_at(const std::vector<PoseSample>& traj, Timestamp t) {
  if (traj.empty()) throw std::invalid_argument("pose_at: empty trajectory");
  if (t <= traj.front().stamp) return traj.front().pose;
  if (t >= traj.back().stamp) return traj.back().pose;
  auto hi = std::lower_bound(traj.begin(), traj.end(), t, [](const PoseSample& s, Timestamp v) { return s.stamp < v; });
  if (hi->stamp == t) return hi->pose;
  auto lo = std::prev(hi);
  const double r = static_cast<double>(t.nanos() - lo->stamp.nanos()) / static_cast<double>(hi->stamp.nanos() - lo->stamp.nanos());
  return interpolate(lo->pose, hi->pose, r);
}

/// Error of each estimate against the ground truth interpolated at its stamp.
inline std::vector<double> trajectory_errors(const std::vector<PoseEstimate>& est, const std::vector<PoseSample>& truth) {
  std::vector<double> out;
  out.reserve(est.size());
  for (const auto& e : est) out.push_back(translation_distance(e.map_to_vehicle, pose_at(truth, e.stamp)));
  return out;
}

inline double rmse(const std::vector<double>& errors) {
  if (errors.empty()) return 0.0;
  double s = 0.0;
  for (double e : errors) s += e * e;
  return std::sqrt(s / static_cast<double>(errors.size()));
}

}  // namespace portobello
