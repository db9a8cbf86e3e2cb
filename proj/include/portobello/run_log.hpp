#pragma once

#include "portobello/cloud_io.hpp"
#include "portobello/localization.hpp"
#include "portobello/scenario.hpp"
#include "portobello/scenario_runtime.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace portobello {

// ---------------------------------------------------------------------------
// Disturbances (unplanned events)

/// Vehicle waits in place for `duration` seconds starting at `start`.
struct PauseDisturbance {
  double start = 0.0;
  double duration = 0.0;
  bool operator==(const PauseDisturbance&) const = default;
};

/// No scans arrive in [start, start + duration).
struct DropoutDisturbance {
  double start = 0.0;
  double duration = 0.0;
  bool operator==(const DropoutDisturbance&) const = default;
};

/// `count` uniform random points inside a sphere given in the vehicle frame,
/// added to every scan in [start, start + duration).
struct ClutterDisturbance {
  double start = 0.0;
  double duration = 0.0;
  Vec3 center = Vec3::Zero();
  double radius = 2.0;
  int count = 500;
  std::uint64_t seed = 0;
  bool operator==(const ClutterDisturbance&) const = default;
};

using Disturbance = std::variant<PauseDisturbance, DropoutDisturbance, ClutterDisturbance>;

// ---------------------------------------------------------------------------
// Run log

enum class RunMode { sim, replay };

inline const char* mode_name(RunMode m) { return m == RunMode::sim ? "sim" : "replay"; }

struct PoseSample {
  Timestamp stamp;
  RigidTransform pose;
  bool operator==(const PoseSample&) const = default;
};

struct AgentSample {
  Timestamp stamp;
  std::string agent_id;
  RigidTransform pose;
  bool active = true;
  bool visible = false;
  bool operator==(const AgentSample&) const = default;
};

struct AgentPose {
  std::string agent_id;
  RigidTransform pose;
  bool operator==(const AgentPose&) const = default;
};

struct LoggedTrigger {
  TriggerEvent event;
  std::vector<AgentPose> agents;  // agent poses right after the actions ran
  bool operator==(const LoggedTrigger&) const = default;
};

struct TimeSpan {
  Timestamp start;
  Timestamp end;
  bool operator==(const TimeSpan&) const = default;
};

struct RunLogHeader {
  RunMode mode = RunMode::sim;
  std::string scenario_hash;
  std::map<std::string, std::uint64_t> seeds;
  nlohmann::json config = nlohmann::json::object();
  std::optional<std::string> error;
  bool operator==(const RunLogHeader&) const = default;
};

struct RunLog {
  RunLogHeader header;
  std::vector<PoseSample> poses;
  std::vector<PoseEstimate> estimates;  // replay only
  std::vector<LoggedTrigger> triggers;
  std::vector<AgentSample> agents;
  std::vector<Disturbance> disturbances;
  std::vector<TimeSpan> unconverged;  // replay only
  bool operator==(const RunLog&) const = default;

  std::vector<std::string> trigger_ids() const {
    std::vector<std::string> ids;
    for (const auto& t : triggers) ids.push_back(t.event.trigger_id);
    return ids;
  }
};

// ---------------------------------------------------------------------------
// JSON lines encoding

namespace run_log_json {

using nlohmann::json;

inline json pose(const RigidTransform& t) { return scenario_json::to_json(t); }
inline RigidTransform pose(const json& j) { return scenario_json::pose(j, "pose"); }

inline json disturbance(const Disturbance& d) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, PauseDisturbance>)
          return {{"kind", "pause"}, {"start", v.start}, {"duration", v.duration}};
        if constexpr (std::is_same_v<T, DropoutDisturbance>)
          return {{"kind", "scan-dropout"}, {"start", v.start}, {"duration", v.duration}};
        if constexpr (std::is_same_v<T, ClutterDisturbance>)
          return {{"kind", "clutter"}, {"start", v.start}, {"duration", v.duration},
                  {"center", scenario_json::to_json(v.center)}, {"radius", v.radius},
                  {"count", v.count}, {"seed", v.seed}};
      },
      d);
}

inline Disturbance disturbance(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "pause") return PauseDisturbance{j.at("start").get<double>(), j.at("duration").get<double>()};
  if (kind == "scan-dropout") return DropoutDisturbance{j.at("start").get<double>(), j.at("duration").get<double>()};
  if (kind == "clutter") {
    return ClutterDisturbance{j.at("start").get<double>(), j.at("duration").get<double>(),
                              scenario_json::vec3(j.at("center"), "center"), j.at("radius").get<double>(),
                              j.at("count").get<int>(), j.at("seed").get<std::uint64_t>()};
  }
  throw SchemaError("kind", "unknown disturbance kind '" + kind + "'");
}

}  // namespace run_log_json

inline std::string encode_run_log(const RunLog& log) {
  using nlohmann::json;
  namespace rj = run_log_json;
  std::string out;
  auto emit = [&](const json& j) {
    out += j.dump();
    out += '\n';
  };
  const auto& h = log.header;
  emit({{"record", "header"},
        {"format", "portobello-runlog"},
        {"version", 1},
        {"mode", mode_name(h.mode)},
        {"scenario_hash", h.scenario_hash},
        {"seeds", h.seeds},
        {"config", h.config},
        {"error", h.error ? json(*h.error) : json(nullptr)}});
  for (const auto& d : log.disturbances) {
    json j = rj::disturbance(d);
    j["record"] = "disturbance";
    emit(j);
  }
  for (const auto& p : log.poses) emit({{"record", "pose"}, {"stamp", p.stamp.nanos()}, {"pose", rj::pose(p.pose)}});
  for (const auto& e : log.estimates) {
    emit({{"record", "estimate"}, {"stamp", e.stamp.nanos()}, {"pose", rj::pose(e.map_to_vehicle)},
          {"fitness", e.fitness}, {"iterations", e.iterations_used}, {"converged", e.converged}});
  }
  for (const auto& s : log.unconverged) {
    emit({{"record", "unconverged_span"}, {"start", s.start.nanos()}, {"end", s.end.nanos()}});
  }
  for (const auto& t : log.triggers) {
    json actions = json::array();
    for (const auto& a : t.event.actions_executed) actions.push_back(scenario_json::to_json(a));
    json agents = json::array();
    for (const auto& a : t.agents) agents.push_back({{"agent_id", a.agent_id}, {"pose", rj::pose(a.pose)}});
    emit({{"record", "trigger"}, {"stamp", t.event.stamp.nanos()}, {"trigger_id", t.event.trigger_id},
          {"pose", rj::pose(t.event.vehicle_pose_at_fire)}, {"actions", actions}, {"agents", agents}});
  }
  for (const auto& a : log.agents) {
    emit({{"record", "agent"}, {"stamp", a.stamp.nanos()}, {"agent_id", a.agent_id},
          {"pose", rj::pose(a.pose)}, {"active", a.active}, {"visible", a.visible}});
  }
  return out;
}

inline RunLog decode_run_log(std::string_view text) {
  using nlohmann::json;
  namespace rj = run_log_json;
  RunLog log;
  bool have_header = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t at = pos;
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const auto rec = j.at("record").get<std::string>();
      auto stamp = [&](const char* key = "stamp") { return Timestamp(j.at(key).get<std::int64_t>()); };
      if (rec == "header") {
        if (j.at("format") != "portobello-runlog" || j.at("version") != 1) {
          throw FormatError("not a portobello run log", at);
        }
        auto& h = log.header;
        h.mode = j.at("mode") == "sim" ? RunMode::sim : RunMode::replay;
        h.scenario_hash = j.at("scenario_hash").get<std::string>();
        h.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
        h.config = j.at("config");
        if (!j.at("error").is_null()) h.error = j.at("error").get<std::string>();
        have_header = true;
      } else if (!have_header) {
        throw FormatError("first record must be the header", at);
      } else if (rec == "pose") {
        log.poses.push_back({stamp(), rj::pose(j.at("pose"))});
      } else if (rec == "estimate") {
        log.estimates.push_back({stamp(), rj::pose(j.at("pose")), j.at("fitness").get<double>(),
                                 j.at("iterations").get<int>(), j.at("converged").get<bool>()});
      } else if (rec == "unconverged_span") {
        log.unconverged.push_back({stamp("start"), stamp("end")});
      } else if (rec == "trigger") {
        LoggedTrigger t;
        t.event.stamp = stamp();
        t.event.trigger_id = j.at("trigger_id").get<std::string>();
        t.event.vehicle_pose_at_fire = rj::pose(j.at("pose"));
        for (const auto& a : j.at("actions")) t.event.actions_executed.push_back(scenario_json::action(a, "actions"));
        for (const auto& a : j.at("agents")) t.agents.push_back({a.at("agent_id").get<std::string>(), rj::pose(a.at("pose"))});
        log.triggers.push_back(std::move(t));
      } else if (rec == "agent") {
        log.agents.push_back({stamp(), j.at("agent_id").get<std::string>(), rj::pose(j.at("pose")),
                              j.at("active").get<bool>(), j.at("visible").get<bool>()});
      } else if (rec == "disturbance") {
        log.disturbances.push_back(rj::disturbance(j));
      } else {
        throw FormatError("unknown record type '" + rec + "'", at);
      }
    } catch (const json::exception& e) {
      throw FormatError("run log line " + std::to_string(line_no) + ": " + e.what(), at);
    } catch (const SchemaError& e) {
      throw FormatError("run log line " + std::to_string(line_no) + ": " + e.what(), at);
    }
  }
  if (!have_header) throw FormatError("run log has no header", 0);
  return log;
}

inline void save_run_log(const RunLog& log, const std::filesystem::path& path) {
  write_file(path, encode_run_log(log));
}
inline RunLog load_run_log(const std::filesystem::path& path) { return decode_run_log(read_file(path)); }

}  // namespace portobello
