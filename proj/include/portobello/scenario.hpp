#pragma once

#include "portobello/cloud_io.hpp"
#include "portobello/errors.hpp"
#include "portobello/kdtree.hpp"
#include "portobello/rigid_transform.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace portobello {

// ---------------------------------------------------------------------------
// Model

struct BoxShape {
  Vec3 center = Vec3::Zero();
  Vec3 half_extents = Vec3::Ones();
  bool operator==(const BoxShape&) const = default;
};

/// Vertical cylinder; `center` is the middle of its axis.
struct CylinderShape {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
  double height = 2.0;
  bool operator==(const CylinderShape&) const = default;
};

using TriggerShape = std::variant<BoxShape, CylinderShape>;

inline bool contains(const TriggerShape& shape, const Vec3& p) {
  if (const auto* b = std::get_if<BoxShape>(&shape)) {
    const Vec3 d = (p - b->center).cwiseAbs();
    return d.x() <= b->half_extents.x() && d.y() <= b->half_extents.y() && d.z() <= b->half_extents.z();
  }
  const auto& c = std::get<CylinderShape>(shape);
  const double dx = p.x() - c.center.x(), dy = p.y() - c.center.y();
  return dx * dx + dy * dy <= c.radius * c.radius && std::abs(p.z() - c.center.z()) <= c.height / 2;
}

inline Vec3 shape_center(const TriggerShape& s) {
  return std::visit([](const auto& v) { return v.center; }, s);
}

struct TriggerVolume {
  std::string id;
  TriggerShape shape;
  bool one_shot = true;
  bool operator==(const TriggerVolume&) const = default;
};

enum class AgentKind { pedestrian, prop };

struct PathPoint {
  Vec3 waypoint = Vec3::Zero();
  double speed = 1.0;  // m/s on the segment ending at `waypoint`
  bool operator==(const PathPoint&) const = default;
};

struct VirtualAgent {
  std::string id;
  AgentKind kind = AgentKind::pedestrian;
  RigidTransform initial_pose;
  std::vector<PathPoint> path;
  bool initially_active = true;
  bool operator==(const VirtualAgent&) const = default;
};

struct StartAgent {
  std::string agent_id;
  bool operator==(const StartAgent&) const = default;
};
struct StopAgent {
  std::string agent_id;
  bool operator==(const StopAgent&) const = default;
};
struct SetActive {
  std::string agent_id;
  bool active = true;
  bool operator==(const SetActive&) const = default;
};
struct EmitMarker {
  std::string label;
  bool operator==(const EmitMarker&) const = default;
};

using EventAction = std::variant<StartAgent, StopAgent, SetActive, EmitMarker>;

struct TriggerBinding {
  std::string trigger_id;
  std::vector<EventAction> actions;
  bool operator==(const TriggerBinding&) const = default;
};

struct RouteWaypoint {
  Vec3 position = Vec3::Zero();
  double target_speed = 5.0;  // m/s
  bool stop = false;
  bool operator==(const RouteWaypoint&) const = default;
};

struct MapRef {
  std::string path;
  std::optional<std::string> hash;
  bool operator==(const MapRef&) const = default;
};

constexpr double kDefaultRenderDistance = 45.0;  // m

struct Scenario {
  MapRef map_ref;
  std::vector<VirtualAgent> agents;
  std::vector<TriggerVolume> triggers;
  std::vector<TriggerBinding> bindings;
  std::vector<RouteWaypoint> route;
  double render_distance = kDefaultRenderDistance;
  bool operator==(const Scenario&) const = default;

  const VirtualAgent* find_agent(const std::string& id) const {
    for (const auto& a : agents) if (a.id == id) return &a;
    return nullptr;
  }
  const TriggerVolume* find_trigger(const std::string& id) const {
    for (const auto& t : triggers) if (t.id == id) return &t;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// JSON

constexpr int kScenarioVersion = 1;

namespace scenario_json {

using nlohmann::json;

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}
inline std::string index(const std::string& path, std::size_t i) {
  return path + "[" + std::to_string(i) + "]";
}

inline void expect_object(const json& j, const std::string& path,
                          std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw SchemaError(path.empty() ? "$" : path, "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
      throw SchemaError(join(path, key), "unknown field");
    }
  }
}

inline const json& required(const json& j, const std::string& path, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(join(path, key), "missing required field");
  return *it;
}

inline double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw SchemaError(path, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw SchemaError(path, "must be finite");
  return v;
}

inline double positive(const json& j, const std::string& path) {
  const double v = number(j, path);
  if (!(v > 0.0)) throw SchemaError(path, "must be positive");
  return v;
}

inline std::string string(const json& j, const std::string& path) {
  if (!j.is_string()) throw SchemaError(path, "expected a string");
  return j.get<std::string>();
}

inline std::string id(const json& j, const std::string& path) {
  auto s = string(j, path);
  if (s.empty()) throw SchemaError(path, "must be non-empty");
  return s;
}

inline bool boolean(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw SchemaError(path, "expected true or false");
  return j.get<bool>();
}

inline const json& array(const json& j, const std::string& path) {
  if (!j.is_array()) throw SchemaError(path, "expected an array");
  return j;
}

inline Vec3 vec3(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw SchemaError(path, "expected [x, y, z]");
  return {number(j[0], index(path, 0)), number(j[1], index(path, 1)), number(j[2], index(path, 2))};
}

inline json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline RigidTransform pose(const json& j, const std::string& path) {
  expect_object(j, path, {"translation", "rotation"});
  const Vec3 t = vec3(required(j, path, "translation"), join(path, "translation"));
  if (!j.contains("rotation")) return RigidTransform::from_translation(t);
  const auto& r = j["rotation"];
  const auto rp = join(path, "rotation");
  if (!r.is_array() || r.size() != 4) throw SchemaError(rp, "expected [w, x, y, z]");
  Quat q(number(r[0], index(rp, 0)), number(r[1], index(rp, 1)), number(r[2], index(rp, 2)),
         number(r[3], index(rp, 3)));
  if (!(q.norm() > 1e-9)) throw SchemaError(rp, "quaternion must be non-zero");
  return {q, t};
}

inline json to_json(const RigidTransform& t) {
  const auto& q = t.rotation();
  return {{"translation", to_json(t.translation())}, {"rotation", json::array({q.w(), q.x(), q.y(), q.z()})}};
}

inline TriggerShape shape(const json& j, const std::string& path) {
  if (!j.is_object()) throw SchemaError(path, "expected an object");
  const auto type = string(required(j, path, "type"), join(path, "type"));
  if (type == "box") {
    expect_object(j, path, {"type", "center", "half_extents"});
    BoxShape b{vec3(required(j, path, "center"), join(path, "center")),
               vec3(required(j, path, "half_extents"), join(path, "half_extents"))};
    if (!(b.half_extents.minCoeff() > 0.0)) throw SchemaError(join(path, "half_extents"), "must be positive");
    return b;
  }
  if (type == "cylinder") {
    expect_object(j, path, {"type", "center", "radius", "height"});
    return CylinderShape{vec3(required(j, path, "center"), join(path, "center")),
                         positive(required(j, path, "radius"), join(path, "radius")),
                         positive(required(j, path, "height"), join(path, "height"))};
  }
  throw SchemaError(join(path, "type"), "expected \"box\" or \"cylinder\"");
}

inline json to_json(const TriggerShape& s) {
  if (const auto* b = std::get_if<BoxShape>(&s)) {
    return {{"type", "box"}, {"center", to_json(b->center)}, {"half_extents", to_json(b->half_extents)}};
  }
  const auto& c = std::get<CylinderShape>(s);
  return {{"type", "cylinder"}, {"center", to_json(c.center)}, {"radius", c.radius}, {"height", c.height}};
}

inline EventAction action(const json& j, const std::string& path) {
  if (!j.is_object()) throw SchemaError(path, "expected an object");
  const auto type = string(required(j, path, "type"), join(path, "type"));
  if (type == "start_agent" || type == "stop_agent") {
    expect_object(j, path, {"type", "agent_id"});
    auto agent = id(required(j, path, "agent_id"), join(path, "agent_id"));
    if (type == "start_agent") return StartAgent{agent};
    return StopAgent{agent};
  }
  if (type == "set_active") {
    expect_object(j, path, {"type", "agent_id", "active"});
    return SetActive{id(required(j, path, "agent_id"), join(path, "agent_id")),
                     boolean(required(j, path, "active"), join(path, "active"))};
  }
  if (type == "emit_marker") {
    expect_object(j, path, {"type", "label"});
    return EmitMarker{string(required(j, path, "label"), join(path, "label"))};
  }
  throw SchemaError(join(path, "type"), "unknown action type '" + type + "'");
}

inline json to_json(const EventAction& a) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, StartAgent>) return {{"type", "start_agent"}, {"agent_id", v.agent_id}};
        if constexpr (std::is_same_v<T, StopAgent>) return {{"type", "stop_agent"}, {"agent_id", v.agent_id}};
        if constexpr (std::is_same_v<T, SetActive>)
          return {{"type", "set_active"}, {"agent_id", v.agent_id}, {"active", v.active}};
        if constexpr (std::is_same_v<T, EmitMarker>) return {{"type", "emit_marker"}, {"label", v.label}};
      },
      a);
}

inline const char* kind_name(AgentKind k) { return k == AgentKind::pedestrian ? "pedestrian" : "prop"; }

}  // namespace scenario_json

/// Label for logs and the wire.
inline std::string describe(const EventAction& a) {
  return scenario_json::to_json(a).dump();
}

/// Structural checks that need the whole document: unique ids and resolvable references.
inline void check_references(const Scenario& s) {
  std::set<std::string> agents, triggers;
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    if (!agents.insert(s.agents[i].id).second) {
      throw SchemaError("agents[" + std::to_string(i) + "].id", "duplicate agent id '" + s.agents[i].id + "'");
    }
  }
  for (std::size_t i = 0; i < s.triggers.size(); ++i) {
    if (!triggers.insert(s.triggers[i].id).second) {
      throw SchemaError("triggers[" + std::to_string(i) + "].id",
                        "duplicate trigger id '" + s.triggers[i].id + "'");
    }
  }
  for (const auto& b : s.bindings) {
    if (!triggers.contains(b.trigger_id)) throw DanglingReference(b.trigger_id);
    for (const auto& a : b.actions) {
      std::visit(
          [&](const auto& v) {
            if constexpr (!std::is_same_v<std::decay_t<decltype(v)>, EmitMarker>) {
              if (!agents.contains(v.agent_id)) throw DanglingReference(v.agent_id);
            }
          },
          a);
    }
  }
  for (std::size_t i = 1; i < s.route.size(); ++i) {
    if (s.route[i].position == s.route[i - 1].position) {
      throw SchemaError("route[" + std::to_string(i) + "].position", "repeats the previous waypoint");
    }
  }
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
  using namespace scenario_json;
  expect_object(j, "", {"portobello_scenario", "map_ref", "render_distance", "agents", "triggers", "bindings", "route"});
  const auto& version = required(j, "", "portobello_scenario");
  if (!version.is_number_integer() || version.get<int>() != kScenarioVersion) {
    throw SchemaError("portobello_scenario", "unsupported version (expected 1)");
  }

  Scenario s;
  {
    const auto& m = required(j, "", "map_ref");
    expect_object(m, "map_ref", {"path", "hash"});
    s.map_ref.path = string(required(m, "map_ref", "path"), "map_ref.path");
    if (m.contains("hash")) s.map_ref.hash = string(m["hash"], "map_ref.hash");
  }
  if (j.contains("render_distance")) s.render_distance = positive(j["render_distance"], "render_distance");

  if (j.contains("agents")) {
    const auto& arr = array(j["agents"], "agents");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto p = index("agents", i);
      const auto& a = arr[i];
      expect_object(a, p, {"id", "kind", "initial_pose", "path", "initially_active"});
      VirtualAgent agent;
      agent.id = id(required(a, p, "id"), join(p, "id"));
      if (a.contains("kind")) {
        const auto k = string(a["kind"], join(p, "kind"));
        if (k == "pedestrian") agent.kind = AgentKind::pedestrian;
        else if (k == "prop") agent.kind = AgentKind::prop;
        else throw SchemaError(join(p, "kind"), "expected \"pedestrian\" or \"prop\"");
      }
      agent.initial_pose = pose(required(a, p, "initial_pose"), join(p, "initial_pose"));
      if (a.contains("path")) {
        const auto pp = join(p, "path");
        const auto& path = array(a["path"], pp);
        for (std::size_t k = 0; k < path.size(); ++k) {
          const auto wp = index(pp, k);
          expect_object(path[k], wp, {"waypoint", "speed"});
          agent.path.push_back({vec3(required(path[k], wp, "waypoint"), join(wp, "waypoint")),
                                positive(required(path[k], wp, "speed"), join(wp, "speed"))});
        }
      }
      if (a.contains("initially_active")) agent.initially_active = boolean(a["initially_active"], join(p, "initially_active"));
      s.agents.push_back(std::move(agent));
    }
  }

  if (j.contains("triggers")) {
    const auto& arr = array(j["triggers"], "triggers");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto p = index("triggers", i);
      expect_object(arr[i], p, {"id", "shape", "one_shot"});
      TriggerVolume t;
      t.id = id(required(arr[i], p, "id"), join(p, "id"));
      t.shape = shape(required(arr[i], p, "shape"), join(p, "shape"));
      if (arr[i].contains("one_shot")) t.one_shot = boolean(arr[i]["one_shot"], join(p, "one_shot"));
      s.triggers.push_back(std::move(t));
    }
  }

  if (j.contains("bindings")) {
    const auto& arr = array(j["bindings"], "bindings");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto p = index("bindings", i);
      expect_object(arr[i], p, {"trigger_id", "actions"});
      TriggerBinding b;
      b.trigger_id = id(required(arr[i], p, "trigger_id"), join(p, "trigger_id"));
      const auto ap = join(p, "actions");
      const auto& actions = array(required(arr[i], p, "actions"), ap);
      for (std::size_t k = 0; k < actions.size(); ++k) b.actions.push_back(action(actions[k], index(ap, k)));
      s.bindings.push_back(std::move(b));
    }
  }

  if (j.contains("route")) {
    const auto& arr = array(j["route"], "route");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto p = index("route", i);
      expect_object(arr[i], p, {"position", "target_speed", "stop"});
      RouteWaypoint w;
      w.position = vec3(required(arr[i], p, "position"), join(p, "position"));
      w.target_speed = positive(required(arr[i], p, "target_speed"), join(p, "target_speed"));
      if (arr[i].contains("stop")) w.stop = boolean(arr[i]["stop"], join(p, "stop"));
      s.route.push_back(w);
    }
  }

  check_references(s);
  return s;
}

inline nlohmann::json scenario_to_json(const Scenario& s) {
  using namespace scenario_json;
  json j;
  j["portobello_scenario"] = kScenarioVersion;
  j["map_ref"] = {{"path", s.map_ref.path}};
  if (s.map_ref.hash) j["map_ref"]["hash"] = *s.map_ref.hash;
  j["render_distance"] = s.render_distance;
  j["agents"] = json::array();
  for (const auto& a : s.agents) {
    json path = json::array();
    for (const auto& p : a.path) path.push_back({{"waypoint", to_json(p.waypoint)}, {"speed", p.speed}});
    j["agents"].push_back({{"id", a.id},
                           {"kind", kind_name(a.kind)},
                           {"initial_pose", to_json(a.initial_pose)},
                           {"path", path},
                           {"initially_active", a.initially_active}});
  }
  j["triggers"] = json::array();
  for (const auto& t : s.triggers) {
    j["triggers"].push_back({{"id", t.id}, {"shape", to_json(t.shape)}, {"one_shot", t.one_shot}});
  }
  j["bindings"] = json::array();
  for (const auto& b : s.bindings) {
    json actions = json::array();
    for (const auto& a : b.actions) actions.push_back(to_json(a));
    j["bindings"].push_back({{"trigger_id", b.trigger_id}, {"actions", actions}});
  }
  j["route"] = json::array();
  for (const auto& w : s.route) {
    j["route"].push_back({{"position", to_json(w.position)}, {"target_speed", w.target_speed}, {"stop", w.stop}});
  }
  return j;
}

inline Scenario parse_scenario(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError("$", std::string("malformed JSON: ") + e.what());
  }
  return scenario_from_json(j);
}

inline std::string serialize_scenario(const Scenario& s) { return scenario_to_json(s).dump(2) + "\n"; }

/// Content hash of the canonical (compact, key-sorted) encoding.
inline std::string scenario_hash(const Scenario& s) { return hex64(fnv1a64(scenario_to_json(s).dump())); }

inline Scenario load_scenario(const std::filesystem::path& path) { return parse_scenario(read_file(path)); }
inline void save_scenario(const Scenario& s, const std::filesystem::path& path) {
  write_file(path, serialize_scenario(s));
}

// ---------------------------------------------------------------------------
// Validation against a map

enum class Severity { warning, error };

struct ValidationIssue {
  Severity severity = Severity::error;
  std::string code;       // OutOfMap, TriggerOverlap, MapHashMismatch
  std::string entity_id;  // agent/trigger id, or route[i]
  std::string message;
  bool operator==(const ValidationIssue&) const = default;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool has_errors() const {
    return std::any_of(issues.begin(), issues.end(), [](const auto& i) { return i.severity == Severity::error; });
  }
  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& i : issues) {
      arr.push_back({{"severity", i.severity == Severity::error ? "error" : "warning"},
                     {"code", i.code},
                     {"entity_id", i.entity_id},
                     {"message", i.message}});
    }
    return {{"ok", !has_errors()}, {"issues", arr}};
  }
};

constexpr double kMaxDistanceFromMap = 5.0;  // m

namespace detail {

struct Aabb {
  Vec3 lo, hi;
};

inline Aabb bounds(const TriggerShape& s) {
  if (const auto* b = std::get_if<BoxShape>(&s)) return {b->center - b->half_extents, b->center + b->half_extents};
  const auto& c = std::get<CylinderShape>(s);
  const Vec3 h(c.radius, c.radius, c.height / 2);
  return {c.center - h, c.center + h};
}

inline bool overlaps(const TriggerShape& a, const TriggerShape& b) {
  const Aabb ba = bounds(a), bb = bounds(b);
  if ((ba.hi.array() < bb.lo.array()).any() || (bb.hi.array() < ba.lo.array()).any()) return false;
  const auto* ca = std::get_if<CylinderShape>(&a);
  const auto* cb = std::get_if<CylinderShape>(&b);
  if (ca && cb) return (ca->center - cb->center).head<2>().norm() <= ca->radius + cb->radius;
  if (ca || cb) {
    const CylinderShape& c = ca ? *ca : *cb;
    const BoxShape& box = ca ? std::get<BoxShape>(b) : std::get<BoxShape>(a);
    const Eigen::Vector2d lo = (box.center - box.half_extents).head<2>();
    const Eigen::Vector2d hi = (box.center + box.half_extents).head<2>();
    const Eigen::Vector2d closest = c.center.head<2>().cwiseMax(lo).cwiseMin(hi);
    return (closest - c.center.head<2>()).norm() <= c.radius;
  }
  return true;
}

}  // namespace detail

/// Checks that staged entities lie inside the mapped area, flags overlapping
/// triggers, and checks the map hash when the scenario pins one.
inline ValidationReport validate_against_map(const Scenario& s, const KdTree& map,
                                             const std::optional<std::string>& loaded_map_hash = std::nullopt) {
  ValidationReport report;
  auto off_map = [&](const Vec3& p) {
    return map.empty() || map.nearest(p).squared_distance > kMaxDistanceFromMap * kMaxDistanceFromMap;
  };
  auto out_of_map = [&](const std::string& id, const std::string& what) {
    report.issues.push_back({Severity::error, "OutOfMap", id,
                             what + " lies more than " + std::to_string(kMaxDistanceFromMap) + " m from any map point"});
  };

  if (s.map_ref.hash && loaded_map_hash && *s.map_ref.hash != *loaded_map_hash) {
    report.issues.push_back({Severity::error, "MapHashMismatch", "map_ref",
                             "scenario pins map " + *s.map_ref.hash + " but loaded map is " + *loaded_map_hash});
  }
  for (const auto& t : s.triggers) {
    if (off_map(shape_center(t.shape))) out_of_map(t.id, "trigger '" + t.id + "'");
  }
  for (const auto& a : s.agents) {
    bool bad = off_map(a.initial_pose.translation());
    for (const auto& p : a.path) bad = bad || off_map(p.waypoint);
    if (bad) out_of_map(a.id, "agent '" + a.id + "'");
  }
  for (std::size_t i = 0; i < s.route.size(); ++i) {
    if (off_map(s.route[i].position)) {
      const auto id = "route[" + std::to_string(i) + "]";
      out_of_map(id, "waypoint " + id);
    }
  }
  for (std::size_t i = 0; i < s.triggers.size(); ++i) {
    for (std::size_t k = i + 1; k < s.triggers.size(); ++k) {
      if (detail::overlaps(s.triggers[i].shape, s.triggers[k].shape)) {
        report.issues.push_back({Severity::warning, "TriggerOverlap", s.triggers[i].id,
                                 "trigger '" + s.triggers[i].id + "' overlaps '" + s.triggers[k].id + "'"});
      }
    }
  }
  return report;
}

}  // namespace portobello
