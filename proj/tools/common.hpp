#pragma once

#include "portobello/cloud_io.hpp"
#include "portobello/errors.hpp"
#include "portobello/harness.hpp"
#include "portobello/scenario.hpp"
#include "portobello/wire.hpp"

#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>

namespace portobello::cli {

// Stable exit codes, also listed in README.md.
enum Exit : int {
  kOk = 0,
  kBadInput = 2,            // unreadable or malformed input file
  kDiverged = 3,            // map-build registration diverged
  kInvalidScenario = 4,     // scenario-validate found errors
  kInitFailed = 5,          // replay could not initialize the localizer
  kRouteUnreachable = 6,    // sim vehicle left the route
  kBindFailed = 7,          // TCP/HTTP port unavailable
  kSequencesDiffer = 8,     // twin-report: trigger sequences differ
  kScenarioMismatch = 9,    // twin-report: logs ran different scenarios
  kUsage = 64,
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void setup_logging(const std::string& level) {
  auto logger = spdlog::stderr_color_mt("portobello");
  spdlog::set_default_logger(logger);
  const auto lvl = spdlog::level::from_str(level);
  if (lvl == spdlog::level::off && level != "off") throw UsageError("unknown --log-level '" + level + "'");
  spdlog::set_level(lvl);
}

inline void print_json(const nlohmann::json& j) {
  std::cout << j.dump(2) << std::endl;
}

/// "x y z yaw" (yaw in radians).
inline RigidTransform parse_init_pose(const std::string& text) {
  std::istringstream in(text);
  double x, y, z, yaw;
  if (!(in >> x >> y >> z >> yaw) || !(in >> std::ws).eof()) {
    throw UsageError("--init-pose expects \"x y z yaw\", got \"" + text + "\"");
  }
  return RigidTransform::from_yaw(yaw, Vec3(x, y, z));
}

/// "START:DURATION" in seconds.
inline std::pair<double, double> parse_window(const std::string& text, const char* flag) {
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) throw std::invalid_argument("");
    std::size_t used = 0;
    const double start = std::stod(text.substr(0, colon), &used);
    const double dur = std::stod(text.substr(colon + 1));
    if (start < 0 || dur <= 0) throw std::invalid_argument("");
    return {start, dur};
  } catch (const std::exception&) {
    throw UsageError(std::string(flag) + " expects START:DURATION with START >= 0 and DURATION > 0, got \"" + text + "\"");
  }
}

/// Pose of the route start, facing the second waypoint.
inline RigidTransform route_start_pose(const Scenario& s) {
  if (s.route.size() < 2) throw UsageError("scenario route needs at least two waypoints");
  const Vec3 d = s.route[1].position - s.route[0].position;
  return RigidTransform::from_yaw(std::atan2(d.y(), d.x()), s.route[0].position);
}

/// Sleeps so that sim time `stamp` lines up with wall time since `start`.
class Pacer {
 public:
  explicit Pacer(double speed = 1.0) : speed_(speed), start_(std::chrono::steady_clock::now()) {}
  void wait_for(Timestamp stamp) const {
    if (speed_ <= 0) return;
    const auto offset = std::chrono::nanoseconds(static_cast<std::int64_t>(static_cast<double>(stamp.nanos()) / speed_));
    std::this_thread::sleep_until(start_ + offset);
  }

 private:
  double speed_;
  std::chrono::steady_clock::time_point start_;
};

/// "right-z" (the map frame), "left-y", "right-y", or "left-z".
inline wire::RendererConvention parse_convention(const std::string& text) {
  using wire::Handedness;
  using wire::UpAxis;
  if (text == "right-z") return {Handedness::right, UpAxis::z};
  if (text == "left-y") return {Handedness::left, UpAxis::y};
  if (text == "right-y") return {Handedness::right, UpAxis::y};
  if (text == "left-z") return {Handedness::left, UpAxis::z};
  throw UsageError("--convention must be right-z, left-y, right-y, or left-z, got \"" + text + "\"");
}

inline nlohmann::json trajectory_record(std::size_t index, Timestamp stamp, const RigidTransform& pose, bool keyframe) {
  return {{"index", index}, {"stamp", stamp.nanos()}, {"pose", scenario_json::to_json(pose)}, {"keyframe", keyframe}};
}

}  // namespace portobello::cli
