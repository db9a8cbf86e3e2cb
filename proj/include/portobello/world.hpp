#pragma once

#include "portobello/cloud_io.hpp"
#include "portobello/harness.hpp"
#include "portobello/kdtree.hpp"
#include "portobello/random.hpp"
#include "portobello/scenario.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace portobello {

// ---------------------------------------------------------------------------
// Synthetic urban world: a route through a street canyon with crosswalks.

enum class RouteShape { loop, straight };

struct WorldSpec {
  double route_length = 300.0;  // m of street centerline
  int crosswalks = 15;
  std::uint64_t seed = 1;
  RouteShape shape = RouteShape::loop;
  double target_speed = 5.0;    // m/s
  double point_spacing = 0.25;  // m, surface sampling pitch of the scene
  std::string map_path = "demo_map.pbm";
};

struct SyntheticWorld {
  PointCloud map;
  std::shared_ptr<const KdTree> index;
  std::vector<PoseSample> ground_truth;  // vehicle trajectory of the sim run
};

/// Piecewise straight/arc street centerline parameterized by arc length.
class Centerline {
 public:
  struct Frame {
    Vec3 position;
    double heading;
    double curvature;
  };

  Centerline(Vec3 start, double heading, bool closed) : start_(start), heading_(heading), closed_(closed) {}

  void add(double length, double curvature) { pieces_.push_back({length, curvature}); }

  double length() const {
    double l = 0.0;
    for (const auto& p : pieces_) l += p.length;
    return l;
  }

  /// Closed lines wrap; open lines extend straight past either end.
  Frame at(double s) const {
    const double total = length();
    if (closed_) s = std::fmod(std::fmod(s, total) + total, total);
    Vec3 p = start_;
    double h = heading_;
    if (s < 0.0) return {p + s * Vec3(std::cos(h), std::sin(h), 0.0), h, 0.0};
    for (const auto& piece : pieces_) {
      const double u = std::min(s, piece.length);
      const Vec3 end = advance(p, h, piece.curvature, u);
      if (s <= piece.length) return {end, h + piece.curvature * u, piece.curvature};
      p = advance(p, h, piece.curvature, piece.length);
      h += piece.curvature * piece.length;
      s -= piece.length;
    }
    return {p + s * Vec3(std::cos(h), std::sin(h), 0.0), h, 0.0};
  }

  static Vec3 left_normal(double heading) { return {-std::sin(heading), std::cos(heading), 0.0}; }

 private:
  struct Piece {
    double length;
    double curvature;
  };

  static Vec3 advance(const Vec3& p, double h, double k, double u) {
    if (std::abs(k) < 1e-12) return p + u * Vec3(std::cos(h), std::sin(h), 0.0);
    return p + Vec3(std::sin(h + k * u) - std::sin(h), -std::cos(h + k * u) + std::cos(h), 0.0) / k;
  }

  Vec3 start_;
  double heading_;
  bool closed_;
  std::vector<Piece> pieces_;
};

/// Rounded rectangle of the given perimeter, counter-clockwise from the
/// middle of the bottom edge; height is 0.6 of width, corner radius 0.3 of height.
inline Centerline loop_centerline(double perimeter) {
  const double w = perimeter / (2.0 * (1.0 - 0.36) + 2.0 * (0.6 - 0.36) + 2.0 * std::numbers::pi * 0.18);
  const double h = 0.6 * w, r = 0.18 * w;
  Centerline c(Vec3(0.0, -h / 2.0, 0.0), 0.0, true);
  const double quarter = std::numbers::pi * r / 2.0;
  c.add(w / 2.0 - r, 0.0);
  for (double edge : {h - 2.0 * r, w - 2.0 * r, h - 2.0 * r}) {
    c.add(quarter, 1.0 / r);
    c.add(edge, 0.0);
  }
  c.add(quarter, 1.0 / r);
  c.add(w / 2.0 - r, 0.0);
  return c;
}

namespace detail {

struct SceneBuilder {
  const Centerline& line;
  double spacing;
  Rng& rng;
  PointCloud cloud;

  // Points on the inside of a tight bend fold over; drop them.
  bool folded(const Centerline::Frame& f, double lateral) const { return f.curvature * lateral >= 0.9; }

  void put(const Centerline::Frame& f, double lateral, double z, float intensity) {
    if (folded(f, lateral)) return;
    const Vec3 p = f.position + lateral * Centerline::left_normal(f.heading);
    cloud.points.push_back({Vec3(p.x(), p.y(), z), intensity});
  }

  void ground(double s0, double s1) {
    const double g = 2.0 * spacing;
    for (double s = s0; s < s1; s += g) {
      for (double lat = -12.0; lat <= 12.0; lat += g) {
        const double js = s + rng.uniform(-0.15, 0.15) * g;
        put(line.at(js), lat + rng.uniform(-0.15, 0.15) * g, 0.0, 0.1f);
      }
    }
  }

  void facades(double s0, double s1, double side) {
    double s = s0;
    double prev_setback = rng.uniform(0.0, 3.0);
    while (s < s1) {
      const double len = rng.uniform(4.0, 10.0);
      const double setback = rng.uniform(0.0, 3.0);
      const double height = rng.uniform(4.0, 10.0);
      const bool gap = rng.uniform() < 0.15;
      const double end = std::min(s + len, s1);
      if (!gap) {
        for (double u = s; u < end; u += spacing) {
          for (double z = 0.0; z <= height; z += spacing) {
            const auto f = line.at(std::min(u + rng.uniform(0.0, spacing), end));
            put(f, side * (9.0 + setback), z + rng.uniform(0.0, spacing), 0.5f);
          }
        }
        // return wall joining the previous setback
        const auto f = line.at(s);
        const double a = std::min(prev_setback, setback), b = std::max(prev_setback, setback);
        for (double d = a; d <= b; d += spacing) {
          for (double z = 0.0; z <= height; z += spacing) {
            put(f, side * (9.0 + std::min(d + rng.uniform(0.0, spacing), b)), z + rng.uniform(0.0, spacing), 0.6f);
          }
        }
      }
      prev_setback = setback;
      s = end;
    }
  }

  void poles(double s0, double s1, double side) {
    for (double s = s0 + rng.uniform(2.0, 8.0); s < s1; s += rng.uniform(6.0, 12.0)) {
      const auto f = line.at(s);
      if (folded(f, side * 6.5)) continue;
      const Vec3 c = f.position + side * 6.5 * Centerline::left_normal(f.heading);
      for (double z = 0.0; z <= 4.0; z += 0.2) {
        for (int k = 0; k < 8; ++k) {
          const double a = 2.0 * std::numbers::pi * rng.uniform();
          cloud.points.push_back({Vec3(c.x() + 0.15 * std::cos(a), c.y() + 0.15 * std::sin(a), z), 0.9f});
        }
      }
    }
  }
};

}  // namespace detail

/// Builds the scene point cloud, the scenario (route, crosswalk triggers,
/// crossing pedestrians), and the ground-truth trajectory from a sim run.
inline std::pair<SyntheticWorld, Scenario> synthesize_world(const WorldSpec& spec) {
  if (!(spec.route_length >= 40.0)) throw std::invalid_argument("synthesize_world: route_length must be >= 40 m");
  if (spec.crosswalks < 0) throw std::invalid_argument("synthesize_world: crosswalks must be >= 0");
  if (!(spec.point_spacing > 0.0)) throw std::invalid_argument("synthesize_world: point_spacing must be positive");

  const bool loop = spec.shape == RouteShape::loop;
  Centerline line = loop ? loop_centerline(spec.route_length) : Centerline(Vec3::Zero(), 0.0, false);
  if (!loop) line.add(spec.route_length, 0.0);

  Rng rng(mix_seed(spec.seed, 0x5ce9e));
  detail::SceneBuilder scene{line, spec.point_spacing, rng, {}};
  const double s0 = loop ? 0.0 : -15.0, s1 = loop ? spec.route_length : spec.route_length + 15.0;
  scene.ground(s0, s1);
  for (double side : {1.0, -1.0}) {
    scene.facades(s0, s1, side);
    scene.poles(s0, s1, side);
  }
  scene.cloud.has_intensity = true;

  Scenario sc;
  const double route_end = loop ? spec.route_length - 6.0 : spec.route_length;
  const int n = spec.crosswalks;
  std::vector<double> crossings;
  for (int k = 0; k < n; ++k) crossings.push_back(route_end * (k + 1) / (n + 1));

  std::vector<double> stations;
  for (double s = 0.0; s < route_end - 1.0; s += 2.0) stations.push_back(s);
  stations.push_back(route_end);
  std::vector<bool> is_stop(stations.size(), false);
  for (double c : crossings) {
    stations.push_back(c - 3.0);
    is_stop.push_back(true);
  }
  std::vector<std::size_t> order(stations.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return stations[a] < stations[b]; });
  double last = -1.0;
  for (std::size_t i : order) {
    if (!is_stop[i] && std::abs(stations[i] - last) < 0.5) continue;
    if (is_stop[i] && !sc.route.empty() && std::abs(stations[i] - last) < 0.5) sc.route.pop_back();
    sc.route.push_back({line.at(stations[i]).position, spec.target_speed, bool(is_stop[i])});
    last = stations[i];
  }
  // drop plain waypoints closer than 0.5 m after a stop
  for (std::size_t i = 1; i + 1 < sc.route.size();) {
    if (!sc.route[i].stop && sc.route[i - 1].stop && (sc.route[i].position - sc.route[i - 1].position).norm() < 0.5) {
      sc.route.erase(sc.route.begin() + static_cast<std::ptrdiff_t>(i));
    } else {
      ++i;
    }
  }

  for (int k = 0; k < n; ++k) {
    const std::string suffix = std::to_string(k + 1);
    const auto c = line.at(crossings[k]);
    const Vec3 normal = Centerline::left_normal(c.heading);
    const auto t = line.at(crossings[k] - 9.0);
    sc.triggers.push_back({"crosswalk_" + suffix, BoxShape{t.position, Vec3(2.5, 2.5, 3.0)}, true});
    VirtualAgent ped;
    ped.id = "pedestrian_" + suffix;
    ped.kind = AgentKind::pedestrian;
    ped.initial_pose = RigidTransform::from_yaw(c.heading - std::numbers::pi / 2.0, c.position + 7.0 * normal);
    ped.path = {{c.position - 7.0 * normal, 1.4}};
    sc.agents.push_back(ped);
    sc.bindings.push_back({"crosswalk_" + suffix, {StartAgent{ped.id}, EmitMarker{"crosswalk " + suffix}}});
  }
  sc.map_ref = {spec.map_path, map_hash(scene.cloud)};

  SyntheticWorld world;
  world.map = std::move(scene.cloud);
  world.index = std::make_shared<const KdTree>(world.map);
  world.ground_truth = run_sim(sc, WaypointFollower{}).poses;
  return {std::move(world), std::move(sc)};
}

// ---------------------------------------------------------------------------
// Sensor model

enum class SensorMode { raycast, map_sample };

struct SensorModel {
  SensorMode mode = SensorMode::map_sample;
  double max_range = 50.0;     // m
  int points_per_scan = 2000;
  double noise_sigma = 0.02;   // m, per axis
  double rate_hz = 10.0;
  std::uint64_t seed = 7;
  double sensor_height = 1.8;  // m, raycast origin above the vehicle frame
};

namespace detail {

inline PointCloud sample_scan(const KdTree& map, const PointCloud& cloud, const RigidTransform& pose,
                              const SensorModel& m, Rng& rng) {
  auto hits = map.radius_search(pose.translation(), m.max_range);
  const auto want = static_cast<std::size_t>(std::max(m.points_per_scan, 0));
  if (hits.size() > want) {
    for (std::size_t i = 0; i < want; ++i) std::swap(hits[i], hits[i + rng.index(hits.size() - i)]);
    hits.resize(want);
  }
  const RigidTransform inv = pose.inverse();
  PointCloud scan;
  scan.frame = "vehicle";
  scan.has_intensity = cloud.has_intensity;
  for (const auto& h : hits) {
    Vec3 p = inv.apply(map.point(h.index));
    p += Vec3(rng.normal(0, m.noise_sigma), rng.normal(0, m.noise_sigma), rng.normal(0, m.noise_sigma));
    scan.points.push_back({p, cloud.points[h.index].intensity});
  }
  return scan;
}

inline PointCloud raycast_scan(const KdTree& map, const PointCloud& cloud, const RigidTransform& pose,
                               const SensorModel& m, Rng& rng) {
  constexpr int kRings = 16;
  constexpr double kHit = 0.2;
  const int azimuths = std::max(1, m.points_per_scan / kRings);
  const Vec3 origin = pose.apply(Vec3(0, 0, m.sensor_height));
  const RigidTransform inv = pose.inverse();
  PointCloud scan;
  scan.frame = "vehicle";
  scan.has_intensity = cloud.has_intensity;
  for (int r = 0; r < kRings; ++r) {
    const double el = (-20.0 + 30.0 * r / (kRings - 1)) * std::numbers::pi / 180.0;
    for (int a = 0; a < azimuths; ++a) {
      const double az = 2.0 * std::numbers::pi * a / azimuths;
      const Vec3 dir = pose.rotation() * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      for (double t = 0.5; t < m.max_range;) {
        const Vec3 q = origin + t * dir;
        const auto nn = map.nearest(q);
        const double d = nn.distance();
        if (d < kHit) {
          Vec3 p = inv.apply(map.point(nn.index));
          p += Vec3(rng.normal(0, m.noise_sigma), rng.normal(0, m.noise_sigma), rng.normal(0, m.noise_sigma));
          scan.points.push_back({p, cloud.points[nn.index].intensity});
          break;
        }
        t += std::max(d - kHit / 2.0, 0.05);
      }
    }
  }
  return scan;
}

}  // namespace detail

/// Scans along a trajectory at the model rate. The count is ceil(duration)
/// times the rate; past the end of the trajectory the last pose is held.
inline ScanStream synthesize_scans(const SyntheticWorld& world, const std::vector<PoseSample>& trajectory,
                                   const SensorModel& m) {
  if (trajectory.empty()) throw std::invalid_argument("synthesize_scans: empty trajectory");
  if (!(m.rate_hz > 0.0)) throw std::invalid_argument("synthesize_scans: rate must be positive");
  const Timestamp t0 = trajectory.front().stamp;
  const double duration = seconds_between(trajectory.back().stamp, t0);
  const auto count = static_cast<std::size_t>(std::llround(std::ceil(duration) * m.rate_hz));
  ScanStream out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const Timestamp t(t0.nanos() + std::llround(static_cast<double>(k) * 1e9 / m.rate_hz));
    Rng rng(mix_seed(m.seed, k));
    const RigidTransform pose = pose_at(trajectory, t);
    out.push_back({t, m.mode == SensorMode::map_sample ? detail::sample_scan(*world.index, world.map, pose, m, rng)
                                                       : detail::raycast_scan(*world.index, world.map, pose, m, rng)});
  }
  return out;
}

inline ScanStream synthesize_scans(const SyntheticWorld& world, const SensorModel& m) {
  return synthesize_scans(world, world.ground_truth, m);
}

}  // namespace portobello
