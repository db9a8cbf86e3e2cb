// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <regex>
#include <thread>

#include "oracles.hpp"
#include "portobello/bridge.hpp"
#include "portobello/cloud_io.hpp"
#include "portobello/harness.hpp"
#include "portobello/icp.hpp"
#include "portobello/kdtree.hpp"
#include "portobello/localization.hpp"
#include "portobello/map_builder.hpp"
#include "portobello/run_log.hpp"
#include "portobello/scenario.hpp"
#include "portobello/world.hpp"
#include "process.hpp"
#include "wire_fuzz.hpp"

using namespace portobello;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(const std::string& name, const std::function<Outcome()>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s  %-28s %s  [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double elapsed(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

using proc::cli;
using proc::spawn;
using proc::wait_exit;

// --- shared fixtures -------------------------------------------------------

RigidTransform random_perturbation(Rng& rng, double max_angle, double max_shift) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  Vec3 dir(rng.normal(), rng.normal(), rng.normal());
  dir.normalize();
  return RigidTransform::from_axis_angle(axis * rng.uniform(0, max_angle), dir * rng.uniform(0, max_shift));
}

// --- criteria --------------------------------------------------------------

Outcome localization_accuracy() {
  WorldSpec spec;
  spec.route_length = 200.0;
  spec.crosswalks = 5;
  const SyntheticWorld world = synthesize_world(spec).first;
  SensorModel m;
  m.mode = SensorMode::raycast;
  m.rate_hz = 10.0;
  m.noise_sigma = 0.02;
  const ScanStream scans = synthesize_scans(world, m);

  const auto t0 = Clock::now();
  Localizer loc(world.index, LocalizerConfig{});
  loc.initialize(scans.front().cloud, pose_at(world.ground_truth, scans.front().stamp), scans.front().stamp);
  std::vector<PoseEstimate> est;
  for (std::size_t i = 1; i < scans.size(); ++i) est.push_back(loc.update(scans[i].cloud, scans[i].stamp));
  const double runtime = elapsed(t0);

  const auto errs = trajectory_errors(est, world.ground_truth);
  const double r = rmse(errs);
  const double mx = *std::max_element(errs.begin(), errs.end());
  return {r < 0.2 && mx < 0.4 && runtime < 60.0,
          fmt("200 m loop, %zu raycast scans @10 Hz, 2 cm noise: RMSE %.4f m (<0.2), max %.4f m (<0.4), %.1f s (<60)",
              scans.size(), r, mx, runtime)};
}

Outcome localization_rate(const fs::path& demo) {
  const PointCloud map = load_cloud(demo / "map.pbm");
  const ScanStream scans = load_scans(demo / "scans.pbs");
  const std::vector<PoseSample> truth = [&] {
    std::vector<PoseSample> t;
    std::ifstream in(demo / "truth.jsonl");
    for (std::string line; std::getline(in, line);) {
      const auto j = nlohmann::json::parse(line);
      t.push_back({Timestamp(j.at("stamp").get<std::int64_t>()), scenario_json::pose(j.at("pose"), "pose")});
    }
    return t;
  }();
  std::size_t pts = 0;
  for (const auto& s : scans) pts += s.cloud.size();

  Localizer loc(std::make_shared<const KdTree>(map), LocalizerConfig{});
  loc.initialize(scans.front().cloud, pose_at(truth, scans.front().stamp), scans.front().stamp);
  double total = 0.0, worst = 0.0;
  for (std::size_t i = 1; i < scans.size(); ++i) {
    const auto t0 = Clock::now();
    loc.update(scans[i].cloud, scans[i].stamp);
    const double dt = elapsed(t0);
    total += dt;
    worst = std::max(worst, dt);
  }
  const double mean_ms = 1e3 * total / static_cast<double>(scans.size() - 1);
  return {mean_ms < 100.0 && map.size() >= 100'000,
          fmt("map %zu pts, %zu scans x %.0f pts: mean update %.2f ms (<100), worst %.2f ms", map.size(), scans.size(),
              static_cast<double>(pts) / static_cast<double>(scans.size()), mean_ms, 1e3 * worst)};
}

Outcome icp_oracle() {
  const SyntheticWorld world = synthesize_world(WorldSpec{}).first;
  const RigidTransform truth = world.ground_truth[world.ground_truth.size() / 3].pose;
  SensorModel m;
  m.noise_sigma = 0.0;
  const PointCloud scan =
      synthesize_scans(world, {{Timestamp(0), truth}, {Timestamp(1'000'000'000), truth}}, m).front().cloud;
  // tracking defaults (1 m gate, 30 iterations) are sized for inter-scan motion
  IcpConfig cfg;
  cfg.max_correspondence_distance = 2.0;
  cfg.max_iterations = 100;
  Rng rng(99);
  int ok = 0;
  double worst_t = 0.0, worst_r = 0.0;
  for (int i = 0; i < 100; ++i) {
    const RigidTransform guess = truth * random_perturbation(rng, 10.0 * std::numbers::pi / 180.0, 1.0);
    const IcpResult r = icp_align(scan, *world.index, guess, cfg);
    const double et = translation_distance(r.transform, truth), er = rotation_distance(r.transform, truth);
    if (et < 1e-3 && er < 1e-3) ++ok;
    worst_t = std::max(worst_t, et);
    worst_r = std::max(worst_r, er);
  }
  return {ok >= 99, fmt("%d/100 recovered within 1e-3 m / 1e-3 rad (>=99), scan %zu pts, gate 2.0 m, 100 iterations; worst %.2e m %.2e rad",
                        ok, scan.size(), worst_t, worst_r)};
}

Outcome kdtree_exactness() {
  Rng rng(4242);
  std::vector<Vec3> pts;
  for (int i = 0; i < 10'000; ++i) pts.emplace_back(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50));
  const KdTree tree(pts);
  int mismatches = 0;
  std::size_t radius_hits = 0;
  for (int q = 0; q < 100; ++q) {
    const Vec3 query(rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(-60, 60));
    const auto nb = tree.nearest(query);
    const auto bf = oracle::brute_nearest(pts, query);
    if (nb.index != bf.index || nb.squared_distance != bf.d2) ++mismatches;
    const double r = rng.uniform(0, 10);
    const auto hits = tree.radius_search(query, r);
    const auto bhits = oracle::brute_radius(pts, query, r);
    radius_hits += bhits.size();
    if (hits.size() != bhits.size()) {
      ++mismatches;
      continue;
    }
    for (std::size_t k = 0; k < hits.size(); ++k) {
      if (hits[k].index != bhits[k].index || hits[k].squared_distance != bhits[k].d2) {
        ++mismatches;
        break;
      }
    }
  }
  return {mismatches == 0,
          fmt("10000 pts x 100 queries, nearest + radius (%zu radius hits): %d mismatches", radius_hits, mismatches)};
}

Outcome twinning(const fs::path& dir, const fs::path& demo) {
  const std::string scen = (demo / "scenario.json").string(), map = (demo / "map.pbm").string();
  const auto sim = cli(dir, {"run", "--scenario", scen, "--map", map, "--mode", "sim", "--log", (dir / "sim.jsonl").string()});
  if (sim.code != 0) return {false, "sim run exited " + std::to_string(sim.code) + ": " + sim.err};
  const auto rep = cli(dir, {"run", "--scenario", scen, "--map", map, "--mode", "replay", "--scans",
                             (demo / "scans.pbs").string(), "--log", (dir / "replay.jsonl").string()});
  if (rep.code != 0) return {false, "replay run exited " + std::to_string(rep.code) + ": " + rep.err};
  const auto tw = cli(dir, {"twin-report", "--a", (dir / "sim.jsonl").string(), "--b", (dir / "replay.jsonl").string()});
  const auto j = nlohmann::json::parse(tw.out);
  const auto n = j.at("a_sequence").size();
  const double d = j.at("max_position_distance_m").get<double>();
  const bool equal = j.at("sequences_equal").get<bool>();
  return {tw.code == 0 && equal && n == 15 && d < 0.5,
          fmt("sim vs replay: %zu triggers, sequences %s, max firing distance %.4f m (<0.5), twin-report exit %d", n,
              equal ? "identical" : "DIFFER", d, tw.code)};
}

Outcome pause_invariance(const fs::path& demo) {
  const Scenario s = load_scenario(demo / "scenario.json");
  const RunLog base = run_sim(s, WaypointFollower{}, SimOptions{});
  SimOptions shifted;
  shifted.disturbances = {PauseDisturbance{0.0, 5.0}};
  const RunLog late = run_sim(s, WaypointFollower{}, shifted);
  const TwinningReport r = compare_runs(base, late);
  double min_dt = 1e9, max_dt = -1e9;
  for (const auto& t : r.triggers) {
    min_dt = std::min(min_dt, t.time_offset);
    max_dt = std::max(max_dt, t.time_offset);
  }
  return {r.sequences_equal && r.triggers.size() == s.triggers.size() && r.max_position_distance < 0.05,
          fmt("+5 s start shift: %zu triggers, sequence %s, max position change %.2e m (<0.05), time offsets %.2f..%.2f s",
              r.triggers.size(), r.sequences_equal ? "identical" : "DIFFERS", r.max_position_distance, min_dt, max_dt)};
}

Outcome render_cap() {
  // Placements on a 2^-40 m grid so the oracle is exact integer arithmetic.
  constexpr double kGrid = 0x1p-40;
  using I = __int128;
  Rng rng(45);
  auto grid = [&](double lo, double hi) { return static_cast<std::int64_t>(std::floor(rng.uniform(lo, hi) / kGrid)); };
  int mismatches = 0, boundary = 0, visible = 0, hypot_wrong = 0;
  for (int i = 0; i < 10'000; ++i) {
    const std::int64_t vx = grid(-64, 64), vy = grid(-64, 64);
    std::int64_t R = i == 0 ? std::int64_t(45) << 40 : grid(10, 80);
    std::int64_t dx, dy;
    if (i % 2 == 0) {
      // on or within a few grid steps of the boundary, via a Pythagorean triple
      const std::int64_t mm = 2 + static_cast<std::int64_t>(rng.index(200));
      const std::int64_t nn = 1 + static_cast<std::int64_t>(rng.index(static_cast<std::size_t>(mm - 1)));
      const std::int64_t a = mm * mm - nn * nn, b = 2 * mm * nn, c = mm * mm + nn * nn;
      const std::int64_t k = std::max<std::int64_t>(1, R / c);
      R = k * c;
      dx = k * a;
      dy = k * b;
      if (rng.uniform() < 0.5) std::swap(dx, dy);
      if (rng.uniform() < 0.5) dx = -dx;
      if (rng.uniform() < 0.5) dy = -dy;
      if (i % 4 == 2) {
        dx += static_cast<std::int64_t>(rng.index(7)) - 3;
        dy += static_cast<std::int64_t>(rng.index(7)) - 3;
      }
    } else {
      const double rr = static_cast<double>(R) * kGrid;
      dx = grid(-2 * rr, 2 * rr);
      dy = grid(-2 * rr, 2 * rr);
    }
    const bool active = rng.uniform() < 0.9;
    const bool expect = active && (I(dx) * dx + I(dy) * dy <= I(R) * R);
    if (I(dx) * dx + I(dy) * dy == I(R) * R) ++boundary;

    const double r = static_cast<double>(R) * kGrid;
    const Vec3 vehicle(static_cast<double>(vx) * kGrid, static_cast<double>(vy) * kGrid, rng.uniform(-2, 2));
    AgentRuntime agent;
    agent.id = "a";
    agent.active = active;
    agent.pose = RigidTransform::from_translation(
        Vec3(static_cast<double>(vx + dx) * kGrid, static_cast<double>(vy + dy) * kGrid, rng.uniform(-5, 5)));
    const bool got = visibility_filter(RigidTransform::from_yaw(rng.uniform(-3, 3), vehicle), {agent}, r).contains("a");
    if (got != expect) ++mismatches;
    if (expect) ++visible;
    const bool naive = active && horizontal_distance(agent.pose.translation(), vehicle) <= r;
    if (naive != expect) ++hypot_wrong;
  }
  return {mismatches == 0, fmt("10000 placements (%d exactly on the cap, %d visible): %d mismatches vs exact integer "
                               "oracle (plain hypot() would miss %d)",
                               boundary, visible, mismatches, hypot_wrong)};
}

Outcome wire_codec() {
  Rng rng(100'000);
  int bad = 0;
  for (int i = 0; i < 100'000; ++i) {
    const wire::Message m = fuzz::random_message(rng);
    if (wire::decode(wire::encode(m)) != m) ++bad;
  }
  int golden_bad = 0;
  const auto golden = fuzz::golden_messages();
  for (const auto& [name, msg] : golden) {
    const std::string bytes = fuzz::read_golden(name);
    if (bytes.empty() || wire::encode(msg) != bytes || wire::decode(bytes) != msg) ++golden_bad;
  }
  return {bad == 0 && golden_bad == 0 && golden.size() == 7,
          fmt("100000 fuzz round trips: %d mismatches; %zu golden vectors: %d mismatches", bad, golden.size(), golden_bad)};
}

Outcome wire_publish(const fs::path& dir, const fs::path& demo) {
  const fs::path err = dir / "publish.err", log = dir / "publish.jsonl";
  const pid_t pid = spawn({PORTOBELLO_CLI, "--port", "0", "--log-level", "info", "run", "--scenario",
                           (demo / "scenario.json").string(), "--map", (demo / "map.pbm").string(), "--mode", "sim",
                           "--publish", "--wait-clients", "2", "--max-duration", "60", "--log", log.string()},
                          dir / "publish.out", err);
  int port = 0;
  const std::regex re("bridge listening on port ([0-9]+)");
  for (int i = 0; i < 3000 && port == 0; ++i) {
    std::smatch mt;
    const std::string text = proc::peek(err);
    if (std::regex_search(text, mt, re)) port = std::stoi(mt[1]);
    else std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  if (port == 0) {
    ::kill(pid, SIGTERM);
    wait_exit(pid);
    return {false, "publisher never reported its port"};
  }

  struct Tally {
    int tf = 0;
    std::vector<std::string> triggers;
  };
  Tally tally[2];
  auto listen = [&](Tally& t) {
    BridgeClient c("127.0.0.1", static_cast<std::uint16_t>(port));
    c.send(wire::Subscribe{1, {"tf", "triggers"}});
    const auto deadline = Clock::now() + std::chrono::seconds(120);
    while (!c.closed() && Clock::now() < deadline) {
      const auto m = c.receive(std::chrono::milliseconds(200));
      if (!m) continue;
      if (std::holds_alternative<wire::TransformUpdate>(*m)) ++t.tf;
      if (const auto* f = std::get_if<wire::TriggerFired>(&*m)) t.triggers.push_back(f->trigger_id);
    }
  };
  const auto t0 = Clock::now();
  std::thread a(listen, std::ref(tally[0])), b(listen, std::ref(tally[1]));
  a.join();
  b.join();
  const double wall = elapsed(t0);
  const int code = wait_exit(pid);
  if (code != 0) return {false, "publisher exited " + std::to_string(code)};
  const auto fired = load_run_log(log).trigger_ids();
  const bool ok = !fired.empty() && tally[0].tf >= 590 && tally[1].tf >= 590 && tally[0].triggers == fired &&
                  tally[1].triggers == fired;
  return {ok, fmt("60 s sim publish (%.1f s wall), 2 clients: TransformUpdates %d / %d (>=590), TriggerFired %zu/%zu "
                  "and %zu/%zu in order",
                  wall, tally[0].tf, tally[1].tf, tally[0].triggers.size(), fired.size(), tally[1].triggers.size(),
                  fired.size())};
}

Outcome map_pipeline() {
  WorldSpec spec;
  spec.shape = RouteShape::straight;
  spec.route_length = 50.0;
  spec.crosswalks = 0;
  const SyntheticWorld world = synthesize_world(spec).first;
  SensorModel m;
  m.rate_hz = 10.0;  // one scan per 0.5 m at cruise speed
  const ScanStream scans = synthesize_scans(world, m);
  Rng rng(3);
  std::vector<OdometryScan> odo;
  RigidTransform prev = pose_at(world.ground_truth, scans.front().stamp);
  for (const auto& s : scans) {
    const RigidTransform pose = pose_at(world.ground_truth, s.stamp);
    const RigidTransform noise =
        RigidTransform::from_yaw(rng.normal(0, 0.0025), Vec3(rng.normal(0, 0.05), rng.normal(0, 0.05), 0));
    odo.push_back({s.cloud, prev.inverse() * pose * noise});
    prev = pose;
  }
  const PointCloudMap a = build_map(odo, MapBuildConfig{});
  const PointCloudMap b = build_map(odo, MapBuildConfig{});
  const RigidTransform start = pose_at(world.ground_truth, scans.front().stamp);
  const RigidTransform end = pose_at(world.ground_truth, scans.back().stamp);
  const double err = translation_distance(a.scan_poses().back(), start.inverse() * end);
  const bool same = encode_map(a.cloud()) == encode_map(b.cloud()) && a.scan_poses() == b.scan_poses();
  return {err < 0.1 && same, fmt("50 m corridor, %zu scans, 5 cm odometry noise: endpoint error %.4f m (<0.1), rebuild %s",
                                 scans.size(), err, same ? "byte-identical" : "DIFFERS")};
}

Outcome file_formats(const fs::path& dir, const fs::path& demo) {
  int failures_here = 0;
  std::string notes;
  auto check = [&](bool ok, const char* what) {
    if (!ok) {
      ++failures_here;
      notes += std::string(" ") + what;
    }
  };
  const std::string map_bytes = read_file(demo / "map.pbm");
  const PointCloud map = decode_map(map_bytes);
  check(encode_map(map) == map_bytes, "map-bytes");
  save_cloud(map, dir / "copy.pbm");
  check(load_cloud(dir / "copy.pbm") == map, "map-reload");

  const std::string scan_bytes = read_file(demo / "scans.pbs");
  const ScanStream scans = decode_scans(scan_bytes);
  check(encode_scans(scans) == scan_bytes, "scans-bytes");
  save_scans(scans, dir / "copy.pbs");
  check(load_scans(dir / "copy.pbs") == scans, "scans-reload");

  const std::string text = read_file(demo / "scenario.json");
  const Scenario s = parse_scenario(text);
  check(serialize_scenario(s) == text, "scenario-text");
  check(parse_scenario(serialize_scenario(s)) == s, "scenario-value");

  int rejected = 0;
  auto j = nlohmann::json::parse(text);
  std::vector<nlohmann::json> bad;
  bad.push_back(j);
  bad.back()["colour"] = "red";
  bad.push_back(j);
  bad.back()["triggers"][0]["radius_typo"] = 1;
  bad.push_back(j);
  bad.back()["agents"][0]["path"][0]["spd"] = 1;
  bad.push_back(j);
  bad.back()["map_ref"]["checksum"] = "x";
  for (const auto& b : bad) {
    try {
      parse_scenario(b.dump());
    } catch (const SchemaError&) {
      ++rejected;
    }
  }
  check(rejected == static_cast<int>(bad.size()), "strict-schema");
  return {failures_here == 0,
          fmt("map (%zu pts) and %zu scans round-trip bit-exactly; scenario parse/serialize identity; %d/%zu unknown-key "
              "documents rejected%s",
              map.size(), scans.size(), rejected, bad.size(), notes.empty() ? "" : (";" + notes).c_str())};
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / ("portobello_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const fs::path demo = dir / "demo";
  const auto gen = cli(dir, {"demo", "--out", demo.string()});
  if (gen.code != 0) {
    std::printf("FAIL  demo world generation exited %d: %s\n", gen.code, gen.err.c_str());
    return 1;
  }

  criterion("localization-accuracy", localization_accuracy);
  criterion("localization-rate", [&] { return localization_rate(demo); });
  criterion("icp-oracle", icp_oracle);
  criterion("kdtree-exactness", kdtree_exactness);
  criterion("twinning", [&] { return twinning(dir, demo); });
  criterion("trigger-determinism", [&] { return pause_invariance(demo); });
  criterion("render-cap", render_cap);
  criterion("wire-codec", wire_codec);
  criterion("wire-publish", [&] { return wire_publish(dir, demo); });
  criterion("map-pipeline", map_pipeline);
  criterion("file-formats", [&] { return file_formats(dir, demo); });

  std::error_code ec;
  fs::remove_all(dir, ec);
  std::printf("%s: %d criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}
