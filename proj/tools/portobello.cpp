// portobello: map building, scenario validation, twinned runs, reports, and
// the console backend, as one binary with subcommands.

#include "common.hpp"
#include "serve.hpp"

#include "portobello/bridge.hpp"
#include "portobello/map_builder.hpp"
#include "portobello/run_log.hpp"
#include "portobello/world.hpp"

#include <CLI11.hpp>

#include <pthread.h>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace portobello;
using namespace portobello::cli;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  std::string log_level = "warn";
  std::optional<int> port;
  std::string convention = "right-z";
};

// ---------------------------------------------------------------------------

struct MapBuildArgs {
  std::string scans, out;
  double voxel = 0.2;
  double keyframe_dist = 1.0;
};

int map_build(const MapBuildArgs& a) {
  MapBuildConfig cfg;
  cfg.voxel_size = a.voxel;
  cfg.keyframe_distance = a.keyframe_dist;
  const ScanStream scans = load_scans(a.scans);
  if (scans.empty()) throw FormatError("scans file holds no scans", 0);
  std::vector<Timestamp> stamps;
  std::vector<PointCloud> clouds;
  for (const auto& s : scans) {
    stamps.push_back(s.stamp);
    clouds.push_back(s.cloud);
  }
  const PointCloudMap map = build_map(stamps, clouds, cfg);
  save_cloud(map.cloud(), a.out);

  const std::string sidecar = a.out + ".trajectory.jsonl";
  std::ostringstream traj;
  std::size_t next_kf = 0;
  for (std::size_t i = 0; i < map.scan_poses().size(); ++i) {
    const bool kf = next_kf < map.keyframes().size() && map.keyframes()[next_kf].scan_index == i;
    if (kf) ++next_kf;
    traj << trajectory_record(i, stamps[i], map.scan_poses()[i], kf).dump() << '\n';
  }
  write_file(sidecar, traj.str());
  print_json({{"map", a.out},
              {"trajectory", sidecar},
              {"points", map.size()},
              {"keyframes", map.keyframes().size()},
              {"scans", scans.size()},
              {"map_hash", map_hash(map.cloud())}});
  return kOk;
}

// ---------------------------------------------------------------------------

struct ValidateArgs {
  std::string scenario, map;
};

int scenario_validate(const ValidateArgs& a) {
  const PointCloud cloud = load_any_cloud(a.map);
  json report;
  Scenario s;
  try {
    s = load_scenario(a.scenario);
  } catch (const SchemaError& e) {
    print_json({{"ok", false}, {"issues", {issue_json("SchemaError", e.path, e.what())}}});
    return kInvalidScenario;
  } catch (const DanglingReference& e) {
    print_json({{"ok", false}, {"issues", {issue_json("DanglingReference", e.id, e.what())}}});
    return kInvalidScenario;
  }
  const ValidationReport r = validate_against_map(s, KdTree(cloud), map_hash(cloud));
  report = r.to_json();
  report["scenario_hash"] = scenario_hash(s);
  print_json(report);
  return r.has_errors() ? kInvalidScenario : kOk;
}

// ---------------------------------------------------------------------------

struct RunArgs {
  std::string scenario, map, mode, scans, init_pose, log;
  bool publish = false;
  double speed = 1.0;
  double rate_hz = 10.0;
  std::vector<std::string> pauses, dropouts, clutters;
  double yaw_span = 0.0, yaw_step = 0.1;
  double max_duration = 3600.0;
  std::size_t wait_clients = 0;
  double wait_timeout = 30.0;
};

std::vector<Disturbance> disturbances(const RunArgs& a, std::uint64_t seed) {
  std::vector<Disturbance> out;
  for (const auto& p : a.pauses) {
    auto [s, d] = parse_window(p, "--pause");
    out.push_back(PauseDisturbance{s, d});
  }
  for (const auto& p : a.dropouts) {
    auto [s, d] = parse_window(p, "--dropout");
    out.push_back(DropoutDisturbance{s, d});
  }
  for (std::size_t i = 0; i < a.clutters.size(); ++i) {
    auto [s, d] = parse_window(a.clutters[i], "--clutter");
    out.push_back(ClutterDisturbance{s, d, Vec3(3.0, 0.0, 1.0), 2.0, 500, mix_seed(seed, 100 + i)});
  }
  return out;
}

int run(const RunArgs& a, const Globals& g) {
  if (a.mode == "replay" && a.scans.empty()) throw UsageError("--mode replay needs --scans");
  if (a.wait_clients > 0 && !a.publish) throw UsageError("--wait-clients needs --publish");
  if (a.mode == "sim" && !a.scans.empty()) throw UsageError("--scans only applies to --mode replay");
  const auto ds = disturbances(a, g.seed);
  const Scenario scenario = load_scenario(a.scenario);
  const PointCloud cloud = load_any_cloud(a.map);
  if (scenario.map_ref.hash && *scenario.map_ref.hash != map_hash(cloud)) {
    spdlog::warn("map hash {} differs from the scenario's pinned {}", map_hash(cloud), *scenario.map_ref.hash);
  }

  std::unique_ptr<BridgeServer> bridge;
  if (a.publish) {
    BridgeOptions bo;
    bo.port = resolve_port(g.port);
    bo.rate_hz = a.rate_hz;
    bo.convention = parse_convention(g.convention);
    bo.map = std::make_shared<const PointCloud>(cloud);
    bridge = std::make_unique<BridgeServer>(bo);
    spdlog::info("publishing on port {}", bridge->port());
    std::cerr << "bridge listening on port " << bridge->port() << std::endl;
    if (a.wait_clients > 0 &&
        !bridge->wait_for_subscribers(a.wait_clients, std::chrono::milliseconds(std::llround(a.wait_timeout * 1000)))) {
      spdlog::warn("only {} of {} clients subscribed; starting anyway", bridge->subscriber_count(), a.wait_clients);
    }
  }
  const bool pace = a.publish;
  Pacer pacer(a.speed);
  auto observe = [&](const TickSnapshot& s) {
    if (pace) pacer.wait_for(s.stamp);
    if (bridge) bridge->publish(s);
  };

  RunLog log;
  if (a.mode == "sim") {
    SimOptions opt;
    opt.disturbances = ds;
    opt.max_duration = a.max_duration;
    opt.on_tick = observe;
    log = run_sim(scenario, WaypointFollower{}, opt);
  } else {
    const ScanStream scans = inject(ds, load_scans(a.scans));
    const RigidTransform init = a.init_pose.empty() ? route_start_pose(scenario) : parse_init_pose(a.init_pose);
    ReplayOptions opt;
    opt.disturbances = ds;
    opt.on_tick = observe;
    if (a.yaw_span > 0) opt.yaw_search = YawSearch{a.yaw_span, a.yaw_step};
    log = run_replay(scenario, scans, init, std::make_shared<const KdTree>(cloud), LocalizerConfig{}, opt);
  }
  log.header.seeds["seed"] = g.seed;
  save_run_log(log, a.log);
  if (bridge) bridge->stop();

  const double duration = log.poses.empty() ? 0.0 : seconds_between(log.poses.back().stamp, log.poses.front().stamp);
  json summary{{"mode", mode_name(log.header.mode)},
               {"log", a.log},
               {"scenario_hash", log.header.scenario_hash},
               {"triggers", log.trigger_ids()},
               {"duration_s", duration}};
  if (!log.unconverged.empty()) summary["unconverged_spans"] = log.unconverged.size();
  if (log.header.error) {
    summary["error"] = *log.header.error;
    print_json(summary);
    return kInitFailed;
  }
  print_json(summary);
  return kOk;
}

// ---------------------------------------------------------------------------

int twin_report(const std::string& a, const std::string& b) {
  const RunLog la = load_run_log(a), lb = load_run_log(b);
  const TwinningReport r = compare_runs(la, lb);
  print_json(r.to_json());
  return r.sequences_equal ? kOk : kSequencesDiffer;
}

// ---------------------------------------------------------------------------

struct DemoArgs {
  std::string out;
  double length = 300.0;
  int crosswalks = 15;
  std::string shape = "loop";
  std::string sensor = "map-sample";
  double rate = 10.0;
  double noise = 0.02;
  int points = 2000;
  bool scans = true;
};

int demo(const DemoArgs& a, const Globals& g) {
  WorldSpec spec;
  spec.route_length = a.length;
  spec.crosswalks = a.crosswalks;
  spec.seed = g.seed;
  spec.shape = a.shape == "loop" ? RouteShape::loop : RouteShape::straight;
  spec.map_path = "map.pbm";
  auto [world, scenario] = synthesize_world(spec);
  const std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);
  save_cloud(world.map, dir / "map.pbm");
  save_scenario(scenario, dir / "scenario.json");
  std::ostringstream truth;
  for (const auto& p : world.ground_truth) {
    truth << json{{"stamp", p.stamp.nanos()}, {"pose", scenario_json::to_json(p.pose)}}.dump() << '\n';
  }
  write_file(dir / "truth.jsonl", truth.str());
  json out{{"map", (dir / "map.pbm").string()},
           {"scenario", (dir / "scenario.json").string()},
           {"truth", (dir / "truth.jsonl").string()},
           {"map_points", world.map.size()},
           {"map_hash", map_hash(world.map)},
           {"triggers", scenario.triggers.size()},
           {"run_duration_s", seconds_between(world.ground_truth.back().stamp, world.ground_truth.front().stamp)}};
  if (a.scans) {
    SensorModel m;
    m.mode = a.sensor == "raycast" ? SensorMode::raycast : SensorMode::map_sample;
    m.rate_hz = a.rate;
    m.noise_sigma = a.noise;
    m.points_per_scan = a.points;
    m.seed = mix_seed(g.seed, 1);
    const ScanStream scans = synthesize_scans(world, m);
    save_scans(scans, dir / "scans.pbs");
    out["scans"] = (dir / "scans.pbs").string();
    out["scan_count"] = scans.size();
  }
  print_json(out);
  return kOk;
}

// ---------------------------------------------------------------------------

int serve(const ServeConfig& cfg) {
  // Block the stop signals in every thread; one watcher thread takes them.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  ServeApp app(cfg);
  std::atomic<bool> done{false};
  std::thread watcher([&] {
    int sig = 0;
    sigwait(&stop_signals, &sig);
    if (!done) spdlog::info("serve: signal {}, shutting down", sig);
    app.stop();
  });
  std::cerr << "serving http://" << cfg.host << ":" << app.http_port() << " (bridge port " << app.bridge_port() << ")"
            << std::endl;
  app.run();
  done = true;
  pthread_kill(watcher.native_handle(), SIGTERM);
  watcher.join();
  app.shutdown();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"portobello: map-anchored scenario staging with twinned sim and replay runs"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random stream")->capture_default_str();
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error, off")->capture_default_str();
  app.add_option("--port", g.port, "Bridge TCP port (overrides PORTOBELLO_PORT)");
  app.add_option("--convention", g.convention, "Bridge coordinate convention: right-z, left-y, right-y, left-z")
      ->capture_default_str()
      ->check(CLI::IsMember({"right-z", "left-y", "right-y", "left-z"}));

  MapBuildArgs mb;
  auto* cmd_map = app.add_subcommand("map-build", "Build a point-cloud map from a scans file");
  cmd_map->add_option("--scans", mb.scans, "Scans file")->required();
  cmd_map->add_option("--out", mb.out, "Output map file")->required();
  cmd_map->add_option("--voxel", mb.voxel, "Voxel size, m")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_map->add_option("--keyframe-dist", mb.keyframe_dist, "Keyframe spacing, m")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  ValidateArgs va;
  auto* cmd_val = app.add_subcommand("scenario-validate", "Check a scenario against a map");
  cmd_val->add_option("--scenario", va.scenario)->required();
  cmd_val->add_option("--map", va.map)->required();

  RunArgs ra;
  auto* cmd_run = app.add_subcommand("run", "Execute a scenario in sim or replay mode");
  cmd_run->add_option("--scenario", ra.scenario)->required();
  cmd_run->add_option("--map", ra.map)->required();
  cmd_run->add_option("--mode", ra.mode)->required()->check(CLI::IsMember({"sim", "replay"}));
  cmd_run->add_option("--scans", ra.scans, "Scans file (replay)");
  cmd_run->add_option("--init-pose", ra.init_pose, "\"x y z yaw\" (replay; default: route start)");
  cmd_run->add_option("--log", ra.log, "Output run log")->required();
  cmd_run->add_flag("--publish", ra.publish, "Serve the TCP bridge and pace the run to wall time");
  cmd_run->add_option("--speed", ra.speed, "Wall-time pacing factor with --publish")->check(CLI::PositiveNumber);
  cmd_run->add_option("--rate", ra.rate_hz, "Bridge publish rate, Hz")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_run->add_option("--pause", ra.pauses, "Pause disturbance START:DURATION (s)");
  cmd_run->add_option("--dropout", ra.dropouts, "Scan dropout START:DURATION (s)");
  cmd_run->add_option("--clutter", ra.clutters, "Clutter burst START:DURATION (s)");
  cmd_run->add_option("--yaw-search", ra.yaw_span, "Initial yaw search half-span, rad (replay)");
  cmd_run->add_option("--yaw-step", ra.yaw_step, "Initial yaw search step, rad")->check(CLI::PositiveNumber);
  cmd_run->add_option("--max-duration", ra.max_duration, "Sim time limit, s")->check(CLI::PositiveNumber);
  cmd_run->add_option("--wait-clients", ra.wait_clients, "With --publish, wait for N subscribers before starting");
  cmd_run->add_option("--wait-timeout", ra.wait_timeout, "Longest wait for --wait-clients, s")->check(CLI::PositiveNumber);

  std::string twin_a, twin_b;
  auto* cmd_twin = app.add_subcommand("twin-report", "Compare two run logs");
  cmd_twin->add_option("--a", twin_a)->required();
  cmd_twin->add_option("--b", twin_b)->required();

  ServeConfig sc;
  auto* cmd_serve = app.add_subcommand("serve", "HTTP backend for the console plus the TCP bridge");
  cmd_serve->add_option("--map", sc.map_path)->required();
  cmd_serve->add_option("--scenario", sc.scenario_path)->required();
  cmd_serve->add_option("--http-port", sc.http_port)->capture_default_str()->check(CLI::Range(0, 65535));
  cmd_serve->add_option("--host", sc.host)->capture_default_str();

  DemoArgs da;
  auto* cmd_demo = app.add_subcommand("demo", "Generate the synthetic demo world, scenario, and scans");
  cmd_demo->add_option("--out", da.out, "Output directory")->required();
  cmd_demo->add_option("--length", da.length, "Route length, m")->capture_default_str()->check(CLI::Range(40.0, 1e5));
  cmd_demo->add_option("--crosswalks", da.crosswalks)->capture_default_str()->check(CLI::Range(0, 1000));
  cmd_demo->add_option("--shape", da.shape)->capture_default_str()->check(CLI::IsMember({"loop", "straight"}));
  cmd_demo->add_option("--sensor", da.sensor)->capture_default_str()->check(CLI::IsMember({"map-sample", "raycast"}));
  cmd_demo->add_option("--rate", da.rate, "Scan rate, Hz")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_demo->add_option("--noise", da.noise, "Point noise sigma, m")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd_demo->add_option("--points", da.points, "Points per scan")->capture_default_str()->check(CLI::PositiveNumber);
  cmd_demo->add_flag("!--no-scans", da.scans, "Skip scan synthesis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    setup_logging(g.log_level);
    if (*cmd_map) return map_build(mb);
    if (*cmd_val) return scenario_validate(va);
    if (*cmd_run) return run(ra, g);
    if (*cmd_twin) return twin_report(twin_a, twin_b);
    if (*cmd_serve) {
      sc.bridge_port = resolve_port(g.port);
      sc.convention = parse_convention(g.convention);
      return serve(sc);
    }
    if (*cmd_demo) return demo(da, g);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << std::endl;
    return kBadInput;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << std::endl;
    return kBadInput;
  } catch (const SchemaError& e) {
    std::cerr << "scenario error: " << e.what() << std::endl;
    return kBadInput;
  } catch (const DanglingReference& e) {
    std::cerr << "scenario error: " << e.what() << std::endl;
    return kBadInput;
  } catch (const RegistrationDiverged& e) {
    std::cerr << "map-build: " << e.what() << std::endl;
    return kDiverged;
  } catch (const RouteUnreachable& e) {
    std::cerr << "run: " << e.what() << std::endl;
    return kRouteUnreachable;
  } catch (const BindError& e) {
    std::cerr << "bind error: " << e.what() << std::endl;
    return kBindFailed;
  } catch (const ScenarioMismatch& e) {
    std::cerr << "twin-report: " << e.what() << std::endl;
    return kScenarioMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return kUsage;
}
