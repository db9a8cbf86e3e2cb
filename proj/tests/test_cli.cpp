#include <gtest/gtest.h>
#include <signal.h>

#include <chrono>
#include <regex>
#include <thread>

#include "portobello/bridge.hpp"
#include "portobello/harness.hpp"
#include "portobello/run_log.hpp"
#include "portobello/scenario.hpp"
#include "oracles.hpp"
#include "process.hpp"

// after Eigen: <resolv.h> defines a `_res` macro
#include <httplib.h>

using namespace portobello;
using nlohmann::json;
namespace fs = std::filesystem;
using namespace std::chrono_literals;

namespace {

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(fs::temp_directory_path() / ("portobello_cli_" + std::to_string(::getpid())));
    fs::create_directories(*dir_);
    const auto r = proc::cli(*dir_, {"demo", "--out", (*dir_ / "demo").string(), "--length", "120", "--crosswalks", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    std::error_code ec;
    fs::remove_all(*dir_, ec);
    delete dir_;
  }

  static fs::path path(const std::string& name) { return *dir_ / name; }
  static std::string demo(const std::string& name) { return (*dir_ / "demo" / name).string(); }
  static proc::Result run(std::vector<std::string> args) { return proc::cli(*dir_, std::move(args)); }

  static std::string edited_scenario(const std::string& name, const std::function<void(json&)>& edit) {
    json j = json::parse(read_file(demo("scenario.json")));
    edit(j);
    const std::string p = path(name).string();
    write_file(p, j.dump(2));
    return p;
  }

  static fs::path* dir_;
};

fs::path* Cli::dir_ = nullptr;

TEST_F(Cli, UsageErrorsExit64) {
  EXPECT_EQ(run({}).code, 64);
  EXPECT_EQ(run({"frobnicate"}).code, 64);
  EXPECT_EQ(run({"run", "--scenario", demo("scenario.json"), "--map", demo("map.pbm"), "--mode", "replay", "--log",
                 path("x.jsonl").string()})
                .code,
            64);
  EXPECT_EQ(run({"run", "--scenario", demo("scenario.json"), "--map", demo("map.pbm"), "--mode", "sim", "--pause",
                 "soon", "--log", path("x.jsonl").string()})
                .code,
            64);
  EXPECT_EQ(run({"--log-level", "chatty", "twin-report", "--a", "x", "--b", "y"}).code, 64);
}

TEST_F(Cli, UnreadableInputsExit2) {
  EXPECT_EQ(run({"run", "--scenario", demo("scenario.json"), "--map", path("missing.pbm").string(), "--mode", "sim",
                 "--log", path("x.jsonl").string()})
                .code,
            2);
  write_file(path("junk.pbs"), "not a scans file");
  const auto r = run({"map-build", "--scans", path("junk.pbs").string(), "--out", path("junk.pbm").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("format error"), std::string::npos);
}

TEST_F(Cli, ScenarioValidate) {
  auto ok = run({"scenario-validate", "--scenario", demo("scenario.json"), "--map", demo("map.pbm")});
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_TRUE(json::parse(ok.out).at("ok").get<bool>());

  const auto unknown = edited_scenario("unknown_key.json", [](json& j) { j["colour"] = "red"; });
  auto bad = run({"scenario-validate", "--scenario", unknown, "--map", demo("map.pbm")});
  EXPECT_EQ(bad.code, 4);
  EXPECT_EQ(json::parse(bad.out).at("issues").at(0).at("code"), "SchemaError");

  const auto off = edited_scenario("off_map.json", [](json& j) {
    j["triggers"][0]["shape"]["center"] = json::array({1000.0, 1000.0, 0.0});
  });
  auto far = run({"scenario-validate", "--scenario", off, "--map", demo("map.pbm")});
  EXPECT_EQ(far.code, 4);
  const auto issues = json::parse(far.out).at("issues");
  ASSERT_FALSE(issues.empty());
  EXPECT_EQ(issues.at(0).at("code"), "OutOfMap");
  EXPECT_EQ(issues.at(0).at("entity_id"), "crosswalk_1");
}

TEST_F(Cli, ValidateMinimalAndDanglingScenarios) {
  write_file(path("minimal.json"), R"({"portobello_scenario": 1, "map_ref": {"path": "map.pbm"}})");
  const auto ok = run({"scenario-validate", "--scenario", path("minimal.json").string(), "--map", demo("map.pbm")});
  EXPECT_EQ(ok.code, 0) << ok.out;

  const auto dangling = edited_scenario("dangling.json", [](json& j) {
    j["bindings"][0]["actions"][0]["agent_id"] = "nobody";
  });
  const auto bad = run({"scenario-validate", "--scenario", dangling, "--map", demo("map.pbm")});
  EXPECT_EQ(bad.code, 4);
  const auto issue = json::parse(bad.out).at("issues").at(0);
  EXPECT_EQ(issue.at("code"), "DanglingReference");
  EXPECT_EQ(issue.at("entity_id"), "nobody");
}

TEST_F(Cli, CorruptScansNameTheOffset) {
  std::string bytes = read_file(demo("scans.pbs"));
  bytes.resize(bytes.size() - 7);
  write_file(path("cut.pbs"), bytes);
  const auto r = run({"map-build", "--scans", path("cut.pbs").string(), "--out", path("cut.pbm").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("byte offset"), std::string::npos) << r.err;
}

TEST_F(Cli, TwinReportSelfCompare) {
  ASSERT_EQ(run({"run", "--scenario", demo("scenario.json"), "--map", demo("map.pbm"), "--mode", "sim", "--log",
                 path("self.jsonl").string()})
                .code,
            0);
  const auto r = run({"twin-report", "--a", path("self.jsonl").string(), "--b", path("self.jsonl").string()});
  EXPECT_EQ(r.code, 0);
  const auto j = json::parse(r.out);
  EXPECT_EQ(j.at("max_position_distance_m"), 0.0);
  EXPECT_EQ(j.at("max_abs_time_offset_s"), 0.0);
}

TEST_F(Cli, SimReplayTwinReport) {
  const auto sim = run({"run", "--scenario", demo("scenario.json"), "--map", demo("map.pbm"), "--mode", "sim", "--log",
                        path("sim.jsonl").string()});
  ASSERT_EQ(sim.code, 0) << sim.err;
  const auto rep = run({"run", "--scenario", demo("scenario.json"), "--map", demo("map.pbm"), "--mode", "replay",
                        "--scans", demo("scans.pbs"), "--log", path("replay.jsonl").string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(json::parse(rep.out).at("triggers").size(), 3u);

  const auto twin = run({"twin-report", "--a", path("sim.jsonl").string(), "--b", path("replay.jsonl").string()});
  EXPECT_EQ(twin.code, 0) << twin.out;
  const auto j = json::parse(twin.out);
  EXPECT_TRUE(j.at("sequences_equal").get<bool>());
  EXPECT_LT(j.at("max_position_distance_m").get<double>(), 0.5);
}

TEST_F(Cli, TwinReportOnDifferentScenariosExits9) {
  const auto other = edited_scenario("other.json", [](json& j) { j["render_distance"] = 30.0; });
  ASSERT_EQ(run({"run", "--scenario", demo("scenario.json"), "--map", demo("map.pbm"), "--mode", "sim", "--log",
                 path("a9.jsonl").string()})
                .code,
            0);
  ASSERT_EQ(run({"run", "--scenario", other, "--map", demo("map.pbm"), "--mode", "sim", "--log",
                 path("b9.jsonl").string()})
                .code,
            0);
  EXPECT_EQ(run({"twin-report", "--a", path("a9.jsonl").string(), "--b", path("b9.jsonl").string()}).code, 9);
}

TEST_F(Cli, FailedInitializationExits5AndDiffers) {
  const auto bad = run({"run", "--scenario", demo("scenario.json"), "--map", demo("map.pbm"), "--mode", "replay",
                        "--scans", demo("scans.pbs"), "--init-pose", "200 200 0 1.0", "--log",
                        path("lost.jsonl").string()});
  EXPECT_EQ(bad.code, 5);
  const RunLog log = load_run_log(path("lost.jsonl"));
  ASSERT_TRUE(log.header.error.has_value());
  EXPECT_EQ(log.header.error->rfind("InitializationFailed", 0), 0u);

  ASSERT_EQ(run({"run", "--scenario", demo("scenario.json"), "--map", demo("map.pbm"), "--mode", "sim", "--log",
                 path("a5.jsonl").string()})
                .code,
            0);
  EXPECT_EQ(run({"twin-report", "--a", path("a5.jsonl").string(), "--b", path("lost.jsonl").string()}).code, 8);
}

TEST_F(Cli, MapBuildFromRaycastScans) {
  const auto gen = run({"demo", "--out", path("corridor").string(), "--shape", "straight", "--length", "40",
                        "--crosswalks", "0", "--sensor", "raycast"});
  ASSERT_EQ(gen.code, 0) << gen.err;
  const auto r = run({"map-build", "--scans", (path("corridor") / "scans.pbs").string(), "--out",
                      path("built.pbm").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  const PointCloud map = load_cloud(path("built.pbm"));
  EXPECT_GT(map.size(), 0u);
  EXPECT_EQ(j.at("points").get<std::size_t>(), map.size());
  const std::string traj = read_file(path("built.pbm.trajectory.jsonl"));
  EXPECT_EQ(static_cast<std::size_t>(std::count(traj.begin(), traj.end(), '\n')), j.at("scans").get<std::size_t>());

  ASSERT_EQ(run({"map-build", "--scans", (path("corridor") / "scans.pbs").string(), "--out",
                 path("rebuilt.pbm").string()})
                .code,
            0);
  EXPECT_EQ(read_file(path("rebuilt.pbm")), read_file(path("built.pbm")));
}

TEST_F(Cli, MapBuildOnSparseSamplesDiverges) {
  // map-sample scans are random subsets of the map; consecutive ones barely overlap
  const auto r = run({"map-build", "--scans", demo("scans.pbs"), "--out", path("sparse.pbm").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("diverged"), std::string::npos);
}

TEST_F(Cli, PublishOnBusyPortExits7) {
  BridgeServer holder(BridgeOptions{});
  const auto r = run({"--port", std::to_string(holder.port()), "run", "--scenario", demo("scenario.json"), "--map",
                      demo("map.pbm"), "--mode", "sim", "--publish", "--log", path("busy.jsonl").string()});
  EXPECT_EQ(r.code, 7);
  holder.stop();
}

TEST_F(Cli, PublishConvertsToTheRequestedConvention) {
  const fs::path err = path("conv.err");
  fs::remove(err);
  const pid_t pid = proc::spawn({PORTOBELLO_CLI, "--port", "0", "--convention", "left-y", "--log-level", "info", "run",
                                 "--scenario", demo("scenario.json"), "--map", demo("map.pbm"), "--mode", "sim",
                                 "--publish", "--wait-clients", "1", "--max-duration", "2", "--log",
                                 path("conv.jsonl").string()},
                                path("conv.out"), err);
  int port = 0;
  const std::regex re("bridge listening on port ([0-9]+)");
  for (int i = 0; i < 1000 && port == 0; ++i) {
    std::smatch m;
    const std::string text = proc::peek(err);
    if (std::regex_search(text, m, re)) port = std::stoi(m[1]);
    else std::this_thread::sleep_for(10ms);
  }
  ASSERT_NE(port, 0);
  BridgeClient c("127.0.0.1", static_cast<std::uint16_t>(port));
  c.send(wire::Subscribe{1, {"tf"}});
  std::vector<wire::TransformUpdate> tfs;
  while (!c.closed()) {
    if (auto m = c.receive(200ms)) {
      if (auto* tf = std::get_if<wire::TransformUpdate>(&*m)) tfs.push_back(*tf);
    }
  }
  ASSERT_EQ(proc::wait_exit(pid), 0);
  ASSERT_FALSE(tfs.empty());
  const RunLog log = load_run_log(path("conv.jsonl"));
  const auto& last = tfs.back();
  const RigidTransform truth = pose_at(log.poses, last.stamp);
  // left-handed Y-up: (x, y, z) -> (x, z, y)
  EXPECT_NEAR(last.transform.translation().x(), truth.translation().x(), 1e-9);
  EXPECT_NEAR(last.transform.translation().y(), truth.translation().z(), 1e-9);
  EXPECT_NEAR(last.transform.translation().z(), truth.translation().y(), 1e-9);
}

// ---------------------------------------------------------------------------

class Serve : public Cli {
 protected:
  void SetUp() override {
    fs::copy_file(demo("scenario.json"), path("served.json"), fs::copy_options::overwrite_existing);
    fs::remove(path("serve.err"));
    pid_ = proc::spawn({PORTOBELLO_CLI, "--port", "0", "serve", "--map", demo("map.pbm"), "--scenario",
                        path("served.json").string(), "--http-port", "0"},
                       path("serve.out"), path("serve.err"));
    const std::regex re(R"(serving http://[^:]+:([0-9]+) \(bridge port ([0-9]+)\))");
    for (int i = 0; i < 1000 && http_port_ == 0; ++i) {
      std::smatch m;
      const std::string text = proc::peek(path("serve.err"));
      if (std::regex_search(text, m, re)) {
        http_port_ = std::stoi(m[1]);
        bridge_port_ = std::stoi(m[2]);
      } else {
        std::this_thread::sleep_for(10ms);
      }
    }
    ASSERT_NE(http_port_, 0) << proc::peek(path("serve.err"));
    client_ = std::make_unique<httplib::Client>("127.0.0.1", http_port_);
    client_->set_read_timeout(10, 0);
  }
  void TearDown() override {
    ::kill(pid_, SIGTERM);
    EXPECT_EQ(proc::wait_exit(pid_), 0);
  }

  json status() {
    auto r = client_->Get("/run");
    EXPECT_TRUE(r);
    return r ? json::parse(r->body) : json{};
  }
  json wait_for(const std::function<bool(const json&)>& pred, std::chrono::milliseconds limit = 30s) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    json s = status();
    while (!pred(s) && std::chrono::steady_clock::now() < deadline) {
      std::this_thread::sleep_for(20ms);
      s = status();
    }
    return s;
  }
  httplib::Result post(const json& body) { return client_->Post("/run", body.dump(), "application/json"); }

  pid_t pid_ = 0;
  int http_port_ = 0, bridge_port_ = 0;
  std::unique_ptr<httplib::Client> client_;
};

TEST_F(Serve, MapEndpointPagesADownsampledCloud) {
  auto r = client_->Get("/map?voxel=1.0&offset=0&limit=100");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  const auto j = json::parse(r->body);
  EXPECT_EQ(j.at("count"), 100);
  EXPECT_EQ(j.at("points").size(), 100u);
  EXPECT_EQ(j.at("map_hash"), map_hash(load_cloud(demo("map.pbm"))));
  const auto total = j.at("total").get<std::int64_t>();
  EXPECT_GT(total, 100);
  std::vector<Eigen::Vector3d> raw;
  for (const auto& p : load_cloud(demo("map.pbm")).points) raw.push_back(p.position);
  EXPECT_EQ(static_cast<std::size_t>(total), oracle::occupied_voxels(raw, 1.0));

  auto tail = client_->Get("/map?voxel=1.0&offset=" + std::to_string(total - 3) + "&limit=100");
  ASSERT_TRUE(tail);
  EXPECT_EQ(json::parse(tail->body).at("count"), 3);

  for (const char* bad : {"/map?voxel=-1", "/map?voxel=abc", "/map?limit=0", "/map?offset=-5"}) {
    auto e = client_->Get(bad);
    ASSERT_TRUE(e);
    EXPECT_EQ(e->status, 400) << bad;
  }
}

TEST_F(Serve, ScenarioReadBackAfterStaging) {
  auto got = client_->Get("/scenario");
  ASSERT_TRUE(got);
  ASSERT_EQ(got->status, 200);
  const Scenario original = scenario_from_json(json::parse(got->body));
  EXPECT_EQ(got->get_header_value("X-Scenario-Hash"), scenario_hash(original));

  // drop a prop beside the route, as the console would
  json j = json::parse(got->body);
  const Vec3 where = original.route[2].position + Vec3(1.5, -0.5, 0.0);
  j["agents"].push_back({{"id", "cone_1"},
                         {"kind", "prop"},
                         {"initial_pose", {{"translation", {where.x(), where.y(), 0.0}}, {"rotation", {1, 0, 0, 0}}}},
                         {"initially_active", true},
                         {"path", json::array()}});
  auto put = client_->Put("/scenario", j.dump(), "application/json");
  ASSERT_TRUE(put);
  ASSERT_EQ(put->status, 200) << put->body;

  auto back = client_->Get("/scenario");
  ASSERT_TRUE(back);
  const Scenario staged = scenario_from_json(json::parse(back->body));
  const VirtualAgent* cone = staged.find_agent("cone_1");
  ASSERT_NE(cone, nullptr);
  EXPECT_LT((cone->initial_pose.translation() - where).norm(), 0.01);
  EXPECT_EQ(load_scenario(path("served.json")), staged);

  j["agents"].back()["colour"] = "orange";
  auto schema = client_->Put("/scenario", j.dump(), "application/json");
  ASSERT_TRUE(schema);
  EXPECT_EQ(schema->status, 422);
  EXPECT_EQ(json::parse(schema->body).at("issues").at(0).at("code"), "SchemaError");

  j["agents"].back().erase("colour");
  j["bindings"].push_back({{"trigger_id", "crosswalk_1"}, {"actions", {{{"type", "start_agent"}, {"agent_id", "ghost"}}}}});
  auto dangling = client_->Put("/scenario", j.dump(), "application/json");
  ASSERT_TRUE(dangling);
  EXPECT_EQ(dangling->status, 422);
  EXPECT_EQ(json::parse(dangling->body).at("issues").at(0).at("code"), "DanglingReference");

  j["bindings"].erase(j["bindings"].size() - 1);
  j["agents"].back()["initial_pose"]["translation"] = {500.0, 500.0, 0.0};
  auto off = client_->Put("/scenario", j.dump(), "application/json");
  ASSERT_TRUE(off);
  EXPECT_EQ(off->status, 422);
  EXPECT_EQ(json::parse(off->body).at("issues").at(0).at("entity_id"), "cone_1");
  EXPECT_EQ(load_scenario(path("served.json")), staged);
}

TEST_F(Serve, RunControlAndEventStream) {
  EXPECT_EQ(post({{"command", "bogus"}})->status, 400);
  EXPECT_EQ(post({{"command", "pause"}})->status, 409);
  EXPECT_EQ(status().at("state"), "idle");

  std::string stream;
  std::atomic<bool> saw_end{false};
  std::thread reader([&] {
    httplib::Client c("127.0.0.1", http_port_);
    c.set_read_timeout(60, 0);
    c.Get("/events", [&](const char* data, std::size_t n) {
      stream.append(data, n);
      if (stream.find("\"state\":\"finished\"") != std::string::npos) saw_end = true;
      return !saw_end;
    });
  });
  std::this_thread::sleep_for(200ms);

  BridgeClient renderer("127.0.0.1", static_cast<std::uint16_t>(bridge_port_));
  renderer.send(wire::Subscribe{1, {"triggers"}});

  auto start = post({{"command", "start"}, {"speed", 25.0}});
  ASSERT_TRUE(start);
  EXPECT_EQ(start->status, 202);
  EXPECT_EQ(post({{"command", "start"}})->status, 409);
  const json done = wait_for([](const json& s) { return s.at("state") == "finished"; }, 60s);
  reader.join();
  ASSERT_EQ(done.at("state"), "finished");
  EXPECT_EQ(done.at("fired").size(), 3u);
  for (const auto& t : done.at("triggers")) EXPECT_TRUE(t.at("fired").get<bool>());

  std::size_t trigger_events = 0;
  for (std::size_t p = stream.find("event: trigger"); p != std::string::npos; p = stream.find("event: trigger", p + 1)) {
    ++trigger_events;
  }
  EXPECT_EQ(trigger_events, 3u);
  EXPECT_EQ(stream.rfind("event: status", 0), 0u);
  EXPECT_NE(stream.find("event: tick"), std::string::npos);

  std::vector<std::string> relayed;
  while (auto m = renderer.receive(500ms)) {
    if (const auto* f = std::get_if<wire::TriggerFired>(&*m)) relayed.push_back(f->trigger_id);
  }
  EXPECT_EQ(relayed, (std::vector<std::string>{"crosswalk_1", "crosswalk_2", "crosswalk_3"}));
}

TEST_F(Serve, OperatorProceedAndStop) {
  ASSERT_EQ(post({{"command", "start"}, {"speed", 20.0}, {"operator", true}})->status, 202);
  const json held = wait_for([](const json& s) { return s.value("status", "") == "holding-at-stop"; });
  ASSERT_EQ(held.value("status", ""), "holding-at-stop");
  EXPECT_EQ(held.at("fired").size(), 1u);
  EXPECT_EQ(post({{"command", "proceed"}})->status, 202);
  const json moving = wait_for([](const json& s) { return s.value("status", "") == "running"; });
  EXPECT_EQ(moving.value("status", ""), "running");
  EXPECT_EQ(post({{"command", "proceed"}})->status, 409);

  EXPECT_EQ(post({{"command", "pause"}})->status, 202);
  EXPECT_EQ(post({{"command", "pause"}})->status, 409);
  EXPECT_EQ(post({{"command", "resume"}})->status, 202);
  EXPECT_EQ(post({{"command", "stop"}})->status, 202);
  EXPECT_EQ(wait_for([](const json& s) { return s.at("state") == "stopped"; }).at("state"), "stopped");
  EXPECT_EQ(client_->Put("/scenario", read_file(path("served.json")), "application/json")->status, 200);
}

}  // namespace
