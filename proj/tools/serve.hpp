#pragma once

#include "common.hpp"
#include "portobello/bridge.hpp"
#include "portobello/follower.hpp"

#include <httplib.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>

namespace portobello::cli {

using nlohmann::json;

/// Fan-out of server-sent events with a bounded backlog.
class EventHub {
 public:
  void publish(const std::string& name, const json& data) {
    std::lock_guard lock(mutex_);
    events_.push_back({++seq_, "event: " + name + "\ndata: " + data.dump() + "\n\n"});
    if (events_.size() > 1024) events_.pop_front();
    cv_.notify_all();
  }

  std::uint64_t head() const {
    std::lock_guard lock(mutex_);
    return seq_;
  }

  /// Events newer than `cursor`, waiting up to `timeout` for the first one.
  std::vector<std::string> wait(std::uint64_t& cursor, std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    cv_.wait_for(lock, timeout, [&] { return closed_ || seq_ > cursor; });
    std::vector<std::string> out;
    for (const auto& e : events_) {
      if (e.seq > cursor) out.push_back(e.text);
    }
    cursor = seq_;
    return out;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    cv_.notify_all();
  }
  bool closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
  }

 private:
  struct Event {
    std::uint64_t seq;
    std::string text;
  };
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Event> events_;
  std::uint64_t seq_ = 0;
  bool closed_ = false;
};

struct ServeConfig {
  std::string map_path;
  std::string scenario_path;
  std::string host = "127.0.0.1";
  int http_port = 8080;
  std::uint16_t bridge_port = kDefaultBridgePort;
  double default_voxel = 0.5;
  wire::RendererConvention convention = wire::kMapConvention;
};

inline json issue_json(const std::string& code, const std::string& entity, const std::string& message) {
  return {{"severity", "error"}, {"code", code}, {"entity_id", entity}, {"message", message}};
}

/// HTTP backend for the console: map, scenario editing, run control, events.
class ServeApp {
 public:
  explicit ServeApp(ServeConfig cfg) : cfg_(std::move(cfg)) {
    map_ = std::make_shared<PointCloud>(load_any_cloud(cfg_.map_path));
    index_ = std::make_shared<const KdTree>(*map_);
    map_hash_ = map_hash(*map_);
    scenario_ = load_scenario(cfg_.scenario_path);
    const auto report = validate_against_map(scenario_, *index_, map_hash_);
    for (const auto& i : report.issues) spdlog::warn("scenario: {} {}: {}", i.code, i.entity_id, i.message);

    BridgeOptions bo;
    bo.port = cfg_.bridge_port;
    bo.convention = cfg_.convention;
    bo.map = map_;
    bridge_ = std::make_unique<BridgeServer>(bo);
    routes();
    if (cfg_.http_port == 0) {
      const int p = http_.bind_to_any_port(cfg_.host);
      if (p <= 0) throw BindError("cannot listen on " + cfg_.host);
      http_port_ = p;
    } else {
      if (!http_.bind_to_port(cfg_.host, cfg_.http_port)) {
        throw BindError("cannot listen on " + cfg_.host + ":" + std::to_string(cfg_.http_port));
      }
      http_port_ = cfg_.http_port;
    }
  }

  ~ServeApp() { shutdown(); }

  std::uint16_t bridge_port() const { return bridge_->port(); }
  int http_port() const { return http_port_; }

  /// Serves until `stop()`; safe to call `stop()` from another thread.
  void run() {
    spdlog::info("serve: http on {}:{}, bridge on port {}", cfg_.host, http_port_, bridge_->port());
    http_.listen_after_bind();
  }

  void stop() {
    hub_.close();
    http_.stop();
  }

  void shutdown() {
    stop();
    cancel_run();
    if (bridge_) bridge_->stop();
  }

 private:
  // ---- routes ------------------------------------------------------------

  void routes() {
    http_.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    http_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, PUT, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    http_.Get("/map", [this](const httplib::Request& req, httplib::Response& res) { get_map(req, res); });
    http_.Get("/scenario", [this](const httplib::Request&, httplib::Response& res) { get_scenario(res); });
    http_.Put("/scenario", [this](const httplib::Request& req, httplib::Response& res) { put_scenario(req, res); });
    http_.Get("/run", [this](const httplib::Request&, httplib::Response& res) { reply(res, 200, run_status()); });
    http_.Post("/run", [this](const httplib::Request& req, httplib::Response& res) { post_run(req, res); });
    http_.Get("/events", [this](const httplib::Request&, httplib::Response& res) { events(res); });
  }

  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static double query_number(const httplib::Request& req, const char* key, double fallback) {
    if (!req.has_param(key)) return fallback;
    const std::string v = req.get_param_value(key);
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(key);
    return d;
  }

  void get_map(const httplib::Request& req, httplib::Response& res) {
    double voxel;
    std::int64_t offset, limit;
    try {
      voxel = query_number(req, "voxel", cfg_.default_voxel);
      offset = static_cast<std::int64_t>(query_number(req, "offset", 0));
      limit = static_cast<std::int64_t>(query_number(req, "limit", 10000));
    } catch (const std::exception&) {
      return reply(res, 400, {{"error", "voxel, offset, and limit must be numbers"}});
    }
    if (!(voxel > 0) || offset < 0 || limit <= 0 || limit > 100000) {
      return reply(res, 400, {{"error", "need voxel > 0, offset >= 0, 0 < limit <= 100000"}});
    }
    std::shared_ptr<const PointCloud> down;
    {
      std::lock_guard lock(map_cache_mutex_);
      auto& slot = map_cache_[voxel];
      if (!slot) slot = std::make_shared<const PointCloud>(voxel_downsample(*map_, voxel));
      down = slot;
    }
    json pts = json::array();
    const auto total = static_cast<std::int64_t>(down->size());
    for (std::int64_t i = offset; i < std::min(total, offset + limit); ++i) {
      const Vec3& p = down->points[static_cast<std::size_t>(i)].position;
      pts.push_back({p.x(), p.y(), p.z()});
    }
    reply(res, 200,
          {{"total", total}, {"offset", offset}, {"count", pts.size()}, {"voxel", voxel}, {"map_hash", map_hash_},
           {"points", std::move(pts)}});
  }

  void get_scenario(httplib::Response& res) {
    std::lock_guard lock(scenario_mutex_);
    res.set_header("X-Scenario-Hash", scenario_hash(scenario_));
    reply(res, 200, scenario_to_json(scenario_));
  }

  void put_scenario(const httplib::Request& req, httplib::Response& res) {
    Scenario s;
    try {
      s = parse_scenario(req.body);
    } catch (const SchemaError& e) {
      return reply(res, 422, {{"ok", false}, {"issues", {issue_json("SchemaError", e.path, e.what())}}});
    } catch (const DanglingReference& e) {
      return reply(res, 422, {{"ok", false}, {"issues", {issue_json("DanglingReference", e.id, e.what())}}});
    }
    const ValidationReport report = validate_against_map(s, *index_, map_hash_);
    if (report.has_errors()) return reply(res, 422, report.to_json());
    {
      std::lock_guard lock(run_mutex_);
      if (run_state_ == "running") return reply(res, 409, {{"error", "cannot replace the scenario during a run"}});
      std::lock_guard slock(scenario_mutex_);
      const std::filesystem::path target(cfg_.scenario_path);
      const std::filesystem::path tmp = target.string() + ".tmp";
      save_scenario(s, tmp);
      std::filesystem::rename(tmp, target);
      scenario_ = s;
    }
    json body = report.to_json();
    body["hash"] = scenario_hash(s);
    hub_.publish("scenario", {{"hash", body["hash"]}});
    reply(res, 200, body);
  }

  void events(httplib::Response& res) {
    res.set_header("Cache-Control", "no-cache");
    auto cursor = std::make_shared<std::uint64_t>(hub_.head());
    auto first = std::make_shared<bool>(true);
    res.set_chunked_content_provider("text/event-stream", [this, cursor, first](std::size_t, httplib::DataSink& sink) {
      if (*first) {
        *first = false;
        const std::string hello = "event: status\ndata: " + run_status().dump() + "\n\n";
        return sink.write(hello.data(), hello.size());
      }
      if (hub_.closed()) {
        sink.done();
        return false;
      }
      auto batch = hub_.wait(*cursor, std::chrono::milliseconds(1000));
      if (batch.empty()) {
        static const std::string ping = ": keep-alive\n\n";
        return sink.write(ping.data(), ping.size());
      }
      for (const auto& e : batch) {
        if (!sink.write(e.data(), e.size())) return false;
      }
      return true;
    });
  }

  // ---- run control ---------------------------------------------------------

  json run_status() {
    std::lock_guard lock(run_mutex_);
    json j{{"state", run_state_}, {"run_id", run_id_}, {"fired", fired_}};
    if (latest_) {
      j["status"] = status_name(latest_->status);
      j["stamp"] = latest_->stamp.nanos();
      j["vehicle"] = scenario_json::to_json(latest_->vehicle);
      j["speed"] = latest_->speed;
      j["visible_agents"] = latest_->visible;
      std::lock_guard slock(scenario_mutex_);
      json triggers = json::array();
      for (std::size_t i = 0; i < latest_->triggers.size() && i < run_scenario_.triggers.size(); ++i) {
        triggers.push_back({{"id", run_scenario_.triggers[i].id},
                            {"armed", latest_->triggers[i].armed},
                            {"fired", latest_->triggers[i].fired}});
      }
      j["triggers"] = triggers;
    }
    if (run_error_) j["error"] = *run_error_;
    return j;
  }

  void post_run(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body.empty() ? "{}" : req.body);
    } catch (const json::exception&) {
      return reply(res, 400, {{"error", "body must be JSON"}});
    }
    const std::string cmd = body.is_object() && body.contains("command") && body["command"].is_string()
                                ? body["command"].get<std::string>()
                                : "";
    static const std::set<std::string> known{"start", "pause", "resume", "proceed", "stop"};
    if (!known.contains(cmd)) {
      return reply(res, 400, {{"error", "command must be start, pause, resume, proceed, or stop"}});
    }
    std::unique_lock lock(run_mutex_);
    const bool running = run_state_ == "running";
    const auto status = latest_ ? latest_->status : VehicleStatus::running;
    auto conflict = [&](const std::string& why) { reply(res, 409, {{"error", why}, {"state", run_state_}}); };

    if (cmd == "start") {
      if (running) return conflict("a run is already active");
      const double speed = body.value("speed", 1.0);
      const bool operator_attached = body.value("operator", false);
      if (!(speed > 0)) return reply(res, 400, {{"error", "speed must be positive"}});
      lock.unlock();
      if (run_thread_.joinable()) run_thread_.join();
      start_run(speed, operator_attached, body.value("log", ""));
      return reply(res, 202, {{"accepted", cmd}, {"run_id", run_id_}});
    }
    if (!running) return conflict("no active run");
    if (cmd == "pause") {
      if (pause_requested_) return conflict("already paused");
      pause_requested_ = true;
      queue_->push(OperatorCommand::pause);
    } else if (cmd == "resume") {
      if (!pause_requested_) return conflict("not paused");
      pause_requested_ = false;
      queue_->push(OperatorCommand::resume);
    } else if (cmd == "proceed") {
      if (status != VehicleStatus::holding_at_stop) return conflict("vehicle is not holding at a stop");
      queue_->push(OperatorCommand::proceed);
    } else {
      cancel_ = true;
    }
    reply(res, 202, {{"accepted", cmd}, {"run_id", run_id_}});
  }

  void start_run(double speed, bool operator_attached, const std::string& log_path) {
    Scenario sc;
    {
      std::lock_guard slock(scenario_mutex_);
      sc = scenario_;
      run_scenario_ = sc;
    }
    std::lock_guard lock(run_mutex_);
    ++run_id_;
    run_state_ = "running";
    run_error_.reset();
    latest_.reset();
    fired_ = json::array();
    pause_requested_ = false;
    queue_ = std::make_shared<CommandQueue>();
    cancel_ = false;
    hub_.publish("run", {{"state", "running"}, {"run_id", run_id_}});

    run_thread_ = std::thread([this, sc, speed, operator_attached, log_path, id = run_id_] {
      SimOptions opt;
      opt.commands = queue_;
      opt.cancel = &cancel_;
      opt.operator_attached = operator_attached;
      Pacer pacer(speed);
      std::int64_t tick = 0;
      VehicleStatus last_status = VehicleStatus::running;
      opt.on_tick = [&](const TickSnapshot& s) {
        pacer.wait_for(s.stamp);
        bridge_->publish(s);
        {
          std::lock_guard lock(run_mutex_);
          latest_ = s;
          for (const auto& e : s.new_events) {
            fired_.push_back({{"trigger_id", e.trigger_id}, {"stamp", e.stamp.nanos()}});
          }
        }
        for (const auto& e : s.new_events) {
          json actions = json::array();
          for (const auto& a : e.actions_executed) actions.push_back(scenario_json::to_json(a));
          hub_.publish("trigger", {{"trigger_id", e.trigger_id},
                                   {"stamp", e.stamp.nanos()},
                                   {"pose", scenario_json::to_json(e.vehicle_pose_at_fire)},
                                   {"actions", actions}});
        }
        if (s.status != last_status) {
          hub_.publish("status", {{"status", status_name(s.status)}, {"stamp", s.stamp.nanos()}});
          last_status = s.status;
        }
        if (tick++ % 5 == 0) {
          json agents = json::array();
          for (const auto& a : s.agents) {
            if (s.visible.contains(a.id)) agents.push_back({{"id", a.id}, {"pose", scenario_json::to_json(a.pose)}});
          }
          hub_.publish("tick", {{"stamp", s.stamp.nanos()},
                                {"vehicle", scenario_json::to_json(s.vehicle)},
                                {"speed", s.speed},
                                {"status", status_name(s.status)},
                                {"agents", agents}});
        }
      };
      std::string final_state = "finished";
      std::optional<std::string> error;
      try {
        RunLog log = run_sim(sc, WaypointFollower{}, opt);
        if (cancel_) final_state = "stopped";
        if (!log_path.empty()) save_run_log(log, log_path);
      } catch (const std::exception& e) {
        final_state = "failed";
        error = e.what();
        spdlog::error("serve: run {} failed: {}", id, e.what());
      }
      {
        std::lock_guard lock(run_mutex_);
        run_state_ = final_state;
        run_error_ = error;
      }
      json ev{{"state", final_state}, {"run_id", id}};
      if (error) ev["error"] = *error;
      hub_.publish("run", ev);
    });
  }

  void cancel_run() {
    cancel_ = true;
    if (run_thread_.joinable()) run_thread_.join();
  }

  ServeConfig cfg_;
  int http_port_ = 0;
  std::shared_ptr<PointCloud> map_;
  std::shared_ptr<const KdTree> index_;
  std::string map_hash_;
  std::mutex map_cache_mutex_;
  std::map<double, std::shared_ptr<const PointCloud>> map_cache_;

  std::mutex scenario_mutex_;
  Scenario scenario_;
  Scenario run_scenario_;

  std::mutex run_mutex_;
  std::thread run_thread_;
  std::shared_ptr<CommandQueue> queue_ = std::make_shared<CommandQueue>();
  std::atomic<bool> cancel_{false};
  std::string run_state_ = "idle";
  std::uint64_t run_id_ = 0;
  std::optional<TickSnapshot> latest_;
  json fired_ = json::array();
  std::optional<std::string> run_error_;
  bool pause_requested_ = false;

  EventHub hub_;
  std::unique_ptr<BridgeServer> bridge_;
  httplib::Server http_;
};

}  // namespace portobello::cli
