#pragma once

#include "portobello/errors.hpp"
#include "portobello/harness.hpp"
#include "portobello/pointcloud.hpp"
#include "portobello/wire.hpp"

#include <spdlog/spdlog.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace portobello {

inline constexpr std::uint16_t kDefaultBridgePort = 17333;

/// CLI flag, then PORTOBELLO_PORT, then the default.
inline std::uint16_t resolve_port(std::optional<int> flag, std::uint16_t fallback = kDefaultBridgePort) {
  auto check = [](long v, const std::string& src) {
    if (v < 0 || v > 65535) throw std::invalid_argument(src + ": port out of range");
    return static_cast<std::uint16_t>(v);
  };
  if (flag) return check(*flag, "--port");
  if (const char* env = std::getenv("PORTOBELLO_PORT"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0') throw std::invalid_argument("PORTOBELLO_PORT: not a number");
    return check(v, "PORTOBELLO_PORT");
  }
  return fallback;
}

namespace net {

inline bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

inline std::string errno_text() { return std::strerror(errno); }

}  // namespace net

struct BridgeOptions {
  std::string bind_address = "127.0.0.1";
  std::uint16_t port = kDefaultBridgePort;  // 0 picks a free port
  double rate_hz = 10.0;
  double heartbeat_hz = 1.0;
  std::size_t reliable_capacity = 1024;
  wire::RendererConvention convention = wire::kMapConvention;
  std::string map_frame = "map";
  std::string vehicle_frame = "vehicle";
  std::shared_ptr<const PointCloud> map;  // streamed to `map` subscribers
  std::size_t map_chunk_points = 4096;
};

/// TCP pub-sub server for renderer clients.
///
/// Transforms and agent states are last-value-wins slots refreshed at
/// `rate_hz`, each written as soon as the first snapshot after its period
/// boundary arrives; trigger firings, acks, and map chunks go through a bounded
/// per-client queue that is never dropped from. A client whose queue
/// overflows is disconnected.
class BridgeServer {
 public:
  explicit BridgeServer(BridgeOptions opt) : opt_(std::move(opt)) {
    if (!(opt_.rate_hz > 0.0) || !(opt_.heartbeat_hz > 0.0)) throw std::invalid_argument("bridge rates must be positive");
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw BindError("socket: " + net::errno_text());
    int yes = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(opt_.port);
    if (::inet_pton(AF_INET, opt_.bind_address.c_str(), &addr.sin_addr) != 1) {
      ::close(listen_fd_);
      throw BindError("bad bind address " + opt_.bind_address);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0) {
      const std::string why = net::errno_text();
      ::close(listen_fd_);
      throw BindError("cannot listen on " + opt_.bind_address + ":" + std::to_string(opt_.port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    accept_thread_ = std::thread([this] { accept_loop(); });
    publish_thread_ = std::thread([this] { publish_loop(); });
  }

  BridgeServer(const BridgeServer&) = delete;
  BridgeServer& operator=(const BridgeServer&) = delete;
  ~BridgeServer() { stop(); }

  std::uint16_t port() const { return port_; }

  /// Hands the server the latest run state. Never blocks on clients.
  void publish(const TickSnapshot& s) {
    {
      std::lock_guard lock(state_mutex_);
      latest_ = s;
      latest_->new_events.clear();
      ++snapshot_seq_;
    }
    state_cv_.notify_all();
    if (s.new_events.empty()) return;
    std::vector<std::string> frames;
    for (const auto& e : s.new_events) {
      frames.push_back(wire::encode(wire::TriggerFired{e.trigger_id, e.stamp, convert(e.vehicle_pose_at_fire)}));
    }
    std::lock_guard lock(clients_mutex_);
    for (auto& c : clients_) {
      if (!c->wants("triggers")) continue;
      std::lock_guard cl(c->mutex);
      for (const auto& f : frames) {
        if (c->reliable.size() >= opt_.reliable_capacity) {
          spdlog::warn("bridge: client {} reliable queue full, disconnecting", c->peer);
          c->close();
          break;
        }
        c->reliable.push_back(f);
      }
      c->cv.notify_one();
    }
  }

  std::size_t client_count() const {
    std::lock_guard lock(clients_mutex_);
    std::size_t n = 0;
    for (const auto& c : clients_) n += c->closed ? 0 : 1;
    return n;
  }

  /// Connected clients that have sent a Subscribe.
  std::size_t subscriber_count() const {
    std::lock_guard lock(clients_mutex_);
    std::size_t n = 0;
    for (const auto& c : clients_) n += (!c->closed && c->subscribed) ? 1 : 0;
    return n;
  }

  /// Blocks until `n` clients have subscribed or `timeout` passes.
  bool wait_for_subscribers(std::size_t n, std::chrono::milliseconds timeout) const {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (subscriber_count() < n) {
      if (std::chrono::steady_clock::now() >= deadline) return false;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    return true;
  }

  /// Flushes queued reliable messages (bounded wait), then disconnects everyone.
  void stop() {
    if (stopping_.exchange(true)) return;
    {
      std::lock_guard lock(state_mutex_);
      state_cv_.notify_all();
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    if (publish_thread_.joinable()) publish_thread_.join();
    std::list<std::shared_ptr<Client>> clients;
    {
      std::lock_guard lock(clients_mutex_);
      clients.swap(clients_);
    }
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
    for (auto& c : clients) {
      std::unique_lock lock(c->mutex);
      c->cv.wait_until(lock, deadline, [&] { return c->closed || (c->reliable.empty() && !c->sending); });
    }
    for (auto& c : clients) reap(*c);
    ::close(listen_fd_);
  }

 private:
  struct Client {
    int fd = -1;
    std::string peer;
    std::thread reader, writer;
    std::mutex mutex;
    std::condition_variable cv;
    std::set<std::string> topics;
    std::deque<std::string> reliable;
    std::optional<std::string> tf_slot, heartbeat_slot;
    std::optional<std::vector<std::string>> agent_slot;
    bool sending = false;
    std::atomic<bool> closed{false};
    std::atomic<bool> subscribed{false};

    bool wants(const std::string& topic) {
      if (closed || !subscribed) return false;
      std::lock_guard lock(mutex);
      return topics.contains(topic);
    }
    void close() {
      if (!closed.exchange(true)) ::shutdown(fd, SHUT_RDWR);
      cv.notify_all();
    }
  };

  RigidTransform convert(const RigidTransform& t) const {
    return wire::convert_pose(t, wire::kMapConvention, opt_.convention);
  }

  void accept_loop() {
    while (!stopping_) {
      pollfd p{listen_fd_, POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) continue;
      sockaddr_in addr{};
      socklen_t len = sizeof addr;
      const int fd = ::accept(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
      if (fd < 0) continue;
      int yes = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof yes);
      auto c = std::make_shared<Client>();
      c->fd = fd;
      char buf[INET_ADDRSTRLEN] = {};
      ::inet_ntop(AF_INET, &addr.sin_addr, buf, sizeof buf);
      c->peer = std::string(buf) + ":" + std::to_string(ntohs(addr.sin_port));
      spdlog::info("bridge: client {} connected", c->peer);
      c->reader = std::thread([this, c] { read_loop(*c); });
      c->writer = std::thread([c] { write_loop(*c); });
      std::lock_guard lock(clients_mutex_);
      clients_.push_back(std::move(c));
    }
  }

  void read_loop(Client& c) {
    wire::FrameReader reader;
    char buf[4096];
    try {
      while (!c.closed) {
        const ssize_t n = ::recv(c.fd, buf, sizeof buf, 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        reader.feed(std::string_view(buf, static_cast<std::size_t>(n)));
        while (auto m = reader.next()) handle(c, *m);
      }
    } catch (const Error& e) {
      spdlog::warn("bridge: client {} sent a bad frame: {}", c.peer, e.what());
    }
    c.close();
  }

  void handle(Client& c, const wire::Message& m) {
    const auto* sub = std::get_if<wire::Subscribe>(&m);
    if (!sub) {
      spdlog::debug("bridge: ignoring {} from client {}", wire::type_name(wire::type_of(m)), c.peer);
      return;
    }
    static const std::set<std::string> known{"tf", "agents", "triggers", "map"};
    std::lock_guard lock(c.mutex);
    for (const auto& t : sub->topics) {
      if (known.contains(t)) {
        c.topics.insert(t);
      } else {
        spdlog::warn("bridge: client {} asked for unknown topic '{}'", c.peer, t);
      }
    }
    c.reliable.push_back(wire::encode(wire::Ack{sub->request_id}));
    if (opt_.map && std::count(sub->topics.begin(), sub->topics.end(), "map")) {
      const auto& pts = opt_.map->points;
      for (std::size_t off = 0; off < pts.size(); off += opt_.map_chunk_points) {
        wire::MapChunk chunk;
        chunk.offset = off;
        for (std::size_t i = off; i < std::min(pts.size(), off + opt_.map_chunk_points); ++i) {
          chunk.points.push_back(wire::convert_point(pts[i].position, wire::kMapConvention, opt_.convention));
        }
        c.reliable.push_back(wire::encode(chunk));
      }
    }
    c.subscribed = true;
    c.cv.notify_one();
  }

  static void write_loop(Client& c) {
    std::unique_lock lock(c.mutex);
    while (true) {
      c.cv.wait(lock, [&] {
        return c.closed || !c.reliable.empty() || c.tf_slot || c.agent_slot || c.heartbeat_slot;
      });
      if (c.closed) break;
      std::string batch;
      while (!c.reliable.empty()) {
        batch += c.reliable.front();
        c.reliable.pop_front();
      }
      if (c.heartbeat_slot) batch += *std::exchange(c.heartbeat_slot, std::nullopt);
      if (c.tf_slot) batch += *std::exchange(c.tf_slot, std::nullopt);
      if (c.agent_slot) {
        for (const auto& f : *c.agent_slot) batch += f;
        c.agent_slot.reset();
      }
      c.sending = true;
      lock.unlock();
      const bool ok = net::send_all(c.fd, batch);
      lock.lock();
      c.sending = false;
      c.cv.notify_all();
      if (!ok) {
        spdlog::warn("bridge: send to client {} failed, disconnecting", c.peer);
        lock.unlock();
        c.close();
        return;
      }
    }
  }

  void publish_loop() {
    using clock = std::chrono::steady_clock;
    const auto period = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / opt_.rate_hz));
    const auto hb_period =
        std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / opt_.heartbeat_hz));
    const auto start = clock::now();
    auto next_hb = start;
    std::set<std::string> shown;
    for (std::int64_t k = 1; !stopping_; ++k) {
      // each period goes out with the first snapshot that arrives after its
      // deadline; without fresh input the latest one is repeated half a period late
      const auto due = start + k * period;
      std::optional<TickSnapshot> snap;
      {
        std::unique_lock lock(state_mutex_);
        state_cv_.wait_until(lock, due, [&] { return stopping_.load(); });
        const std::uint64_t seq = snapshot_seq_;
        state_cv_.wait_until(lock, due + period / 2, [&] { return stopping_ || snapshot_seq_ != seq; });
        if (stopping_) break;
        snap = latest_;
      }
      std::optional<std::string> tf, hb;
      std::vector<std::string> agents;
      if (snap) {
        tf = wire::encode(wire::TransformUpdate{opt_.map_frame, opt_.vehicle_frame, snap->stamp, convert(snap->vehicle)});
        // visible agents every tick; agents that just left the visible set once, flagged hidden
        for (const auto& a : snap->agents) {
          const bool vis = snap->visible.contains(a.id);
          if (vis || shown.contains(a.id)) {
            agents.push_back(wire::encode(wire::AgentState{a.id, snap->stamp, convert(a.pose), vis}));
          }
        }
        shown = snap->visible;
      }
      if (clock::now() >= next_hb) {
        hb = wire::encode(wire::Heartbeat{snap ? snap->stamp : Timestamp(0), opt_.rate_hz});
        next_hb += hb_period;
      }
      std::lock_guard lock(clients_mutex_);
      for (auto it = clients_.begin(); it != clients_.end();) {
        auto& c = *it;
        if (c->closed) {
          reap(*c);
          spdlog::info("bridge: client {} disconnected", c->peer);
          it = clients_.erase(it);
          continue;
        }
        if (c->subscribed) {
          const bool want_tf = c->wants("tf"), want_agents = c->wants("agents");
          std::lock_guard cl(c->mutex);
          if (tf && want_tf) c->tf_slot = tf;
          if (snap && want_agents) c->agent_slot = agents;
          if (hb) c->heartbeat_slot = hb;
          c->cv.notify_one();
        }
        ++it;
      }
    }
  }

  static void reap(Client& c) {
    c.close();
    if (c.reader.joinable()) c.reader.join();
    if (c.writer.joinable()) c.writer.join();
    if (c.fd >= 0) ::close(std::exchange(c.fd, -1));
  }

  BridgeOptions opt_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_, publish_thread_;
  mutable std::mutex clients_mutex_;
  std::list<std::shared_ptr<Client>> clients_;
  std::mutex state_mutex_;
  std::condition_variable state_cv_;
  std::optional<TickSnapshot> latest_;
  std::uint64_t snapshot_seq_ = 0;
};

/// Minimal blocking client, used by the tests and handy for renderer bring-up.
class BridgeClient {
 public:
  BridgeClient(const std::string& host, std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw IoError("socket: " + net::errno_text());
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1 ||
        ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      const std::string why = net::errno_text();
      ::close(fd_);
      throw IoError("connect " + host + ":" + std::to_string(port) + ": " + why);
    }
  }
  BridgeClient(const BridgeClient&) = delete;
  BridgeClient& operator=(const BridgeClient&) = delete;
  ~BridgeClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  void send(const wire::Message& m) {
    if (!net::send_all(fd_, wire::encode(m))) throw IoError("send failed: " + net::errno_text());
  }
  void send_raw(std::string_view bytes) {
    if (!net::send_all(fd_, bytes)) throw IoError("send failed: " + net::errno_text());
  }

  /// Next message, or nullopt on timeout or orderly close.
  std::optional<wire::Message> receive(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      if (auto m = reader_.next()) return m;
      if (eof_) return std::nullopt;
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      pollfd p{fd_, POLLIN, 0};
      if (::poll(&p, 1, static_cast<int>(left.count())) <= 0) continue;
      char buf[65536];
      const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
      if (n <= 0) {
        eof_ = true;
        continue;
      }
      reader_.feed(std::string_view(buf, static_cast<std::size_t>(n)));
    }
  }

  bool closed() const { return eof_; }

 private:
  int fd_ = -1;
  bool eof_ = false;
  wire::FrameReader reader_;
};

}  // namespace portobello
