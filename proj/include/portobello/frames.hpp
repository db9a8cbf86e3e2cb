#pragma once

#include "portobello/errors.hpp"
#include "portobello/rigid_transform.hpp"
#include "portobello/time.hpp"

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

namespace portobello {

using FrameId = std::string;

struct StampedTransform {
  FrameId parent;
  FrameId child;
  Timestamp stamp;
  RigidTransform transform;  // pose of child expressed in parent
};

struct FrameTreeConfig {
  std::int64_t retention_nanos = 10 * kNanosPerSecond;
  std::int64_t extrapolation_slack_nanos = 100'000'000;
};

/// Tree of coordinate frames with a time-ordered transform buffer per edge.
///
/// One writer, any number of concurrent readers. Each child has exactly one
/// parent; inserts that would reparent a frame or close a cycle are rejected.
class FrameTree {
 public:
  FrameTree() = default;
  explicit FrameTree(FrameTreeConfig cfg) : cfg_(cfg) {}

  void set_transform(const StampedTransform& st) { insert(st, false); }

  /// Edge valid at every time; lookups never extrapolate through it.
  void set_static_transform(const FrameId& parent, const FrameId& child,
                            const RigidTransform& t) {
    insert({parent, child, Timestamp(0), t}, true);
  }

  /// Transform mapping points in `source` coordinates into `target` coordinates
  /// (equivalently, the pose of `source` expressed in `target`).
  RigidTransform lookup(const FrameId& target, const FrameId& source, Timestamp at) const {
    std::shared_lock lock(mutex_);
    require_frame(target);
    require_frame(source);
    if (target == source) return RigidTransform::identity();

    const auto target_chain = ancestors(target);
    const auto source_chain = ancestors(source);
    // Find the lowest common ancestor.
    std::optional<std::size_t> ti, si;
    for (std::size_t i = 0; i < target_chain.size() && !ti; ++i) {
      for (std::size_t j = 0; j < source_chain.size(); ++j) {
        if (target_chain[i] == source_chain[j]) {
          ti = i;
          si = j;
          break;
        }
      }
    }
    if (!ti) throw ConnectivityError("no path between '" + target + "' and '" + source + "'");

    const RigidTransform common_to_source = chain_down(source_chain, *si, at);
    const RigidTransform common_to_target = chain_down(target_chain, *ti, at);
    return common_to_target.inverse() * common_to_source;
  }

  bool has_frame(const FrameId& f) const {
    std::shared_lock lock(mutex_);
    return frames_.contains(f);
  }

  std::optional<FrameId> parent_of(const FrameId& f) const {
    std::shared_lock lock(mutex_);
    auto it = edges_.find(f);
    if (it == edges_.end()) return std::nullopt;
    return it->second.parent;
  }

  /// Stamps currently buffered on the edge into `child`, oldest first.
  std::vector<Timestamp> buffered_stamps(const FrameId& child) const {
    std::shared_lock lock(mutex_);
    std::vector<Timestamp> out;
    auto it = edges_.find(child);
    if (it == edges_.end()) return out;
    for (const auto& e : it->second.buffer) out.push_back(e.stamp);
    return out;
  }

  std::vector<FrameId> frames() const {
    std::shared_lock lock(mutex_);
    return {frames_.begin(), frames_.end()};
  }

  const FrameTreeConfig& config() const { return cfg_; }

 private:
  struct Entry {
    Timestamp stamp;
    RigidTransform transform;
  };
  struct Edge {
    FrameId parent;
    bool is_static = false;
    std::deque<Entry> buffer;
  };

  void insert(const StampedTransform& st, bool is_static) {
    if (st.parent.empty() || st.child.empty()) throw Error("frame ids must be non-empty");
    if (st.parent == st.child) throw CycleError("frame '" + st.child + "' cannot be its own parent");

    std::unique_lock lock(mutex_);
    auto it = edges_.find(st.child);
    if (it != edges_.end() && it->second.parent != st.parent) {
      throw ReparentError("frame '" + st.child + "' already has parent '" + it->second.parent + "'");
    }
    if (it == edges_.end()) {
      for (FrameId f = st.parent;;) {
        if (f == st.child) {
          throw CycleError("edge '" + st.parent + "' -> '" + st.child + "' would close a cycle");
        }
        auto up = edges_.find(f);
        if (up == edges_.end()) break;
        f = up->second.parent;
      }
    }

    Edge& edge = edges_[st.child];
    edge.parent = st.parent;
    if (is_static || edge.is_static) {
      edge.is_static = true;
      edge.buffer.assign(1, Entry{st.stamp, st.transform});
    } else {
      auto pos = std::upper_bound(edge.buffer.begin(), edge.buffer.end(), st.stamp,
                                  [](Timestamp t, const Entry& e) { return t < e.stamp; });
      if (pos != edge.buffer.begin() && std::prev(pos)->stamp == st.stamp) {
        std::prev(pos)->transform = st.transform;
      } else {
        edge.buffer.insert(pos, Entry{st.stamp, st.transform});
      }
      const std::int64_t cutoff = edge.buffer.back().stamp.nanos() - cfg_.retention_nanos;
      while (edge.buffer.size() > 1 && edge.buffer.front().stamp.nanos() < cutoff) {
        edge.buffer.pop_front();
      }
    }
    frames_.insert(st.parent);
    frames_.insert(st.child);
  }

  void require_frame(const FrameId& f) const {
    if (!frames_.contains(f)) throw UnknownFrame("unknown frame '" + f + "'");
  }

  // [f, parent(f), ..., root]
  std::vector<FrameId> ancestors(const FrameId& f) const {
    std::vector<FrameId> out{f};
    for (auto it = edges_.find(f); it != edges_.end(); it = edges_.find(it->second.parent)) {
      out.push_back(it->second.parent);
    }
    return out;
  }

  // Pose of chain[0] expressed in chain[top].
  RigidTransform chain_down(const std::vector<FrameId>& chain, std::size_t top, Timestamp at) const {
    RigidTransform acc;
    for (std::size_t i = 0; i < top; ++i) {
      acc = edge_at(chain[i], at) * acc;
    }
    return acc;
  }

  RigidTransform edge_at(const FrameId& child, Timestamp at) const {
    const Edge& edge = edges_.at(child);
    const auto& buf = edge.buffer;
    if (edge.is_static) return buf.front().transform;

    const auto describe = [&] { return "'" + edge.parent + "' -> '" + child + "'"; };
    if (at < buf.front().stamp) {
      if (buf.front().stamp.nanos() - at.nanos() > cfg_.extrapolation_slack_nanos) {
        throw ExtrapolationError("lookup before oldest data on " + describe());
      }
      return buf.front().transform;
    }
    if (at > buf.back().stamp) {
      if (at.nanos() - buf.back().stamp.nanos() > cfg_.extrapolation_slack_nanos) {
        throw ExtrapolationError("lookup after newest data on " + describe());
      }
      return buf.back().transform;
    }
    auto hi = std::lower_bound(buf.begin(), buf.end(), at,
                               [](const Entry& e, Timestamp t) { return e.stamp < t; });
    if (hi->stamp == at) return hi->transform;
    auto lo = std::prev(hi);
    const double ratio = static_cast<double>(at.nanos() - lo->stamp.nanos()) /
                         static_cast<double>(hi->stamp.nanos() - lo->stamp.nanos());
    return interpolate(lo->transform, hi->transform, ratio);
  }

  FrameTreeConfig cfg_;
  mutable std::shared_mutex mutex_;
  std::set<FrameId> frames_;
  std::map<FrameId, Edge> edges_;  // keyed by child
};

}  // namespace portobello
