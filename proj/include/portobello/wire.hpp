#pragma once

#include "portobello/bytes.hpp"
#include "portobello/errors.hpp"
#include "portobello/rigid_transform.hpp"
#include "portobello/time.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace portobello::wire {

// ---------------------------------------------------------------------------
// Messages

struct TransformUpdate {
  std::string parent;
  std::string child;
  Timestamp stamp;
  RigidTransform transform;
  bool operator==(const TransformUpdate&) const = default;
};

struct AgentState {
  std::string agent_id;
  Timestamp stamp;
  RigidTransform pose;
  bool visible = true;
  bool operator==(const AgentState&) const = default;
};

struct TriggerFired {
  std::string trigger_id;
  Timestamp stamp;
  RigidTransform pose;  // vehicle pose at the firing instant
  bool operator==(const TriggerFired&) const = default;
};

struct MapChunk {
  std::uint64_t offset = 0;  // index of the first point in the full map
  std::vector<Vec3> points;
  bool operator==(const MapChunk&) const = default;
};

struct Heartbeat {
  Timestamp stamp;
  double publish_rate_hz = 0.0;
  bool operator==(const Heartbeat&) const = default;
};

struct Subscribe {
  std::uint32_t request_id = 0;
  std::vector<std::string> topics;  // any of tf, agents, triggers, map
  bool operator==(const Subscribe&) const = default;
};

struct Ack {
  std::uint32_t request_id = 0;
  bool operator==(const Ack&) const = default;
};

using Message = std::variant<TransformUpdate, AgentState, TriggerFired, MapChunk, Heartbeat, Subscribe, Ack>;

enum class Type : std::uint8_t {
  transform_update = 1,
  agent_state = 2,
  trigger_fired = 3,
  map_chunk = 4,
  heartbeat = 5,
  subscribe = 6,
  ack = 7,
};

inline constexpr std::string_view kMagic = "PBL1";
inline constexpr std::size_t kHeaderSize = 9;  // magic, u32 length, u8 type
inline constexpr std::uint32_t kMaxPayload = 64u << 20;

inline Type type_of(const Message& m) { return static_cast<Type>(m.index() + 1); }

inline const char* type_name(Type t) {
  switch (t) {
    case Type::transform_update: return "TransformUpdate";
    case Type::agent_state: return "AgentState";
    case Type::trigger_fired: return "TriggerFired";
    case Type::map_chunk: return "MapChunk";
    case Type::heartbeat: return "Heartbeat";
    case Type::subscribe: return "Subscribe";
    case Type::ack: return "Ack";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Codec

namespace detail {

inline void put_string(std::string& out, const std::string& s) {
  bytes::put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

inline void put_stamp(std::string& out, Timestamp t) { bytes::put_u64(out, static_cast<std::uint64_t>(t.nanos())); }

inline void put_pose(std::string& out, const RigidTransform& t) {
  for (int i = 0; i < 3; ++i) bytes::put_f64(out, t.translation()[i]);
  const Quat& q = t.rotation();
  for (double c : {q.w(), q.x(), q.y(), q.z()}) bytes::put_f64(out, c);
}

inline void encode_payload(std::string& out, const Message& m) {
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, TransformUpdate>) {
          put_string(out, v.parent);
          put_string(out, v.child);
          put_stamp(out, v.stamp);
          put_pose(out, v.transform);
        } else if constexpr (std::is_same_v<T, AgentState>) {
          put_string(out, v.agent_id);
          put_stamp(out, v.stamp);
          put_pose(out, v.pose);
          bytes::put_u8(out, v.visible ? 1 : 0);
        } else if constexpr (std::is_same_v<T, TriggerFired>) {
          put_string(out, v.trigger_id);
          put_stamp(out, v.stamp);
          put_pose(out, v.pose);
        } else if constexpr (std::is_same_v<T, MapChunk>) {
          bytes::put_u64(out, v.offset);
          bytes::put_u32(out, static_cast<std::uint32_t>(v.points.size()));
          for (const auto& p : v.points) {
            for (int i = 0; i < 3; ++i) bytes::put_f64(out, p[i]);
          }
        } else if constexpr (std::is_same_v<T, Heartbeat>) {
          put_stamp(out, v.stamp);
          bytes::put_f64(out, v.publish_rate_hz);
        } else if constexpr (std::is_same_v<T, Subscribe>) {
          bytes::put_u32(out, v.request_id);
          bytes::put_u32(out, static_cast<std::uint32_t>(v.topics.size()));
          for (const auto& t : v.topics) put_string(out, t);
        } else {
          bytes::put_u32(out, v.request_id);
        }
      },
      m);
}

inline auto short_payload = [](std::size_t at, std::size_t n) -> void {
  throw FrameError("payload truncated: need " + std::to_string(n) + " bytes at payload offset " + std::to_string(at));
};

using PayloadReader = bytes::Reader<decltype(short_payload)>;

inline std::string get_string(PayloadReader& r) {
  const std::uint32_t n = r.u32();
  return std::string(r.take(n));
}

inline Timestamp get_stamp(PayloadReader& r) {
  const std::uint64_t v = r.u64();
  if (v > static_cast<std::uint64_t>(INT64_MAX)) throw FrameError("stamp out of range");
  return Timestamp(static_cast<std::int64_t>(v));
}

inline RigidTransform get_pose(PayloadReader& r) {
  Vec3 t;
  for (int i = 0; i < 3; ++i) t[i] = r.f64();
  const double w = r.f64(), x = r.f64(), y = r.f64(), z = r.f64();
  if (!(std::isfinite(w) && std::isfinite(x) && std::isfinite(y) && std::isfinite(z)) ||
      w * w + x * x + y * y + z * z == 0.0) {
    throw FrameError("invalid quaternion");
  }
  return RigidTransform::from_components(w, x, y, z, t);
}

inline Message decode_payload(Type type, std::string_view payload) {
  PayloadReader r(payload, 0, short_payload);
  Message m;
  switch (type) {
    case Type::transform_update: {
      TransformUpdate v;
      v.parent = get_string(r);
      v.child = get_string(r);
      v.stamp = get_stamp(r);
      v.transform = get_pose(r);
      m = std::move(v);
      break;
    }
    case Type::agent_state: {
      AgentState v;
      v.agent_id = get_string(r);
      v.stamp = get_stamp(r);
      v.pose = get_pose(r);
      const auto flag = r.u8();
      if (flag > 1) throw FrameError("visible flag must be 0 or 1");
      v.visible = flag == 1;
      m = std::move(v);
      break;
    }
    case Type::trigger_fired: {
      TriggerFired v;
      v.trigger_id = get_string(r);
      v.stamp = get_stamp(r);
      v.pose = get_pose(r);
      m = std::move(v);
      break;
    }
    case Type::map_chunk: {
      MapChunk v;
      v.offset = r.u64();
      const std::uint32_t n = r.u32();
      r.need(static_cast<std::size_t>(n) * 24);
      v.points.reserve(n);
      for (std::uint32_t i = 0; i < n; ++i) {
        const double x = r.f64(), y = r.f64(), z = r.f64();
        v.points.emplace_back(x, y, z);
      }
      m = std::move(v);
      break;
    }
    case Type::heartbeat: {
      Heartbeat v;
      v.stamp = get_stamp(r);
      v.publish_rate_hz = r.f64();
      m = v;
      break;
    }
    case Type::subscribe: {
      Subscribe v;
      v.request_id = r.u32();
      const std::uint32_t n = r.u32();
      for (std::uint32_t i = 0; i < n; ++i) v.topics.push_back(get_string(r));
      m = std::move(v);
      break;
    }
    case Type::ack:
      m = Ack{r.u32()};
      break;
    default:
      throw UnknownType(static_cast<unsigned>(type));
  }
  if (r.remaining() != 0) throw FrameError(std::to_string(r.remaining()) + " trailing payload bytes");
  return m;
}

inline bool known_type(std::uint8_t t) { return t >= 1 && t <= 7; }

}  // namespace detail

/// One complete frame: magic, payload length, type tag, payload.
inline std::string encode(const Message& m) {
  std::string payload;
  detail::encode_payload(payload, m);
  std::string out;
  out.reserve(kHeaderSize + payload.size());
  out += kMagic;
  bytes::put_u32(out, static_cast<std::uint32_t>(payload.size()));
  bytes::put_u8(out, static_cast<std::uint8_t>(type_of(m)));
  out += payload;
  return out;
}

/// Decodes exactly one frame; `frame` must hold nothing else.
inline Message decode(std::string_view frame) {
  if (frame.size() < kHeaderSize) throw FrameError("frame shorter than the 9-byte header");
  if (frame.substr(0, 4) != kMagic) throw FrameError("bad magic");
  const std::uint32_t len = bytes::get_u32(frame, 4);
  if (frame.size() - kHeaderSize != len) {
    throw FrameError("length field says " + std::to_string(len) + " bytes, frame carries " +
                     std::to_string(frame.size() - kHeaderSize));
  }
  const std::uint8_t tag = bytes::get_u8(frame, 8);
  if (!detail::known_type(tag)) throw UnknownType(tag);
  return detail::decode_payload(static_cast<Type>(tag), frame.substr(kHeaderSize));
}

/// Incremental decoder for a byte stream.
class FrameReader {
 public:
  void feed(std::string_view data) { buffer_.append(data); }

  /// Next complete message, or nullopt when more bytes are needed.
  std::optional<Message> next() {
    if (buffer_.size() < kHeaderSize) {
      if (!std::string_view(kMagic).starts_with(std::string_view(buffer_).substr(0, std::min<std::size_t>(buffer_.size(), 4)))) {
        throw FrameError("bad magic");
      }
      return std::nullopt;
    }
    if (std::string_view(buffer_).substr(0, 4) != kMagic) throw FrameError("bad magic");
    const std::uint32_t len = bytes::get_u32(buffer_, 4);
    if (len > kMaxPayload) throw FrameError("payload length " + std::to_string(len) + " exceeds limit");
    if (buffer_.size() < kHeaderSize + len) return std::nullopt;
    Message m = decode(std::string_view(buffer_).substr(0, kHeaderSize + len));
    buffer_.erase(0, kHeaderSize + len);
    return m;
  }

  std::size_t buffered() const { return buffer_.size(); }

 private:
  std::string buffer_;
};

// ---------------------------------------------------------------------------
// Renderer coordinate conventions

enum class Handedness { right, left };
enum class UpAxis { y, z };

struct RendererConvention {
  Handedness handedness = Handedness::right;
  UpAxis up = UpAxis::z;
  bool operator==(const RendererConvention&) const = default;
};

/// The map frame: right-handed, Z up.
inline constexpr RendererConvention kMapConvention{Handedness::right, UpAxis::z};
/// Typical game-engine convention: left-handed, Y up.
inline constexpr RendererConvention kLeftHandedYUp{Handedness::left, UpAxis::y};

/// Basis change from the map convention into `c`.
///   right/Z: identity          left/Y: (x, y, z) -> (x, z, y)
///   right/Y: (x, y, z) -> (x, z, -y)   left/Z: (x, y, z) -> (x, -y, z)
inline Eigen::Matrix3d basis_from_map(const RendererConvention& c) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
  m(0, 0) = 1.0;
  if (c.up == UpAxis::z) {
    m(1, 1) = c.handedness == Handedness::right ? 1.0 : -1.0;
    m(2, 2) = 1.0;
  } else {
    m(1, 2) = 1.0;
    m(2, 1) = c.handedness == Handedness::left ? 1.0 : -1.0;
  }
  return m;
}

/// Re-expresses a pose given in convention `from` in convention `to`.
inline RigidTransform convert_pose(const RigidTransform& t, const RendererConvention& from, const RendererConvention& to) {
  if (from == to) return t;
  const Eigen::Matrix3d m = basis_from_map(to) * basis_from_map(from).transpose();
  const Eigen::Matrix3d r = m * t.rotation_matrix() * m.transpose();
  return {Quat(r), m * t.translation()};
}

inline Vec3 convert_point(const Vec3& p, const RendererConvention& from, const RendererConvention& to) {
  if (from == to) return p;
  return basis_from_map(to) * basis_from_map(from).transpose() * p;
}

}  // namespace portobello::wire
