#pragma once

#include "portobello/bytes.hpp"
#include "portobello/errors.hpp"
#include "portobello/pointcloud.hpp"
#include "portobello/time.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace portobello {

/// One range scan with its capture time, points in the vehicle frame.
struct StampedScan {
  Timestamp stamp;
  PointCloud cloud;
  bool operator==(const StampedScan&) const = default;
};

using ScanStream = std::vector<StampedScan>;

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

namespace detail {

struct Header {
  std::uint64_t count = 0;
  bool has_intensity = false;
  std::size_t data_offset = 0;
};

inline std::string_view next_line(std::string_view data, std::size_t& pos, const char* what) {
  const auto nl = data.find('\n', pos);
  if (nl == std::string_view::npos) throw FormatError(std::string("unterminated ") + what, pos);
  auto line = data.substr(pos, nl - pos);
  pos = nl + 1;
  return line;
}

// `<magic>\ncount N\nfields x y z [i]\n`
inline Header parse_header(std::string_view data, std::string_view magic) {
  Header h;
  std::size_t pos = 0;
  const std::size_t magic_at = pos;
  if (next_line(data, pos, "magic line") != magic) {
    throw FormatError("expected header '" + std::string(magic) + "'", magic_at);
  }
  const std::size_t count_at = pos;
  auto count_line = next_line(data, pos, "count line");
  if (!count_line.starts_with("count ")) throw FormatError("expected 'count N'", count_at);
  auto digits = count_line.substr(6);
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), h.count);
  if (ec != std::errc{} || ptr != digits.data() + digits.size()) {
    throw FormatError("malformed count '" + std::string(digits) + "'", count_at);
  }
  const std::size_t fields_at = pos;
  auto fields = next_line(data, pos, "fields line");
  if (fields == "fields x y z") {
    h.has_intensity = false;
  } else if (fields == "fields x y z i") {
    h.has_intensity = true;
  } else {
    throw FormatError("unsupported field list '" + std::string(fields) + "'", fields_at);
  }
  h.data_offset = pos;
  return h;
}

inline std::string make_header(std::string_view magic, std::uint64_t count, bool intensity) {
  std::string out(magic);
  out += "\ncount " + std::to_string(count) + "\nfields x y z";
  out += intensity ? " i\n" : "\n";
  return out;
}

inline auto short_read(const char* what) {
  return [what](std::size_t at, std::size_t need) {
    throw FormatError(std::string("truncated ") + what + ": needed " + std::to_string(need) +
                          " more bytes",
                      at);
  };
}

inline void put_point(std::string& out, const Point& p, bool intensity) {
  bytes::put_f32(out, static_cast<float>(p.position.x()));
  bytes::put_f32(out, static_cast<float>(p.position.y()));
  bytes::put_f32(out, static_cast<float>(p.position.z()));
  if (intensity) bytes::put_f32(out, p.intensity);
}

template <typename R>
Point get_point(R& r, bool intensity) {
  Point p;
  const float x = r.f32(), y = r.f32(), z = r.f32();
  p.position = Vec3(x, y, z);
  if (intensity) p.intensity = r.f32();
  if (!p.position.allFinite()) throw FormatError("non-finite coordinate", r.pos() - 12);
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Map format: `portobello-map v1` header, then float32 LE records.
// Coordinates are stored as float32; values representable in float32
// round-trip bit-exactly.

inline std::string encode_map(const PointCloud& cloud) {
  std::string out = detail::make_header("portobello-map v1", cloud.size(), cloud.has_intensity);
  out.reserve(out.size() + cloud.size() * (cloud.has_intensity ? 16 : 12));
  for (const auto& p : cloud.points) detail::put_point(out, p, cloud.has_intensity);
  return out;
}

inline PointCloud decode_map(std::string_view data) {
  const auto h = detail::parse_header(data, "portobello-map v1");
  PointCloud cloud;
  cloud.frame = "map";
  cloud.has_intensity = h.has_intensity;
  bytes::Reader r(data, h.data_offset, detail::short_read("map data"));
  const std::size_t record = h.has_intensity ? 16 : 12;
  if (r.remaining() / record < h.count) {
    throw FormatError("header declares " + std::to_string(h.count) + " points but data holds " +
                          std::to_string(r.remaining() / record),
                      h.data_offset + (r.remaining() / record) * record);
  }
  cloud.points.reserve(h.count);
  for (std::uint64_t i = 0; i < h.count; ++i) cloud.points.push_back(detail::get_point(r, h.has_intensity));
  if (r.remaining() != 0) throw FormatError("trailing bytes after declared points", r.pos());
  return cloud;
}

inline PointCloud load_cloud(const std::filesystem::path& path) { return decode_map(read_file(path)); }
inline void save_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  write_file(path, encode_map(cloud));
}

// ---------------------------------------------------------------------------
// Scan replay format: `portobello-scans v1` header (count = number of scans),
// then per scan: u64 stamp nanos, u32 point count, float32 records.

inline std::string encode_scans(const ScanStream& scans) {
  const bool intensity = !scans.empty() && scans.front().cloud.has_intensity;
  std::string out = detail::make_header("portobello-scans v1", scans.size(), intensity);
  for (const auto& s : scans) {
    bytes::put_u64(out, static_cast<std::uint64_t>(s.stamp.nanos()));
    bytes::put_u32(out, static_cast<std::uint32_t>(s.cloud.size()));
    for (const auto& p : s.cloud.points) detail::put_point(out, p, intensity);
  }
  return out;
}

inline ScanStream decode_scans(std::string_view data) {
  const auto h = detail::parse_header(data, "portobello-scans v1");
  bytes::Reader r(data, h.data_offset, detail::short_read("scan record"));
  ScanStream scans;
  for (std::uint64_t i = 0; i < h.count; ++i) {
    StampedScan s;
    const std::size_t at = r.pos();
    const std::uint64_t nanos = r.u64();
    if (nanos > static_cast<std::uint64_t>(INT64_MAX)) throw FormatError("stamp out of range", at);
    s.stamp = Timestamp(static_cast<std::int64_t>(nanos));
    const std::uint32_t n = r.u32();
    r.need(static_cast<std::size_t>(n) * (h.has_intensity ? 16 : 12));
    s.cloud.frame = "vehicle";
    s.cloud.has_intensity = h.has_intensity;
    s.cloud.points.reserve(n);
    for (std::uint32_t k = 0; k < n; ++k) s.cloud.points.push_back(detail::get_point(r, h.has_intensity));
    scans.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after declared scans", r.pos());
  return scans;
}

inline ScanStream load_scans(const std::filesystem::path& path) { return decode_scans(read_file(path)); }
inline void save_scans(const ScanStream& scans, const std::filesystem::path& path) {
  write_file(path, encode_scans(scans));
}

// ---------------------------------------------------------------------------
// PCD interchange (ASCII and binary DATA; fields x y z [intensity], plus
// any other scalar fields which are skipped).

inline PointCloud decode_pcd(std::string_view data) {
  struct Field {
    std::string name;
    std::size_t size = 4;
    char type = 'F';
    std::size_t count = 1;
  };
  std::vector<Field> fields;
  std::uint64_t points = 0;
  bool have_points = false;
  std::string mode;
  std::size_t pos = 0;

  auto split = [](std::string_view line) {
    std::vector<std::string> out;
    std::istringstream ss{std::string(line)};
    for (std::string tok; ss >> tok;) out.push_back(tok);
    return out;
  };

  while (mode.empty()) {
    const std::size_t at = pos;
    auto line = detail::next_line(data, pos, "PCD header");
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    auto tok = split(line);
    const std::string& key = tok.front();
    auto parse_sizes = [&](auto assign) {
      if (tok.size() - 1 != fields.size()) throw FormatError(key + " arity does not match FIELDS", at);
      for (std::size_t i = 1; i < tok.size(); ++i) assign(fields[i - 1], tok[i]);
    };
    try {
      if (key == "VERSION" || key == "VIEWPOINT" || key == "WIDTH" || key == "HEIGHT") {
        continue;
      } else if (key == "FIELDS") {
        fields.clear();
        for (std::size_t i = 1; i < tok.size(); ++i) fields.push_back({tok[i]});
      } else if (key == "SIZE") {
        parse_sizes([](Field& f, const std::string& v) { f.size = std::stoul(v); });
      } else if (key == "TYPE") {
        parse_sizes([](Field& f, const std::string& v) { f.type = v.at(0); });
      } else if (key == "COUNT") {
        parse_sizes([](Field& f, const std::string& v) { f.count = std::stoul(v); });
      } else if (key == "POINTS") {
        points = std::stoull(tok.at(1));
        have_points = true;
      } else if (key == "DATA") {
        mode = tok.at(1);
      } else {
        throw FormatError("unknown PCD header key '" + key + "'", at);
      }
    } catch (const std::logic_error&) {
      throw FormatError("malformed PCD header line '" + std::string(line) + "'", at);
    }
  }
  if (!have_points) throw FormatError("PCD header lacks POINTS", pos);
  if (mode != "ascii" && mode != "binary") throw FormatError("unsupported PCD DATA mode '" + mode + "'", pos);

  int ix = -1, iy = -1, iz = -1, ii = -1;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const auto& f = fields[i];
    const int k = static_cast<int>(i);
    if (f.name == "x") ix = k;
    if (f.name == "y") iy = k;
    if (f.name == "z") iz = k;
    if (f.name == "intensity" || f.name == "i") ii = k;
    if (!(f.size == 1 || f.size == 2 || f.size == 4 || f.size == 8) ||
        (f.type != 'F' && f.type != 'U' && f.type != 'I') || (f.type == 'F' && f.size < 4)) {
      throw FormatError("unsupported PCD field '" + f.name + "'", 0);
    }
  }
  if (ix < 0 || iy < 0 || iz < 0) throw FormatError("PCD lacks x/y/z fields", 0);

  PointCloud cloud;
  cloud.has_intensity = ii >= 0;
  cloud.points.reserve(points);

  if (mode == "ascii") {
    for (std::uint64_t n = 0; n < points; ++n) {
      const std::size_t at = pos;
      if (pos >= data.size()) throw FormatError("PCD declares more points than present", at);
      auto line = detail::next_line(data, pos, "PCD point");
      auto tok = split(line);
      std::size_t expect = 0;
      for (const auto& f : fields) expect += f.count;
      if (tok.size() != expect) throw FormatError("PCD point has wrong arity", at);
      std::vector<double> vals;
      std::size_t k = 0;
      for (const auto& f : fields) {
        for (std::size_t c = 0; c < f.count; ++c, ++k) {
          const auto& t = tok[k];
          std::errc ec{};
          double v = 0;
          if (f.type == 'F' && f.size == 4) {
            float fv = 0;  // parse at the declared precision
            ec = std::from_chars(t.data(), t.data() + t.size(), fv).ec;
            v = fv;
          } else {
            ec = std::from_chars(t.data(), t.data() + t.size(), v).ec;
          }
          if (ec != std::errc{}) throw FormatError("malformed PCD value '" + t + "'", at);
          vals.push_back(v);
        }
      }
      auto value_of = [&](int field) {
        std::size_t off = 0;
        for (int k = 0; k < field; ++k) off += fields[static_cast<std::size_t>(k)].count;
        return vals[off];
      };
      Point p{Vec3(value_of(ix), value_of(iy), value_of(iz)),
              ii >= 0 ? static_cast<float>(value_of(ii)) : 0.0f};
      cloud.points.push_back(p);
    }
    return cloud;
  }

  std::size_t stride = 0;
  std::vector<std::size_t> offsets;
  for (const auto& f : fields) {
    offsets.push_back(stride);
    stride += f.size * f.count;
  }
  bytes::Reader r(data, pos, detail::short_read("PCD binary data"));
  auto read_scalar = [&](std::string_view rec, int field) -> double {
    const auto& f = fields[static_cast<std::size_t>(field)];
    const std::size_t off = offsets[static_cast<std::size_t>(field)];
    if (f.type == 'F') return f.size == 4 ? bytes::get_f32(rec, off) : bytes::get_f64(rec, off);
    std::uint64_t u = 0;
    for (std::size_t b = 0; b < f.size; ++b) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(rec[off + b])) << (8 * b);
    if (f.type == 'U') return static_cast<double>(u);
    const unsigned shift = static_cast<unsigned>(64 - 8 * f.size);
    return static_cast<double>(static_cast<std::int64_t>(u << shift) >> shift);
  };
  for (std::uint64_t n = 0; n < points; ++n) {
    auto rec = r.take(stride);
    cloud.points.push_back({Vec3(read_scalar(rec, ix), read_scalar(rec, iy), read_scalar(rec, iz)),
                            ii >= 0 ? static_cast<float>(read_scalar(rec, ii)) : 0.0f});
  }
  return cloud;
}

inline std::string encode_pcd(const PointCloud& cloud, bool binary = true) {
  std::ostringstream h;
  h << "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\n";
  if (cloud.has_intensity) {
    h << "FIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\n";
  } else {
    h << "FIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n";
  }
  h << "WIDTH " << cloud.size() << "\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS " << cloud.size()
    << "\nDATA " << (binary ? "binary" : "ascii") << "\n";
  std::string out = h.str();
  if (binary) {
    for (const auto& p : cloud.points) detail::put_point(out, p, cloud.has_intensity);
  } else {
    char buf[64];
    for (const auto& p : cloud.points) {
      for (int k = 0; k < 3; ++k) {
        auto [e, ec] = std::to_chars(buf, buf + sizeof buf, static_cast<float>(p.position[k]));
        out.append(buf, e);
        out += ' ';
      }
      if (cloud.has_intensity) {
        auto [e, ec] = std::to_chars(buf, buf + sizeof buf, p.intensity);
        out.append(buf, e);
      } else {
        out.pop_back();
      }
      out += '\n';
    }
  }
  return out;
}

inline PointCloud load_pcd(const std::filesystem::path& path) { return decode_pcd(read_file(path)); }
inline void save_pcd(const PointCloud& cloud, const std::filesystem::path& path, bool binary = true) {
  write_file(path, encode_pcd(cloud, binary));
}

/// Loads either format, chosen by extension (`.pcd`) or content.
inline PointCloud load_any_cloud(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  if (std::string_view(data).starts_with("portobello-map v1")) return decode_map(data);
  return decode_pcd(data);
}

/// 64-bit FNV-1a, used for content hashes of maps and scenarios.
inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
  return s;
}

/// Hash of the map's on-disk encoding.
inline std::string map_hash(const PointCloud& cloud) { return hex64(fnv1a64(encode_map(cloud))); }

}  // namespace portobello
