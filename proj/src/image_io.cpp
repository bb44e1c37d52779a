#include "rcn/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "binary_io.hpp"
#include "rcn/error.hpp"

namespace rcn::io {

namespace {

class PgmHeader {
 public:
  explicit PgmHeader(std::span<const std::uint8_t> bytes) : b_(bytes) {}

  std::size_t number() {
    skip_space_and_comments();
    std::size_t v = 0;
    bool any = false;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + std::size_t(b_[pos_++] - '0');
      any = true;
      if (v > (1u << 24)) throw DataError("pgm: header value too large");
    }
    if (!any) throw DataError("pgm: malformed header");
    return v;
  }
  std::size_t pos() const { return pos_; }
  void advance() { ++pos_; }
  bool at_space() const { return pos_ < b_.size() && std::isspace(b_[pos_]); }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 2;
};

}  // namespace

flow::Frame decode_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw DataError("pgm: bad magic (expected P5)");
  PgmHeader h(bytes);
  const auto width = h.number();
  const auto height = h.number();
  const auto maxval = h.number();
  if (width == 0 || height == 0) throw DataError("pgm: zero dimension");
  if (maxval == 0 || maxval > 255) throw DataError("pgm: only 8-bit graymaps are supported");
  if (!h.at_space()) throw DataError("pgm: missing raster separator");
  h.advance();
  const std::size_t start = h.pos();
  if (bytes.size() - start < width * height) throw DataError("pgm: truncated raster");
  flow::Frame frame(width, height);
  for (std::size_t i = 0; i < width * height; ++i) {
    const auto v = bytes[start + i];
    if (v > maxval) throw DataError("pgm: sample exceeds maxval");
    frame.values[i] = double(v) / double(maxval);
  }
  return frame;
}

std::vector<std::uint8_t> encode_pgm(const flow::Plane& plane) {
  const std::string header =
      "P5\n" + std::to_string(plane.width) + " " + std::to_string(plane.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + plane.values.size());
  for (double v : plane.values) {
    const double c = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    out.push_back(std::uint8_t(std::lround(c * 255.0)));
  }
  return out;
}

flow::Frame read_frame(const std::string& path) {
  try {
    return decode_pgm(binio::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

void write_frame(const std::string& path, const flow::Plane& plane) {
  binio::write_file(path, encode_pgm(plane));
}

std::vector<std::uint8_t> encode_flow_map(const flow::FlowMap& map) {
  if (map.values.size() != map.height * map.width * 3) throw DataError("flow map: size mismatch");
  binio::Writer w;
  w.bytes("RCNF");
  w.u32(kFlowMapVersion);
  w.u32(std::uint32_t(map.height));
  w.u32(std::uint32_t(map.width));
  w.u32(3);
  for (float v : map.values) w.f32(v);
  return std::move(w.buffer());
}

flow::FlowMap decode_flow_map(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "flow map");
  if (r.bytes(4) != "RCNF") throw DataError("flow map: bad magic");
  if (const auto v = r.u32(); v != kFlowMapVersion) {
    throw DataError("flow map: unsupported version " + std::to_string(v));
  }
  flow::FlowMap map;
  map.height = r.u32();
  map.width = r.u32();
  const auto channels = r.u32();
  if (channels != 3) throw DataError("flow map: expected 3 channels");
  if (map.height == 0 || map.width == 0 || map.height > 16384 || map.width > 16384) {
    throw DataError("flow map: implausible dimensions");
  }
  const std::size_t n = map.height * map.width * 3;
  if (r.remaining() != 4 * n) throw DataError("flow map: truncated or corrupt file");
  map.values.resize(n);
  for (auto& v : map.values) {
    v = r.f32();
    if (!std::isfinite(v)) throw DataError("flow map: non-finite value");
  }
  return map;
}

void write_flow_map(const std::string& path, const flow::FlowMap& map) {
  binio::write_file(path, encode_flow_map(map));
}

flow::FlowMap read_flow_map(const std::string& path) {
  try {
    return decode_flow_map(binio::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace rcn::io
