#include "rcn/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include "binary_io.hpp"
#include "rcn/error.hpp"

namespace rcn {

namespace binio {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace binio

std::vector<std::uint8_t> serialize_checkpoint(const RcnModel& model) {
  binio::Writer w;
  w.bytes("RCNM");
  w.u32(kCheckpointVersion);
  w.str(model.descriptor().to_string());
  const auto& norm = model.input_norm();
  w.u32(std::uint32_t(norm.mean.size()));
  for (Real v : norm.mean) w.f32(float(v));
  for (Real v : norm.stddev) w.f32(float(v));
  auto entries = model.parameters();
  for (auto& b : model.buffers()) entries.push_back(b);
  w.u32(std::uint32_t(entries.size()));
  for (const auto& [name, t] : entries) {
    w.str(name);
    w.u32(std::uint32_t(t.rank()));
    for (auto d : t.shape()) w.u32(std::uint32_t(d));
    for (Real v : t.data()) w.f32(float(v));
  }
  return std::move(w.buffer());
}

RcnModel deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "checkpoint");
  if (r.bytes(4) != "RCNM") throw DataError("checkpoint: bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  RcnModel model(ArchDescriptor::parse(r.str()), 0);
  const auto channels = r.u32();
  if (channels != 3) throw DataError("checkpoint: expected 3 normalization channels");
  auto& norm = model.input_norm();
  for (auto& v : norm.mean) v = Real(r.f32());
  for (auto& v : norm.stddev) v = Real(r.f32());
  for (std::size_t c = 0; c < 3; ++c) {
    if (!std::isfinite(norm.mean[c]) || !(norm.stddev[c] > 0)) {
      throw DataError("checkpoint: invalid normalization statistics");
    }
  }

  std::map<std::string, Tensor> slots;
  for (auto& p : model.parameters()) slots.emplace(p.name, p.tensor);
  for (auto& b : model.buffers()) slots.emplace(b.name, b.tensor);

  const auto count = r.u32();
  if (count != slots.size()) throw DataError("checkpoint: entry count does not match descriptor");
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name = r.str(4096);
    auto it = slots.find(name);
    if (it == slots.end()) throw DataError("checkpoint: unexpected entry '" + name + "'");
    Tensor t = it->second;
    const auto rank = r.u32();
    if (rank != t.rank()) throw DataError("checkpoint: rank mismatch for " + name);
    for (std::size_t i = 0; i < rank; ++i) {
      if (r.u32() != t.dim(i)) throw DataError("checkpoint: shape mismatch for " + name);
    }
    r.need(4 * t.numel());
    for (auto& v : t.data()) {
      const float f = r.f32();
      if (!std::isfinite(f)) throw DataError("checkpoint: non-finite value in " + name);
      v = Real(f);
    }
    slots.erase(it);
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  return model;
}

void write_checkpoint(const RcnModel& model, const std::string& path) {
  binio::write_file(path, serialize_checkpoint(model));
}

RcnModel read_checkpoint(const std::string& path) { return deserialize_checkpoint(binio::read_file(path)); }

}  // namespace rcn
