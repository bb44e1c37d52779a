#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rcn/flow.hpp"

namespace rcn::io {

/// Binary graymap (P5, maxval <= 255). Intensities map to value / maxval.
flow::Frame decode_pgm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pgm(const flow::Plane& plane);
flow::Frame read_frame(const std::string& path);
/// Values are clamped to [0,1] and rounded to 8 bits.
void write_frame(const std::string& path, const flow::Plane& plane);

inline constexpr std::uint32_t kFlowMapVersion = 1;

/// RCNF: "RCNF" | u32 version | u32 height | u32 width | u32 channels (3)
///       | H*W*3 f32, row-major, channel-interleaved. All little-endian.
std::vector<std::uint8_t> encode_flow_map(const flow::FlowMap& map);
flow::FlowMap decode_flow_map(std::span<const std::uint8_t> bytes);
void write_flow_map(const std::string& path, const flow::FlowMap& map);
flow::FlowMap read_flow_map(const std::string& path);

}  // namespace rcn::io
