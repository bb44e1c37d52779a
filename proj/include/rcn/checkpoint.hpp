#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rcn/model.hpp"

namespace rcn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// RCNM layout (little-endian):
///   "RCNM" | u32 version | str descriptor | u32 channels | f32 mean[c] | f32 std[c]
///   | u32 count | count x (str name | u32 rank | u32 dims[rank] | f32 values)
/// where str = u32 byte length followed by UTF-8 bytes. Entries cover learnable
/// parameters followed by batch-norm running statistics.
std::vector<std::uint8_t> serialize_checkpoint(const RcnModel& model);
RcnModel deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const RcnModel& model, const std::string& path);
RcnModel read_checkpoint(const std::string& path);

}  // namespace rcn
