#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rcn/dataset.hpp"
#include "rcn/flow.hpp"

namespace rcn::data {

struct FlowCacheEntry {
  std::string sample_id;
  std::size_t resolution = 0;
  std::string path;  // relative to the cache directory
  std::string hash;  // inputs + solver config + resolution
};

struct FlowCacheIndex {
  std::string dir;
  std::vector<FlowCacheEntry> entries;
  std::size_t recomputed = 0;  // files written by the call that produced this index

  const FlowCacheEntry* find(const std::string& sample_id, std::size_t resolution) const;
  flow::FlowMap load(const std::string& sample_id, std::size_t resolution) const;
};

inline constexpr int kFlowIndexVersion = 1;
inline constexpr const char* kFlowIndexName = "flow_index.json";

/// Onset/apex pair of a record; sequences go through the apex surrogate
/// unless the manifest names the apex.
std::pair<flow::Frame, flow::Frame> load_pair(const Manifest& manifest, const SampleRecord& record);

/// Writes one RCNF per (sample, resolution) under out_dir plus flow_index.json.
/// Entries whose hash matches and whose file exists are left alone.
FlowCacheIndex precompute_flows(const Manifest& manifest, const flow::FlowSolverConfig& cfg,
                                std::span<const std::size_t> resolutions, const std::string& out_dir,
                                std::size_t workers = 1);

FlowCacheIndex load_flow_index(const std::string& dir);

/// Flow maps plus labels for every record at one resolution.
struct FlowSample {
  std::string sample_id;
  std::string subject;
  std::string domain;
  int label = 0;
  flow::FlowMap map;
};

std::vector<FlowSample> load_flow_set(const Manifest& manifest, const FlowCacheIndex& index,
                                      std::size_t resolution);

}  // namespace rcn::data
