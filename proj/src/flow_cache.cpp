#include "rcn/flow_cache.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rcn/error.hpp"
#include "rcn/image_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace rcn::data {

const FlowCacheEntry* FlowCacheIndex::find(const std::string& sample_id, std::size_t resolution) const {
  for (const auto& e : entries)
    if (e.sample_id == sample_id && e.resolution == resolution) return &e;
  return nullptr;
}

flow::FlowMap FlowCacheIndex::load(const std::string& sample_id, std::size_t resolution) const {
  const auto* e = find(sample_id, resolution);
  if (!e) throw DataError("flow cache has no entry for " + sample_id + " at R=" + std::to_string(resolution));
  return io::read_flow_map((fs::path(dir) / e->path).string());
}

std::pair<flow::Frame, flow::Frame> load_pair(const Manifest& manifest, const SampleRecord& r) {
  if (!r.onset_path.empty() && !r.apex_path.empty()) {
    return {io::read_frame(manifest.resolve(r.onset_path)), io::read_frame(manifest.resolve(r.apex_path))};
  }
  std::vector<flow::Frame> frames;
  for (const auto& f : r.frames) frames.push_back(io::read_frame(manifest.resolve(f)));
  const std::size_t apex = r.apex_index ? *r.apex_index : flow::locate_apex(frames, r.onset_index);
  return {frames[r.onset_index], frames[apex]};
}

namespace {

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ull;
  void bytes(const void* p, std::size_t n) {
    auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 0x100000001b3ull;
    }
  }
  template <class T>
  void pod(const T& v) {
    bytes(&v, sizeof v);
  }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

Fnv hash_inputs(const flow::Frame& onset, const flow::Frame& apex, const flow::FlowSolverConfig& c) {
  Fnv f;
  for (const auto* p : {&onset, &apex}) {
    f.pod(p->width);
    f.pod(p->height);
    f.bytes(p->values.data(), p->values.size() * sizeof(double));
  }
  f.pod(c.pyramid_levels);
  f.pod(c.pyramid_scale);
  f.pod(c.outer_warps);
  f.pod(c.irls_iters);
  f.pod(c.lorentzian_sigma);
  f.pod(c.smoothness_lambda);
  f.pod(c.median_radius);
  f.pod(c.jacobi_sweeps);
  return f;
}

void save_index(const FlowCacheIndex& index) {
  json j{{"version", kFlowIndexVersion}, {"entries", json::array()}};
  for (const auto& e : index.entries) {
    j["entries"].push_back(
        {{"sample_id", e.sample_id}, {"resolution", e.resolution}, {"path", e.path}, {"hash", e.hash}});
  }
  const auto path = fs::path(index.dir) / kFlowIndexName;
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(1) << '\n';
  if (!out) throw DataError("cannot write " + path.string());
}

}  // namespace

FlowCacheIndex load_flow_index(const std::string& dir) {
  const auto path = fs::path(dir) / kFlowIndexName;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open flow index " + path.string());
  FlowCacheIndex index;
  index.dir = dir;
  try {
    const json j = json::parse(in);
    if (j.at("version").get<int>() != kFlowIndexVersion) throw DataError("unsupported flow index version");
    for (const auto& e : j.at("entries")) {
      index.entries.push_back({e.at("sample_id").get<std::string>(), e.at("resolution").get<std::size_t>(),
                               e.at("path").get<std::string>(), e.at("hash").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return index;
}

FlowCacheIndex precompute_flows(const Manifest& manifest, const flow::FlowSolverConfig& cfg,
                                std::span<const std::size_t> resolutions, const std::string& out_dir,
                                std::size_t workers) {
  cfg.validate();
  for (auto r : resolutions)
    if (r < 16) throw UsageError("flow map resolution must be at least 16");
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "flows", ec);
  if (ec) throw DataError("cannot create cache directory " + out_dir + ": " + ec.message());

  std::map<std::pair<std::string, std::size_t>, FlowCacheEntry> previous;
  if (fs::exists(fs::path(out_dir) / kFlowIndexName)) {
    try {
      for (auto& e : load_flow_index(out_dir).entries) previous[{e.sample_id, e.resolution}] = e;
    } catch (const DataError&) {
      // unreadable index: rebuild everything
    }
  }

  const auto& records = manifest.records;
  std::vector<std::vector<FlowCacheEntry>> per_record(records.size());
  std::atomic<std::size_t> next{0}, written{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  std::string error_context;

  auto work = [&] {
    for (std::size_t i; (i = next++) < records.size();) {
      const auto& r = records[i];
      try {
        const auto [onset, apex] = load_pair(manifest, r);
        const Fnv base = hash_inputs(onset, apex, cfg);
        std::vector<std::size_t> todo;
        for (auto R : resolutions) {
          Fnv f = base;
          f.pod(R);
          FlowCacheEntry e{r.sample_id, R, "flows/" + r.sample_id + "_R" + std::to_string(R) + ".rcnf", f.hex()};
          const auto it = previous.find({r.sample_id, R});
          const bool fresh = it != previous.end() && it->second.hash == e.hash &&
                             fs::exists(fs::path(out_dir) / it->second.path);
          if (!fresh) todo.push_back(R);
          per_record[i].push_back(std::move(e));
        }
        if (todo.empty()) continue;
        const auto field = flow::estimate_flow(onset, apex, cfg);
        for (auto R : todo) {
          for (const auto& e : per_record[i]) {
            if (e.resolution != R) continue;
            io::write_flow_map((fs::path(out_dir) / e.path).string(), flow::assemble_flow_map(field, R));
            ++written;
          }
        }
      } catch (const std::exception& e) {
        std::lock_guard lock(err_mu);
        if (!first_error) {
          first_error = std::current_exception();
          error_context = "sample " + r.sample_id + ": " + e.what();
        }
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, records.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (first_error) {
    try {
      std::rethrow_exception(first_error);
    } catch (const NumericError&) {
      throw NumericError(error_context);
    } catch (const UsageError&) {
      throw UsageError(error_context);
    } catch (const std::exception&) {
      throw DataError(error_context);
    }
  }

  FlowCacheIndex index;
  index.dir = out_dir;
  index.recomputed = written;
  // Entries for resolutions not requested this time stay in the index.
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& v = per_record[i];
    for (const auto& [key, e] : previous) {
      if (key.first != records[i].sample_id) continue;
      if (std::find(resolutions.begin(), resolutions.end(), key.second) != resolutions.end()) continue;
      if (fs::exists(fs::path(out_dir) / e.path)) v.push_back(e);
    }
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.resolution < b.resolution; });
    for (auto& e : v) index.entries.push_back(std::move(e));
  }
  save_index(index);
  return index;
}

std::vector<FlowSample> load_flow_set(const Manifest& manifest, const FlowCacheIndex& index,
                                      std::size_t resolution) {
  std::vector<FlowSample> out;
  out.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    out.push_back({r.sample_id, r.subject, r.domain, int(r.label), index.load(r.sample_id, resolution)});
    if (out.back().map.height != resolution || out.back().map.width != resolution) {
      throw DataError("cached flow for " + r.sample_id + " has the wrong resolution");
    }
  }
  return out;
}

}  // namespace rcn::data
