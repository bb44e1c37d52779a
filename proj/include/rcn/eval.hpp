#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rcn/flow_cache.hpp"
#include "rcn/metrics.hpp"
#include "rcn/train.hpp"

namespace rcn {

struct FoldResult {
  std::string subject;
  std::uint64_t seed = 0;
  ConfusionMatrix cm;
  std::vector<std::string> sample_ids;
  std::vector<int> truth;
  std::vector<int> predicted;
  std::size_t epochs = 0;
  double final_loss = 0;
  double seconds = 0;
  std::vector<std::string> warnings;
};

struct DomainReport {
  ConfusionMatrix cm;
  double uar = 0;  // over classes present in the domain
  double uf1 = 0;
};

struct EvalReport {
  ArchDescriptor descriptor;
  TrainConfig train;
  ConfusionMatrix global;
  double uar = 0;
  double uf1 = 0;
  std::vector<FoldResult> folds;
  std::map<std::string, DomainReport> domains;
  double seconds = 0;
};

struct LosoOptions {
  std::size_t workers = 1;
  /// Called once per fold, from the worker thread that trained it.
  std::function<void(const FoldResult&, const RcnModel&)> on_fold;
};

/// Subjects in the order folds are numbered (sorted).
std::vector<std::string> fold_subjects(const std::vector<data::FlowSample>& samples);

/// Trains fold `fold_index` (held-out subject = fold_subjects()[fold_index])
/// with seed cfg.seed + fold_index.
TrainResult train_fold(const std::vector<data::FlowSample>& samples, const ArchDescriptor& desc,
                       const TrainConfig& cfg, std::size_t fold_index, std::vector<std::string>* warnings = nullptr);

EvalReport run_loso(const std::vector<data::FlowSample>& samples, const ArchDescriptor& desc,
                    const TrainConfig& cfg, const LosoOptions& options = {});

/// JSON-lines: one "fold" record per fold, then a "report" record. Without
/// timings every "seconds" field is written as 0, so reruns compare byte for byte.
void write_report(const EvalReport& report, const std::string& path, bool timings = true);
EvalReport read_report(const std::string& path);

struct SweepRow {
  ModelKind model;
  std::size_t resolution;
  std::uint64_t seed;
  double uar;
  double uf1;
};

/// One LOSO run per (model, resolution, seed); seeds are base seeds of the
/// per-fold scheme. `load` returns the flow set for a resolution.
std::vector<SweepRow> complexity_sweep(const std::function<std::vector<data::FlowSample>(std::size_t)>& load,
                                       const std::vector<ModelKind>& models,
                                       const std::vector<std::size_t>& resolutions,
                                       const std::vector<std::uint64_t>& seeds, const TrainConfig& cfg,
                                       std::size_t feature_maps, std::size_t pool_size, std::size_t workers = 1,
                                       const std::function<void(const SweepRow&)>& progress = {});

/// Per-row CSV followed by per-(model, resolution) mean/std rows.
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path);

enum class CamMode { PredictedClass, AllClasses };

/// Class activation map of one sample at out_w x out_h, min-max scaled to
/// [0,1] (0.5 everywhere when the map is constant). Returns the predicted class.
int compute_cam(RcnModel& model, const data::FlowSample& sample, std::size_t out_w, std::size_t out_h,
                flow::Plane& cam, CamMode mode = CamMode::PredictedClass);

/// compute_cam at the model's input resolution, written as an 8-bit P5 graymap.
int export_cam(RcnModel& model, const data::FlowSample& sample, const std::string& out_path,
               CamMode mode = CamMode::PredictedClass);

/// Share of the top-decile CAM pixels that fall inside mask (> 0.5).
double top_decile_hit_rate(const flow::Plane& cam, const flow::Plane& mask);

}  // namespace rcn
