#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rcn/arch.hpp"
#include "rcn/flow_cache.hpp"
#include "rcn/train.hpp"

namespace rcn {

/// Weighted sum of candidate outputs with coefficients alpha_i / sum_j alpha_j.
/// alpha is a 1-D tensor of positive values; gradients reach both sides.
Tensor mixed_forward(const std::vector<Tensor>& candidate_outputs, const Tensor& alpha);

/// softplus(theta) normalized to sum 1.
Tensor mixing_coefficients(const Tensor& theta);

/// Three decision nodes: first-layer kind, recurrent kind, attention placement.
struct SearchSpace {
  std::vector<bool> conv1_wide{false, true};
  std::vector<bool> rconv_shortcut{false, true};
  std::vector<AttentionPlacement> attention{std::begin(kAllPlacements), std::end(kAllPlacements)};

  void validate() const;
  std::size_t size() const { return conv1_wide.size() * rconv_shortcut.size() * attention.size(); }
};

struct SearchConfig {
  std::size_t epochs = 30;
  double weight_lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double arch_lr = 0.1;
  double val_fraction = 0.2;  // share of subjects held out for architecture steps
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::Eq9;
  std::size_t feature_maps = 16;
  std::size_t pool_size = 5;
  std::size_t num_classes = 3;
  std::size_t resolution = 60;

  void validate() const;
};

struct SearchEpochLog {
  std::size_t epoch = 0;
  std::vector<std::vector<double>> coefficients;  // one vector per node
  double train_loss = 0;
  double val_loss = 0;
};

struct RankedArch {
  ArchDescriptor descriptor;
  double weight = 0;
  bool top3 = false;
};

struct SearchResult {
  std::vector<SearchEpochLog> epochs;
  std::vector<RankedArch> ranking;  // descending weight
  std::vector<std::string> train_subjects;
  std::vector<std::string> val_subjects;
};

/// Seeded subject-level split; throws DataError when either side is empty.
void split_subjects(const std::vector<std::string>& subjects, double val_fraction, std::uint64_t seed,
                    std::vector<std::string>& train, std::vector<std::string>& val);

/// Every architecture of the space ranked by the product of its per-node
/// coefficients (ties keep enumeration order).
std::vector<RankedArch> rank_architectures(const SearchSpace& space,
                                           const std::vector<std::vector<double>>& coefficients,
                                           const ArchDescriptor& base);

/// Alternating first-order search: each epoch runs one weight pass over the
/// train subjects, then one architecture pass over the validation subjects.
SearchResult search(const std::vector<data::FlowSample>& samples, const SearchSpace& space,
                    const SearchConfig& cfg);

/// Concrete descriptor at 1-based `rank` of the ranking.
ArchDescriptor derive_architecture(const SearchResult& result, std::size_t rank);

/// JSON-lines: one record per epoch, then a final record with the ranking.
void write_search_report(const SearchResult& result, const SearchSpace& space, const SearchConfig& cfg,
                         const std::string& path);

/// Flow maps whose class signal sits in the centre while the border carries
/// strong, class-independent noise.
std::vector<data::FlowSample> attention_favoring_set(std::size_t subjects, std::size_t per_subject,
                                                      std::size_t resolution, std::uint64_t seed);

}  // namespace rcn
