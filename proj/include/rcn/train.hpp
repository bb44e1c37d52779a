#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rcn/flow_cache.hpp"
#include "rcn/model.hpp"

namespace rcn {

enum class LossKind { Eq9, SoftmaxCrossEntropy };

std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

struct TrainConfig {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double dropout = 0.5;
  std::size_t max_epochs = 500;  // one epoch = one pass over the training split
  double loss_stop = 0.5;        // stop after the first epoch whose mean loss is below this; inf disables
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::Eq9;

  void validate() const;
  /// Applies one key=value setting; returns false for an unknown key.
  bool set(const std::string& key, const std::string& value);
  bool operator==(const TrainConfig&) const = default;
};

struct TrainLog {
  std::vector<double> epoch_loss;
  bool stopped_early = false;
  double seconds = 0;
};

struct TrainResult {
  RcnModel model;
  TrainLog log;
};

/// Stacks flow maps into [N,3,R,R] (channel-major).
Tensor batch_tensor(const std::vector<const data::FlowSample*>& samples);

/// Per-channel mean and standard deviation over every pixel of the split.
InputNorm fit_input_norm(const std::vector<const data::FlowSample*>& samples);

Tensor compute_loss(const ForwardResult& out, std::span<const int> labels, LossKind kind);

/// Trains a fresh model (initialized from cfg.seed) on the split. Throws
/// NumericError when the loss stops being finite.
TrainResult train_single(const std::vector<const data::FlowSample*>& train, const ArchDescriptor& desc,
                         const TrainConfig& cfg);

/// Eval-mode class predictions (argmax, first on ties).
std::vector<int> predict(RcnModel& model, const std::vector<const data::FlowSample*>& samples,
                         std::size_t batch_size = 32);

}  // namespace rcn
