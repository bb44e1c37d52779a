#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rcn/arch.hpp"
#include "rcn/ops.hpp"

namespace rcn {

struct ConvLayer {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  ConvSpec spec;

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, spec); }
};

/// Fan-in uniform init in +-sqrt(6 / fan_in); bias starts at zero.
ConvLayer make_conv(std::size_t in, std::size_t out, std::size_t kernel, ConvSpec spec, Rng& rng);

struct RconvLayer {
  ConvLayer feedforward;  // state 0, 1x1
  ConvLayer recurrent;    // states 1..n, 3x3, shared
  BatchNorm2d bn_feedforward;
  std::vector<BatchNorm2d> bn_recurrent;  // one shared, or one per state
};

/// Applied to every raw state output F_n (n = 0 for the feed-forward state).
using StatePost = std::function<Tensor(std::size_t state, const Tensor& raw)>;

/// Unrolled recurrent convolution.
///   state 0:   F_0 = post(0, W0 * x + b0)
///   basic:     F_n = post(n, W * (x + F_{n-1}) + b)
///   shortcut:  Fhat_0 = x, Fhat_n = Fhat_{n-1} + F_{n-1}, F_n = post(n, W * Fhat_n + b)
/// Returns F_states.
Tensor rconv_forward(const Tensor& x, const ConvLayer& feedforward, const ConvLayer& recurrent,
                     bool shortcut, std::size_t states, const StatePost& post);

/// Parameter-free attention. P = avgpool(X, K); M = relu(sum_i sum_j W_i[j] . P[j]),
/// divided by its spatial max (all ones when that max <= 1e-8), then bilinearly
/// upsampled to X's spatial size. Classifier weights [C, M*K*K] are constants here.
Tensor attention_map(const Tensor& features, const Tensor& classifier_weight, std::size_t pool_size);

/// Element-wise product broadcast over channels.
Tensor apply_attention(const Tensor& features, const Tensor& map);

/// Class activation map for one class per sample: sum_j W_c[j] . avgpool(X, K)[j],
/// returned at K x K. No normalization.
Tensor class_activation_map(const Tensor& features, const Tensor& classifier_weight,
                            std::size_t pool_size, std::span<const int> classes);

struct FeatureTaps {
  Tensor conv1;       // after conv1 block (and attention, if placed there)
  Tensor rconv;       // first recurrent layer output before pooling
  Tensor final;       // features fed to adaptive pooling
  Tensor pooled;      // [N, M, K, K]
  Tensor attention;   // last attention map applied, if any
};

struct ForwardResult {
  Tensor logits;
  Tensor probs;
  FeatureTaps taps;
};

struct ForwardOptions {
  Real dropout = 0;
  /// Replace every attention map with ones (neutrality checks).
  bool uniform_attention = false;
  /// Classifier weights read by the attention path instead of the live ones.
  /// Lets finite differences see the stop-gradient function.
  const Tensor* attention_weight = nullptr;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Per-channel standardization of flow maps, fitted on a training split.
struct InputNorm {
  std::vector<Real> mean{0, 0, 0};
  std::vector<Real> stddev{1, 1, 1};

  Tensor apply(const Tensor& x) const;
  bool operator==(const InputNorm&) const = default;
};

class RcnModel {
 public:
  RcnModel(ArchDescriptor descriptor, std::uint64_t seed);

  ForwardResult forward(const Tensor& x, bool training, Rng& rng,
                        const ForwardOptions& options = {});

  const ArchDescriptor& descriptor() const { return desc_; }

  /// Learnable tensors in a fixed order with stable names.
  std::vector<NamedTensor> parameters() const;
  /// Non-learnable state (batch-norm running statistics).
  std::vector<NamedTensor> buffers() const;
  std::size_t parameter_count() const;

  const Tensor& classifier_weight() const { return cls_weight_; }

  InputNorm& input_norm() { return norm_; }
  const InputNorm& input_norm() const { return norm_; }

  /// Deep copy sharing no storage with this model.
  RcnModel clone() const;

 private:
  Tensor conv1_block(const Tensor& x, bool training);
  Tensor attend(const Tensor& x, const ForwardOptions& options, FeatureTaps& taps) const;
  Tensor attend_with(const Tensor& target, const Tensor& source, const ForwardOptions& options,
                     FeatureTaps& taps) const;

  ArchDescriptor desc_;
  std::vector<ConvLayer> conv1_;  // one stream, or one per dilation
  BatchNorm2d bn1_;
  std::vector<RconvLayer> rconv_;
  Tensor cls_weight_;
  Tensor cls_bias_;
  InputNorm norm_;
};

RcnModel build_named(ModelKind kind, std::size_t feature_maps, std::size_t pool_size,
                     std::size_t num_classes, std::size_t resolution, std::uint64_t seed);

/// Spatial extent of the features entering adaptive pooling for a descriptor.
std::size_t final_feature_extent(const ArchDescriptor& d);

}  // namespace rcn
