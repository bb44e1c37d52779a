#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "rcn/tensor.hpp"

namespace rcn {

using Rng = std::mt19937_64;

// ---- element-wise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
/// x times a one-element tensor; differentiable in both.
Tensor scale_by(const Tensor& x, const Tensor& factor);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// One element of x as a one-element tensor.
Tensor select(const Tensor& x, std::size_t index);
/// x / sum(x) over a 1-D tensor.
Tensor normalize_sum(const Tensor& x);

// ---- convolution -----------------------------------------------------------

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

/// Output extent floor((n + 2p - d(k-1) - 1)/s) + 1; throws ShapeError when < 1.
std::size_t conv_out_extent(std::size_t n, std::size_t kernel, const ConvSpec& spec);

/// Cross-correlation of x[N,Cin,H,W] with weight[Cout,Cin,k,k] plus bias[Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);

// ---- normalization ---------------------------------------------------------

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  Real eps = Real(1e-5);
  Real momentum = Real(0.1);

  explicit BatchNorm2d(std::size_t channels = 1);
};

Tensor batchnorm2d(const Tensor& x, BatchNorm2d& state, bool training);

// ---- pooling and resampling ------------------------------------------------

Tensor maxpool2d(const Tensor& x, std::size_t kernel = 2, std::size_t stride = 2);
Tensor adaptive_avgpool2d(const Tensor& x, std::size_t out_size);
/// Half-pixel bilinear resampling of x[N,C,H,W] to [N,C,out_h,out_w].
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor concat_channels(const std::vector<Tensor>& parts);

// ---- spatial weighting -----------------------------------------------------

/// x[N,C,H,W] * map[N,1,H,W], broadcast over channels.
Tensor mul_spatial(const Tensor& x, const Tensor& map);
/// out[n,0,h,w] = sum_c weights[c,h,w] * x[n,c,h,w]; weights are constants.
Tensor channel_weighted_sum(const Tensor& x, std::span<const Real> weights);
/// Divides each sample of x[N,1,H,W] by its spatial max; all-ones where max <= floor.
Tensor normalize_by_max(const Tensor& x, Real floor = Real(1e-8));

// ---- classifier head -------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Row-wise softmax of x[N,C], max-subtracted.
Tensor softmax(const Tensor& x);
/// Inverted dropout. Identity when !training or ratio == 0.
Tensor dropout(const Tensor& x, Real ratio, bool training, Rng& rng);

// ---- losses ----------------------------------------------------------------

inline constexpr Real kProbClamp = Real(1e-7);

/// Class-wise binary cross-entropy on probabilities p[N,C]:
/// L_i = -sum_c [y_c log p_c + (1-y_c) log(1-p_c)], averaged over the batch.
Tensor loss_eq9(const Tensor& probs, std::span<const int> labels);
/// Mean softmax cross-entropy on logits[N,C].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace rcn
