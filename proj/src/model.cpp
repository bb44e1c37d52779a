#include "rcn/model.hpp"

#include <cmath>

#include "rcn/error.hpp"

namespace rcn {

ConvLayer make_conv(std::size_t in, std::size_t out, std::size_t kernel, ConvSpec spec, Rng& rng) {
  const std::size_t fan_in = in * kernel * kernel;
  const double bound = std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> w(out * fan_in);
  for (auto& v : w) v = Real(dist(rng));
  return ConvLayer{Tensor(Shape{out, in, kernel, kernel}, std::move(w), true),
                   Tensor(Shape{out}, Real(0), true), spec};
}

Tensor rconv_forward(const Tensor& x, const ConvLayer& feedforward, const ConvLayer& recurrent,
                     bool shortcut, std::size_t states, const StatePost& post) {
  if (x.rank() != 4 || x.dim(1) != feedforward.weight.dim(1)) {
    throw ShapeError("rconv: input " + shape_str(x.shape()) + " does not match feed-forward weights " +
                     shape_str(feedforward.weight.shape()));
  }
  if (recurrent.weight.dim(0) != recurrent.weight.dim(1) ||
      recurrent.weight.dim(0) != feedforward.weight.dim(0) ||
      feedforward.weight.dim(0) != x.dim(1)) {
    throw ShapeError("rconv: recurrent layer must keep the channel count");
  }
  Tensor f = post(0, feedforward(x));
  Tensor carry = x;  // Fhat_{n-1} for the shortcut form
  for (std::size_t n = 1; n <= states; ++n) {
    Tensor input;
    if (shortcut) {
      carry = add(carry, f);
      input = carry;
    } else {
      input = add(x, f);
    }
    f = post(n, recurrent(input));
  }
  return f;
}

Tensor attention_map(const Tensor& features, const Tensor& classifier_weight, std::size_t pool_size) {
  if (features.rank() != 4) throw ShapeError("attention_map: features must be [N,M,H,W]");
  const std::size_t M = features.dim(1), K = pool_size, C = classifier_weight.dim(0);
  if (classifier_weight.dim(1) != M * K * K) {
    throw ShapeError("attention_map: classifier width " + std::to_string(classifier_weight.dim(1)) +
                     " cannot be reshaped to [" + std::to_string(M) + "," + std::to_string(K) + "," +
                     std::to_string(K) + "]");
  }
  std::vector<Real> summed(M * K * K, Real(0));
  auto w = classifier_weight.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < M * K * K; ++i) summed[i] += w[c * M * K * K + i];
  Tensor pooled = adaptive_avgpool2d(features, K);
  Tensor raw = relu(channel_weighted_sum(pooled, summed));
  Tensor norm = normalize_by_max(raw);
  return upsample_bilinear(norm, features.dim(2), features.dim(3));
}

Tensor apply_attention(const Tensor& features, const Tensor& map) { return mul_spatial(features, map); }

Tensor class_activation_map(const Tensor& features, const Tensor& classifier_weight,
                            std::size_t pool_size, std::span<const int> classes) {
  const std::size_t N = features.dim(0), M = features.dim(1), K = pool_size;
  if (classes.size() != N) throw ShapeError("class_activation_map: one class per sample required");
  if (classifier_weight.dim(1) != M * K * K) throw ShapeError("class_activation_map: width mismatch");
  NoGradGuard no_grad;
  Tensor pooled = adaptive_avgpool2d(features, K);
  std::vector<Real> out(N * K * K, Real(0));
  auto p = pooled.data();
  auto w = classifier_weight.data();
  for (std::size_t n = 0; n < N; ++n) {
    const Real* wc = w.data() + std::size_t(classes[n]) * M * K * K;
    for (std::size_t j = 0; j < M; ++j)
      for (std::size_t i = 0; i < K * K; ++i)
        out[n * K * K + i] += wc[j * K * K + i] * p[(n * M + j) * K * K + i];
  }
  return Tensor(Shape{N, 1, K, K}, std::move(out));
}

Tensor InputNorm::apply(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != mean.size()) throw ShapeError("input norm: channel mismatch");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<Real> out(x.numel());
  auto d = x.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (n * C + c) * HW + i;
        out[k] = (d[k] - mean[c]) / stddev[c];
      }
  return Tensor(x.shape(), std::move(out));
}

namespace {

constexpr ConvSpec kConv1Spec{3, 1, 1};
constexpr ConvSpec kFeedforwardSpec{1, 0, 1};
constexpr ConvSpec kRecurrentSpec{1, 1, 1};

// Max-pool is skipped once the map is smaller than the 2x2 window.
Tensor pool_or_pass(const Tensor& x) {
  return (x.dim(2) >= 2 && x.dim(3) >= 2) ? maxpool2d(x, 2, 2) : x;
}

}  // namespace

std::size_t final_feature_extent(const ArchDescriptor& d) {
  std::size_t e = conv_out_extent(d.resolution, 3, kConv1Spec);
  for (std::size_t l = 0; l < d.rconv_layers(); ++l) e = e >= 2 ? (e - 2) / 2 + 1 : e;
  return e;
}

RcnModel::RcnModel(ArchDescriptor descriptor, std::uint64_t seed) : desc_(std::move(descriptor)) {
  desc_.validate();
  Rng rng(seed);
  const std::size_t M = desc_.feature_maps, K = desc_.pool_size, C = desc_.num_classes;
  if (desc_.conv1_wide) {
    const auto split = wide_channel_split(M, desc_.dilations.size());
    for (std::size_t s = 0; s < split.size(); ++s) {
      const std::size_t d = desc_.dilations[s];
      conv1_.push_back(make_conv(3, split[s], 3, ConvSpec{3, d, d}, rng));
    }
  } else {
    conv1_.push_back(make_conv(3, M, 3, kConv1Spec, rng));
  }
  bn1_ = BatchNorm2d(M);
  for (std::size_t l = 0; l < desc_.rconv_layers(); ++l) {
    RconvLayer layer{make_conv(M, M, 1, kFeedforwardSpec, rng), make_conv(M, M, 3, kRecurrentSpec, rng),
                     BatchNorm2d(M), {}};
    const std::size_t bn_count = desc_.per_state_bn ? desc_.rconv_states : 1;
    for (std::size_t i = 0; i < bn_count; ++i) layer.bn_recurrent.emplace_back(M);
    rconv_.push_back(std::move(layer));
  }
  const std::size_t D = M * K * K;
  const double bound = std::sqrt(6.0 / double(D));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> w(C * D);
  for (auto& v : w) v = Real(dist(rng));
  cls_weight_ = Tensor(Shape{C, D}, std::move(w), true);
  cls_bias_ = Tensor(Shape{C}, Real(0), true);
}

Tensor RcnModel::attend_with(const Tensor& target, const Tensor& source, const ForwardOptions& options,
                             FeatureTaps& taps) const {
  Tensor map;
  if (options.uniform_attention) {
    map = Tensor(Shape{source.dim(0), 1, source.dim(2), source.dim(3)}, Real(1));
  } else {
    map = attention_map(source, options.attention_weight ? *options.attention_weight : cls_weight_, desc_.pool_size);
  }
  taps.attention = map;
  return apply_attention(target, map);
}

Tensor RcnModel::attend(const Tensor& x, const ForwardOptions& options, FeatureTaps& taps) const {
  return attend_with(x, x, options, taps);
}

Tensor RcnModel::conv1_block(const Tensor& x, bool training) {
  Tensor f;
  if (conv1_.size() == 1) {
    f = conv1_[0](x);
  } else {
    std::vector<Tensor> streams;
    for (const auto& c : conv1_) streams.push_back(c(x));
    f = concat_channels(streams);
  }
  return relu(batchnorm2d(f, bn1_, training));
}

ForwardResult RcnModel::forward(const Tensor& x, bool training, Rng& rng, const ForwardOptions& options) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != desc_.resolution || x.dim(3) != desc_.resolution) {
    throw ShapeError("forward: expected [N,3," + std::to_string(desc_.resolution) + "," +
                     std::to_string(desc_.resolution) + "], got " + shape_str(x.shape()));
  }
  using A = AttentionPlacement;
  ForwardResult result;
  FeatureTaps& taps = result.taps;

  Tensor h = conv1_block(x, training);
  if (desc_.attention == A::AfterConv1) h = attend(h, options, taps);
  h = dropout(h, options.dropout, training, rng);
  taps.conv1 = h;

  for (std::size_t l = 0; l < rconv_.size(); ++l) {
    auto& layer = rconv_[l];
    const bool first = l == 0;
    StatePost post = [&](std::size_t state, const Tensor& raw) {
      Tensor f;
      if (state == 0) {
        f = relu(batchnorm2d(raw, layer.bn_feedforward, training));
      } else {
        auto& bn = layer.bn_recurrent[desc_.per_state_bn ? state - 1 : 0];
        f = relu(batchnorm2d(raw, bn, training));
      }
      if (first && ((state == 0 && desc_.attention == A::AtRconvState0) ||
                    (state == 1 && desc_.attention == A::AfterRconvState1) ||
                    (state == 2 && desc_.attention == A::AfterRconvState2))) {
        f = attend(f, options, taps);
      }
      return f;
    };
    Tensor out = rconv_forward(h, layer.feedforward, layer.recurrent, desc_.rconv_shortcut,
                               desc_.rconv_states, post);
    if (first && desc_.attention == A::AfterRconv) out = attend(out, options, taps);
    if (first && desc_.attention == A::ParallelRconv) out = attend_with(out, h, options, taps);
    out = dropout(out, options.dropout, training, rng);
    if (first) taps.rconv = out;
    h = pool_or_pass(out);
  }

  taps.final = h;
  const std::size_t N = x.dim(0), K = desc_.pool_size, M = desc_.feature_maps;
  taps.pooled = adaptive_avgpool2d(h, K);
  Tensor flat = reshape(taps.pooled, Shape{N, M * K * K});
  result.logits = linear(flat, cls_weight_, cls_bias_);
  result.probs = softmax(result.logits);
  return result;
}

std::vector<NamedTensor> RcnModel::parameters() const {
  std::vector<NamedTensor> out;
  if (conv1_.size() == 1) {
    out.push_back({"conv1.weight", conv1_[0].weight});
    out.push_back({"conv1.bias", conv1_[0].bias});
  } else {
    for (std::size_t s = 0; s < conv1_.size(); ++s) {
      const std::string p = "conv1.d" + std::to_string(desc_.dilations[s]);
      out.push_back({p + ".weight", conv1_[s].weight});
      out.push_back({p + ".bias", conv1_[s].bias});
    }
  }
  out.push_back({"bn1.gamma", bn1_.gamma});
  out.push_back({"bn1.beta", bn1_.beta});
  for (std::size_t l = 0; l < rconv_.size(); ++l) {
    const auto& r = rconv_[l];
    const std::string p = "rconv" + std::to_string(l);
    out.push_back({p + ".ff.weight", r.feedforward.weight});
    out.push_back({p + ".ff.bias", r.feedforward.bias});
    out.push_back({p + ".bn_ff.gamma", r.bn_feedforward.gamma});
    out.push_back({p + ".bn_ff.beta", r.bn_feedforward.beta});
    out.push_back({p + ".rec.weight", r.recurrent.weight});
    out.push_back({p + ".rec.bias", r.recurrent.bias});
    for (std::size_t i = 0; i < r.bn_recurrent.size(); ++i) {
      const std::string b = p + ".bn_rec" + (r.bn_recurrent.size() > 1 ? std::to_string(i + 1) : "");
      out.push_back({b + ".gamma", r.bn_recurrent[i].gamma});
      out.push_back({b + ".beta", r.bn_recurrent[i].beta});
    }
  }
  out.push_back({"cls.weight", cls_weight_});
  out.push_back({"cls.bias", cls_bias_});
  return out;
}

std::vector<NamedTensor> RcnModel::buffers() const {
  std::vector<NamedTensor> out;
  auto push_bn = [&](const std::string& p, const BatchNorm2d& bn) {
    out.push_back({p + ".running_mean", bn.running_mean});
    out.push_back({p + ".running_var", bn.running_var});
  };
  push_bn("bn1", bn1_);
  for (std::size_t l = 0; l < rconv_.size(); ++l) {
    const auto& r = rconv_[l];
    const std::string p = "rconv" + std::to_string(l);
    push_bn(p + ".bn_ff", r.bn_feedforward);
    for (std::size_t i = 0; i < r.bn_recurrent.size(); ++i) {
      push_bn(p + ".bn_rec" + (r.bn_recurrent.size() > 1 ? std::to_string(i + 1) : ""), r.bn_recurrent[i]);
    }
  }
  return out;
}

std::size_t RcnModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

RcnModel RcnModel::clone() const {
  RcnModel copy = *this;
  auto deep = [](Tensor& t) { t = t.clone(); };
  auto deep_bn = [&](BatchNorm2d& bn) {
    deep(bn.gamma);
    deep(bn.beta);
    deep(bn.running_mean);
    deep(bn.running_var);
  };
  for (auto& c : copy.conv1_) {
    deep(c.weight);
    deep(c.bias);
  }
  deep_bn(copy.bn1_);
  for (auto& r : copy.rconv_) {
    deep(r.feedforward.weight);
    deep(r.feedforward.bias);
    deep(r.recurrent.weight);
    deep(r.recurrent.bias);
    deep_bn(r.bn_feedforward);
    for (auto& bn : r.bn_recurrent) deep_bn(bn);
  }
  deep(copy.cls_weight_);
  deep(copy.cls_bias_);
  return copy;
}

RcnModel build_named(ModelKind kind, std::size_t feature_maps, std::size_t pool_size,
                     std::size_t num_classes, std::size_t resolution, std::uint64_t seed) {
  return RcnModel(named_descriptor(kind, feature_maps, pool_size, num_classes, resolution), seed);
}

}  // namespace rcn
