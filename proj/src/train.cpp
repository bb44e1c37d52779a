#include "rcn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "rcn/error.hpp"
#include "rcn/optim.hpp"

namespace rcn {

std::string_view to_string(LossKind kind) { return kind == LossKind::Eq9 ? "eq9" : "softmax_ce"; }

LossKind parse_loss_kind(std::string_view name) {
  if (name == "eq9") return LossKind::Eq9;
  if (name == "softmax_ce") return LossKind::SoftmaxCrossEntropy;
  throw UsageError("unknown loss '" + std::string(name) + "' (expected eq9 or softmax_ce)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !(momentum >= 0 && momentum < 1) || !(weight_decay >= 0)) {
    throw UsageError("train config: lr must be > 0, momentum in [0,1), weight decay >= 0");
  }
  if (!(dropout >= 0 && dropout < 1)) throw UsageError("train config: dropout must lie in [0,1)");
  if (max_epochs == 0 || batch_size == 0) throw UsageError("train config: epochs and batch size must be >= 1");
}

bool TrainConfig::set(const std::string& key, const std::string& value) {
  try {
    if (key == "lr") learning_rate = std::stod(value);
    else if (key == "momentum") momentum = std::stod(value);
    else if (key == "weight_decay") weight_decay = std::stod(value);
    else if (key == "dropout") dropout = std::stod(value);
    else if (key == "max_epochs" || key == "epochs") max_epochs = std::stoul(value);
    else if (key == "loss_stop") loss_stop = value == "inf" ? INFINITY : std::stod(value);
    else if (key == "batch_size") batch_size = std::stoul(value);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "loss") loss = parse_loss_kind(value);
    else return false;
  } catch (const std::logic_error&) {
    throw UsageError("bad value '" + value + "' for " + key);
  }
  return true;
}

Tensor batch_tensor(const std::vector<const data::FlowSample*>& samples) {
  if (samples.empty()) throw ShapeError("batch_tensor: empty batch");
  const std::size_t H = samples[0]->map.height, W = samples[0]->map.width;
  std::vector<Real> v(samples.size() * 3 * H * W);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& m = samples[n]->map;
    if (m.height != H || m.width != W) throw ShapeError("batch_tensor: mixed resolutions");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) v[((n * 3 + c) * H + y) * W + x] = Real(m.at(y, x, c));
  }
  return Tensor(Shape{samples.size(), 3, H, W}, std::move(v));
}

InputNorm fit_input_norm(const std::vector<const data::FlowSample*>& samples) {
  InputNorm norm;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    std::size_t n = 0;
    for (const auto* smp : samples) {
      const auto& v = smp->map.values;
      for (std::size_t i = c; i < v.size(); i += 3) {
        s += v[i];
        s2 += double(v[i]) * v[i];
        ++n;
      }
    }
    if (n == 0) continue;
    const double mean = s / double(n);
    const double var = std::max(0.0, s2 / double(n) - mean * mean);
    norm.mean[c] = Real(mean);
    norm.stddev[c] = Real(std::max(std::sqrt(var), 1e-6));
  }
  return norm;
}

Tensor compute_loss(const ForwardResult& out, std::span<const int> labels, LossKind kind) {
  return kind == LossKind::Eq9 ? loss_eq9(out.probs, labels) : softmax_cross_entropy(out.logits, labels);
}

TrainResult train_single(const std::vector<const data::FlowSample*>& train, const ArchDescriptor& desc,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw DataError("train_single: empty training split");
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult result{RcnModel(desc, cfg.seed), {}};
  RcnModel& model = result.model;
  model.input_norm() = fit_input_norm(train);

  std::vector<Tensor> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  Sgd opt(params, {Real(cfg.learning_rate), Real(cfg.momentum), Real(cfg.weight_decay)});
  Rng shuffle_rng(cfg.seed ^ 0x5bd1e995a1b2c3d4ull);
  Rng dropout_rng(cfg.seed ^ 0x2545f4914f6cdd1dull);
  ForwardOptions fopts;
  fopts.dropout = Real(cfg.dropout);

  // Normalize once; batches are gathered from the normalized copy.
  std::vector<data::FlowSample> normed;
  normed.reserve(train.size());
  const auto& norm = model.input_norm();
  for (const auto* s : train) {
    data::FlowSample c = *s;
    for (std::size_t i = 0; i < c.map.values.size(); ++i) {
      const std::size_t ch = i % 3;
      c.map.values[i] = float((c.map.values[i] - norm.mean[ch]) / norm.stddev[ch]);
    }
    normed.push_back(std::move(c));
  }

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::vector<const data::FlowSample*> batch;
      std::vector<int> labels;
      for (std::size_t i = b; i < e; ++i) {
        batch.push_back(&normed[order[i]]);
        labels.push_back(normed[order[i]].label);
      }
      opt.zero_grad();
      Tensor loss;
      try {
        const auto out = model.forward(batch_tensor(batch), true, dropout_rng, fopts);
        loss = compute_loss(out, labels, cfg.loss);
      } catch (const NumericError& err) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ": " + err.what());
      }
      loss.backward();
      opt.step();
      total += double(loss.item()) * double(e - b);
    }
    const double mean = total / double(order.size());
    if (!std::isfinite(mean)) throw NumericError("training diverged at epoch " + std::to_string(epoch + 1));
    result.log.epoch_loss.push_back(mean);
    if (std::isfinite(cfg.loss_stop) && mean < cfg.loss_stop) {
      result.log.stopped_early = true;
      break;
    }
  }
  result.log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::vector<int> predict(RcnModel& model, const std::vector<const data::FlowSample*>& samples,
                         std::size_t batch_size) {
  NoGradGuard guard;
  Rng rng(0);
  std::vector<int> out;
  for (std::size_t b = 0; b < samples.size(); b += batch_size) {
    const std::size_t e = std::min(samples.size(), b + batch_size);
    std::vector<const data::FlowSample*> batch(samples.begin() + long(b), samples.begin() + long(e));
    const auto res = model.forward(model.input_norm().apply(batch_tensor(batch)), false, rng);
    const std::size_t C = res.probs.dim(1);
    for (std::size_t n = 0; n < e - b; ++n) {
      const auto row = res.logits.data().subspan(n * C, C);
      out.push_back(int(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

}  // namespace rcn
