#include "rcn/search.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "rcn/error.hpp"
#include "rcn/model.hpp"
#include "rcn/optim.hpp"

namespace rcn {

using json = nlohmann::json;

namespace {

Tensor mix(const std::vector<Tensor>& outs, const Tensor& coef) {
  Tensor acc = scale_by(outs[0], select(coef, 0));
  for (std::size_t i = 1; i < outs.size(); ++i) acc = add(acc, scale_by(outs[i], select(coef, i)));
  return acc;
}

}  // namespace

Tensor mixed_forward(const std::vector<Tensor>& outs, const Tensor& alpha) {
  if (outs.empty() || alpha.rank() != 1 || alpha.numel() != outs.size()) {
    throw ShapeError("mixed_forward: need one positive weight per candidate");
  }
  for (const auto& o : outs)
    if (o.shape() != outs[0].shape()) {
      throw ShapeError("mixed_forward: candidate shapes differ: " + shape_str(outs[0].shape()) + " vs " +
                       shape_str(o.shape()));
    }
  for (Real a : alpha.data())
    if (!(a > 0)) throw NumericError("mixed_forward: weights must be positive");
  return mix(outs, normalize_sum(alpha));
}

Tensor mixing_coefficients(const Tensor& theta) { return normalize_sum(softplus(theta)); }

void SearchSpace::validate() const {
  if (conv1_wide.empty() || rconv_shortcut.empty() || attention.empty()) {
    throw UsageError("search space: every node needs at least one candidate");
  }
  if (std::set<bool>(conv1_wide.begin(), conv1_wide.end()).size() != conv1_wide.size() ||
      std::set<bool>(rconv_shortcut.begin(), rconv_shortcut.end()).size() != rconv_shortcut.size() ||
      std::set<AttentionPlacement>(attention.begin(), attention.end()).size() != attention.size()) {
    throw UsageError("search space: duplicate candidates");
  }
}

void SearchConfig::validate() const {
  if (epochs == 0 || batch_size == 0) throw UsageError("search: epochs and batch size must be >= 1");
  if (!(weight_lr > 0) || !(arch_lr > 0)) throw UsageError("search: learning rates must be positive");
  if (!(val_fraction > 0 && val_fraction < 1)) throw UsageError("search: val_fraction must lie in (0,1)");
}

void split_subjects(const std::vector<std::string>& subjects, double val_fraction, std::uint64_t seed,
                    std::vector<std::string>& train, std::vector<std::string>& val) {
  std::vector<std::string> order(subjects);
  std::sort(order.begin(), order.end());
  order.erase(std::unique(order.begin(), order.end()), order.end());
  Rng rng(seed ^ 0x6a09e667f3bcc909ull);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = std::size_t(std::lround(val_fraction * double(order.size())));
  val.assign(order.begin(), order.begin() + long(std::min(n_val, order.size())));
  train.assign(order.begin() + long(val.size()), order.end());
  if (train.empty() || val.empty()) {
    throw DataError("search: degenerate subject split (" + std::to_string(train.size()) + " train, " +
                    std::to_string(val.size()) + " validation)");
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
}

std::vector<RankedArch> rank_architectures(const SearchSpace& space,
                                           const std::vector<std::vector<double>>& coef,
                                           const ArchDescriptor& base) {
  space.validate();
  if (coef.size() != 3 || coef[0].size() != space.conv1_wide.size() ||
      coef[1].size() != space.rconv_shortcut.size() || coef[2].size() != space.attention.size()) {
    throw ShapeError("rank_architectures: coefficient layout does not match the space");
  }
  std::vector<RankedArch> out;
  for (std::size_t a = 0; a < space.conv1_wide.size(); ++a)
    for (std::size_t b = 0; b < space.rconv_shortcut.size(); ++b)
      for (std::size_t c = 0; c < space.attention.size(); ++c) {
        ArchDescriptor d = base;
        d.kind = ModelKind::Custom;
        d.conv1_wide = space.conv1_wide[a];
        d.rconv_shortcut = space.rconv_shortcut[b];
        d.attention = space.attention[c];
        out.push_back({canonicalize(d), coef[0][a] * coef[1][b] * coef[2][c], false});
      }
  std::stable_sort(out.begin(), out.end(), [](const auto& x, const auto& y) { return x.weight > y.weight; });
  for (std::size_t i = 0; i < std::min<std::size_t>(3, out.size()); ++i) out[i].top3 = true;
  return out;
}

ArchDescriptor derive_architecture(const SearchResult& result, std::size_t rank) {
  if (rank == 0 || rank > result.ranking.size()) {
    throw UsageError("derive_architecture: rank " + std::to_string(rank) + " outside 1.." +
                     std::to_string(result.ranking.size()));
  }
  return result.ranking[rank - 1].descriptor;
}

namespace {

Tensor pool_or_pass(const Tensor& x) {
  return (x.dim(2) >= 2 && x.dim(3) >= 2) ? maxpool2d(x, 2, 2) : x;
}

/// Supernet holding every candidate of the space.
class MixedNet {
 public:
  MixedNet(const SearchSpace& space, const SearchConfig& cfg) : space_(space), cfg_(cfg) {
    Rng rng(cfg.seed);
    const std::size_t M = cfg.feature_maps, K = cfg.pool_size, C = cfg.num_classes;
    const std::vector<std::size_t> dil{1, 2, 3};
    for (bool wide : space.conv1_wide) {
      Conv1 c{{}, BatchNorm2d(M)};
      if (wide) {
        const auto split = wide_channel_split(M, dil.size());
        for (std::size_t s = 0; s < split.size(); ++s)
          c.streams.push_back(make_conv(3, split[s], 3, ConvSpec{3, dil[s], dil[s]}, rng));
      } else {
        c.streams.push_back(make_conv(3, M, 3, ConvSpec{3, 1, 1}, rng));
      }
      conv1_.push_back(std::move(c));
    }
    for (bool sc : space.rconv_shortcut) {
      rconv_.push_back({make_conv(M, M, 1, ConvSpec{1, 0, 1}, rng), make_conv(M, M, 3, ConvSpec{1, 1, 1}, rng),
                        BatchNorm2d(M), BatchNorm2d(M), sc});
    }
    const std::size_t D = M * K * K;
    const double bound = std::sqrt(6.0 / double(D));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<Real> w(C * D);
    for (auto& v : w) v = Real(dist(rng));
    cls_w_ = Tensor(Shape{C, D}, std::move(w), true);
    cls_b_ = Tensor(Shape{C}, Real(0), true);
    theta_ = {Tensor(Shape{space.conv1_wide.size()}, Real(0), true),
              Tensor(Shape{space.rconv_shortcut.size()}, Real(0), true),
              Tensor(Shape{space.attention.size()}, Real(0), true)};
  }

  std::vector<Tensor> weights() const {
    std::vector<Tensor> out;
    for (const auto& c : conv1_) {
      for (const auto& s : c.streams) {
        out.push_back(s.weight);
        out.push_back(s.bias);
      }
      out.push_back(c.bn.gamma);
      out.push_back(c.bn.beta);
    }
    for (const auto& r : rconv_) {
      for (const auto* t : {&r.ff.weight, &r.ff.bias, &r.rec.weight, &r.rec.bias, &r.bn_ff.gamma, &r.bn_ff.beta,
                            &r.bn_rec.gamma, &r.bn_rec.beta})
        out.push_back(*t);
    }
    out.push_back(cls_w_);
    out.push_back(cls_b_);
    return out;
  }
  const std::vector<Tensor>& theta() const { return theta_; }

  std::vector<std::vector<double>> coefficients() const {
    NoGradGuard g;
    std::vector<std::vector<double>> out;
    for (const auto& t : theta_) {
      const Tensor c = mixing_coefficients(t);
      out.emplace_back(c.data().begin(), c.data().end());
    }
    return out;
  }

  Tensor forward(const Tensor& x, bool training, Rng& rng, Real drop) {
    using A = AttentionPlacement;
    std::vector<Tensor> coef;
    for (const auto& t : theta_) coef.push_back(mixing_coefficients(t));

    std::vector<Tensor> outs;
    for (auto& c : conv1_) {
      std::vector<Tensor> s;
      for (const auto& st : c.streams) s.push_back(st(x));
      Tensor f = s.size() == 1 ? s[0] : concat_channels(s);
      outs.push_back(relu(batchnorm2d(f, c.bn, training)));
    }
    Tensor h = mix(outs, coef[0]);
    h = relax(h, h, A::AfterConv1, coef[2]);
    h = dropout(h, drop, training, rng);

    outs.clear();
    for (auto& r : rconv_) {
      StatePost post = [&](std::size_t state, const Tensor& raw) {
        Tensor f = relu(batchnorm2d(raw, state == 0 ? r.bn_ff : r.bn_rec, training));
        if (state == 0) f = relax(f, f, A::AtRconvState0, coef[2]);
        if (state == 1) f = relax(f, f, A::AfterRconvState1, coef[2]);
        if (state == 2) f = relax(f, f, A::AfterRconvState2, coef[2]);
        return f;
      };
      outs.push_back(rconv_forward(h, r.ff, r.rec, r.shortcut, 3, post));
    }
    Tensor out = mix(outs, coef[1]);
    out = relax(out, out, A::AfterRconv, coef[2]);
    out = relax(out, h, A::ParallelRconv, coef[2]);
    out = dropout(out, drop, training, rng);
    out = pool_or_pass(out);
    const std::size_t N = x.dim(0), K = cfg_.pool_size, M = cfg_.feature_maps;
    Tensor flat = reshape(adaptive_avgpool2d(out, K), Shape{N, M * K * K});
    return linear(flat, cls_w_, cls_b_);
  }

 private:
  struct Conv1 {
    std::vector<ConvLayer> streams;
    BatchNorm2d bn;
  };
  struct Rconv {
    ConvLayer ff, rec;
    BatchNorm2d bn_ff, bn_rec;
    bool shortcut;
  };

  // x + c * (attend(x) - x): the placement's share of the attention node.
  Tensor relax(const Tensor& x, const Tensor& source, AttentionPlacement p, const Tensor& coef) const {
    const auto it = std::find(space_.attention.begin(), space_.attention.end(), p);
    if (it == space_.attention.end()) return x;
    const Tensor c = select(coef, std::size_t(it - space_.attention.begin()));
    const Tensor att = apply_attention(x, attention_map(source, cls_w_, cfg_.pool_size));
    return add(x, scale_by(sub(att, x), c));
  }

  SearchSpace space_;
  SearchConfig cfg_;
  std::vector<Conv1> conv1_;
  std::vector<Rconv> rconv_;
  Tensor cls_w_, cls_b_;
  std::vector<Tensor> theta_;
};

std::vector<data::FlowSample> normalized(const std::vector<const data::FlowSample*>& src, const InputNorm& n) {
  std::vector<data::FlowSample> out;
  for (const auto* s : src) {
    data::FlowSample c = *s;
    for (std::size_t i = 0; i < c.map.values.size(); ++i)
      c.map.values[i] = float((c.map.values[i] - n.mean[i % 3]) / n.stddev[i % 3]);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

SearchResult search(const std::vector<data::FlowSample>& samples, const SearchSpace& space,
                    const SearchConfig& cfg) {
  space.validate();
  cfg.validate();
  SearchResult result;
  std::vector<std::string> subjects;
  for (const auto& s : samples) subjects.push_back(s.subject);
  split_subjects(subjects, cfg.val_fraction, cfg.seed, result.train_subjects, result.val_subjects);

  std::vector<const data::FlowSample*> train_raw, val_raw;
  for (const auto& s : samples) {
    if (s.map.height != cfg.resolution || s.map.width != cfg.resolution) {
      throw DataError("search: sample " + s.sample_id + " is not at resolution " + std::to_string(cfg.resolution));
    }
    const bool in_val = std::binary_search(result.val_subjects.begin(), result.val_subjects.end(), s.subject);
    (in_val ? val_raw : train_raw).push_back(&s);
  }
  const InputNorm norm = fit_input_norm(train_raw);
  const auto train = normalized(train_raw, norm), val = normalized(val_raw, norm);

  MixedNet net(space, cfg);
  Sgd wopt(net.weights(), {Real(cfg.weight_lr), Real(cfg.momentum), Real(cfg.weight_decay)});
  Sgd aopt(net.theta(), {Real(cfg.arch_lr), Real(0.9), Real(0)});
  Rng shuffle_rng(cfg.seed ^ 0x5bd1e995a1b2c3d4ull), drop_rng(cfg.seed ^ 0x2545f4914f6cdd1dull);

  auto pass = [&](const std::vector<data::FlowSample>& set, Sgd& opt, Real drop) {
    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::vector<const data::FlowSample*> batch;
      std::vector<int> labels;
      for (std::size_t i = b; i < e; ++i) {
        batch.push_back(&set[order[i]]);
        labels.push_back(set[order[i]].label);
      }
      wopt.zero_grad();
      aopt.zero_grad();
      const Tensor logits = net.forward(batch_tensor(batch), true, drop_rng, drop);
      Tensor loss = cfg.loss == LossKind::Eq9 ? loss_eq9(softmax(logits), labels)
                                                    : softmax_cross_entropy(logits, labels);
      loss.backward();
      opt.step();
      total += double(loss.item()) * double(e - b);
    }
    return total / double(set.size());
  };

  const ArchDescriptor base = [&] {
    ArchDescriptor d;
    d.feature_maps = cfg.feature_maps;
    d.pool_size = cfg.pool_size;
    d.num_classes = cfg.num_classes;
    d.resolution = cfg.resolution;
    return d;
  }();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    SearchEpochLog log;
    log.epoch = epoch;
    log.train_loss = pass(train, wopt, Real(0));
    log.val_loss = pass(val, aopt, Real(0));
    log.coefficients = net.coefficients();
    result.epochs.push_back(std::move(log));
  }
  result.ranking = rank_architectures(space, net.coefficients(), base);
  return result;
}

void write_search_report(const SearchResult& result, const SearchSpace& space, const SearchConfig& cfg,
                         const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write search report " + path);
  json nodes = json::array();
  {
    json n1 = json::array(), n2 = json::array(), n3 = json::array();
    for (bool w : space.conv1_wide) n1.push_back(w ? "conv-w" : "conv");
    for (bool s : space.rconv_shortcut) n2.push_back(s ? "rconv-s" : "rconv");
    for (auto p : space.attention) n3.push_back(std::string(to_string(p)));
    nodes = {n1, n2, n3};
  }
  for (const auto& e : result.epochs) {
    json j{{"kind", "epoch"}, {"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
           {"coefficients", e.coefficients}};
    out << j.dump() << '\n';
  }
  json ranking = json::array();
  for (const auto& r : result.ranking)
    ranking.push_back({{"descriptor", r.descriptor.to_string()}, {"weight", r.weight}, {"top3", r.top3}});
  json fin{{"kind", "final"},
           {"nodes", nodes},
           {"seed", cfg.seed},
           {"epochs", cfg.epochs},
           {"weight_lr", cfg.weight_lr},
           {"arch_lr", cfg.arch_lr},
           {"train_subjects", result.train_subjects},
           {"val_subjects", result.val_subjects},
           {"ranking", ranking}};
  out << fin.dump() << '\n';
  if (!out) throw DataError("write failed for " + path);
}

std::vector<data::FlowSample> attention_favoring_set(std::size_t subjects, std::size_t per_subject,
                                                      std::size_t R, std::uint64_t seed) {
  std::vector<data::FlowSample> out;
  const double border = 0.25;
  char buf[32];
  for (std::size_t s = 0; s < subjects; ++s) {
    for (std::size_t k = 0; k < per_subject; ++k) {
      data::FlowSample smp;
      std::snprintf(buf, sizeof buf, "a%02zu", s + 1);
      smp.subject = buf;
      std::snprintf(buf, sizeof buf, "_e%02zu", k + 1);
      smp.sample_id = smp.subject + buf;
      smp.domain = "contrived";
      smp.label = int(k % 3);
      Rng rng(data::stream_id(seed, smp.sample_id));
      std::normal_distribution<double> N01(0.0, 1.0);
      std::uniform_real_distribution<double> U(0.6, 1.4);
      const double amp = U(rng);
      smp.map.height = smp.map.width = R;
      smp.map.values.assign(R * R * 3, 0.f);
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R; ++x) {
          const double u = (double(x) + 0.5) / double(R), v = (double(y) + 0.5) / double(R);
          const bool edge = u < border || u > 1 - border || v < border || v > 1 - border;
          double vx = 0.1 * N01(rng), vy = 0.1 * N01(rng), vz = 0;
          if (edge) {
            vx += 2.0 * N01(rng);
            vy += 2.0 * N01(rng);
            vz = std::abs(1.5 * N01(rng));
          } else {
            const double g = std::exp(-((u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5)) / (2 * 0.08 * 0.08));
            if (smp.label == 0) vx += amp * g;
            if (smp.label == 1) vy -= amp * g;
            if (smp.label == 2) vx -= amp * g;
            vz = 0.3 * g;
          }
          smp.map.at(y, x, 0) = float(vx);
          smp.map.at(y, x, 1) = float(vy);
          smp.map.at(y, x, 2) = float(vz);
        }
      out.push_back(std::move(smp));
    }
  }
  return out;
}

}  // namespace rcn
