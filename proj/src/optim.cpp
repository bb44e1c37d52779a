#include "rcn/optim.hpp"

namespace rcn {

Sgd::Sgd(std::vector<Tensor> params, SgdConfig config)
    : params_(std::move(params)), config_(config) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), Real(0));
}

void Sgd::step() {
  const Real lr = config_.learning_rate, m = config_.momentum, wd = config_.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto w = p.data();
    auto& v = velocity_[k];
    const bool has_grad = p.has_grad();
    auto g = has_grad ? p.grad() : std::span<Real>{};
    for (std::size_t i = 0; i < w.size(); ++i) {
      const Real gi = has_grad ? g[i] : Real(0);
      v[i] = m * v[i] + gi + wd * w[i];
      w[i] -= lr * v[i];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace rcn
