#pragma once

#include <vector>

#include "rcn/tensor.hpp"

namespace rcn {

struct SgdConfig {
  Real learning_rate = Real(1e-4);
  Real momentum = Real(0.9);
  Real weight_decay = Real(5e-4);
};

/// SGD with momentum, weight decay folded into the velocity:
///   v <- m*v + g + wd*w;  w <- w - lr*v
/// Parameters without an accumulated gradient are treated as g = 0.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdConfig config);

  void step();
  void zero_grad();

  const SgdConfig& config() const { return config_; }
  SgdConfig& config() { return config_; }
  const std::vector<std::vector<Real>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor> params_;
  SgdConfig config_;
  std::vector<std::vector<Real>> velocity_;
};

}  // namespace rcn
