#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "rcn/tensor.hpp"

namespace rcn {

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // stencil crossed a kink (branch fingerprint changed)
};

/// Compares reverse-mode gradients of the scalar f() with respect to every
/// element of `inputs` against central differences (f(x+h) - f(x-h)) / 2h.
///
/// f must rebuild its graph from the current contents of `inputs` on every
/// call. The relative error of one element is |a - n| / max(|a|, |n|, floor).
/// Elements whose +-h evaluations take different branches than the base
/// point (a ReLU flips sign, a max moves) are not differentiable there and are
/// skipped.
///
/// Stencil::Central4 uses (8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h,
/// which tolerates a larger h and so less cancellation noise.
enum class Stencil { Central2, Central4 };

///
/// With max_per_input > 0, larger inputs are checked on a random subset of
/// that many elements drawn with sample_seed.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           double h, double floor = 1e-4, Stencil stencil = Stencil::Central2,
                           std::size_t max_per_input = 0, std::uint64_t sample_seed = 0);

}  // namespace rcn
