#include "rcn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <numeric>
#include <random>

namespace rcn {

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           double h, double floor, Stencil stencil,
                           std::size_t max_per_input, std::uint64_t sample_seed) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::uint64_t base_sig;
  {
    detail::KinkProbe probe;
    f().backward();
    base_sig = probe.value();
  }
  std::vector<std::vector<Real>> analytic;
  for (auto& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].data();
    std::vector<std::size_t> picks(data.size());
    std::iota(picks.begin(), picks.end(), std::size_t(0));
    if (max_per_input > 0 && picks.size() > max_per_input) {
      std::vector<std::size_t> subset;
      std::mt19937_64 rng(sample_seed + k);
      std::sample(picks.begin(), picks.end(), std::back_inserter(subset), max_per_input, rng);
      picks = std::move(subset);
    }
    for (std::size_t i : picks) {
      const Real saved = data[i];
      detail::KinkProbe probe;
      bool kink = false;
      auto eval = [&](double offset) {
        probe.reset();
        data[i] = Real(saved + offset);
        const double v = f().item();
        kink = kink || probe.value() != base_sig;
        return v;
      };
      double numeric = (eval(h) - eval(-h)) / (2 * h);
      if (stencil == Stencil::Central4) numeric = (4 * numeric - (eval(2 * h) - eval(-2 * h)) / (4 * h)) / 3;
      data[i] = saved;
      if (kink) {
        ++result.skipped;
        continue;
      }
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace rcn
