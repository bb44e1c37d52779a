#pragma once

#include <random>
#include <vector>

#include "rcn/ops.hpp"

namespace testutil {

using rcn::Real;
using rcn::Shape;
using rcn::Tensor;

inline constexpr bool kWide = sizeof(Real) == 8;
// Finite-difference step and pass mark per scalar width.
inline constexpr double kStep = kWide ? 1e-6 : 1e-2;
inline constexpr double kGradTol = kWide ? 1e-5 : 2e-2;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<Real> v(rcn::shape_numel(shape));
  for (auto& x : v) x = Real(d(rng));
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero so ReLU kinks sit outside the difference stencil.
inline Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<Real> v(rcn::shape_numel(shape));
  for (auto& x : v) x = Real(sign(rng) ? d(rng) : -d(rng));
  return Tensor(std::move(shape), std::move(v));
}

/// Direct nested-loop cross-correlation; taps summed in (ci, kh, kw) order after the bias.
inline std::vector<Real> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, const rcn::ConvSpec& s) {
  const long N = long(x.dim(0)), C = long(x.dim(1)), H = long(x.dim(2)), W = long(x.dim(3));
  const long O = long(w.dim(0)), K = long(w.dim(2));
  const long st = long(s.stride), p = long(s.padding), d = long(s.dilation);
  const long OH = (H + 2 * p - d * (K - 1) - 1) / st + 1, OW = (W + 2 * p - d * (K - 1) - 1) / st + 1;
  std::vector<Real> out(std::size_t(N * O * OH * OW));
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long oy = 0; oy < OH; ++oy)
        for (long ox = 0; ox < OW; ++ox) {
          Real acc = b[std::size_t(o)];
          for (long c = 0; c < C; ++c)
            for (long ky = 0; ky < K; ++ky)
              for (long kx = 0; kx < K; ++kx) {
                const long iy = oy * st - p + ky * d, ix = ox * st - p + kx * d;
                const Real v = (iy < 0 || iy >= H || ix < 0 || ix >= W) ? Real(0)
                                                                          : x[std::size_t(((n * C + c) * H + iy) * W + ix)];
                acc += w[std::size_t(((o * C + c) * K + ky) * K + kx)] * v;
              }
          out[std::size_t(((n * O + o) * OH + oy) * OW + ox)] = acc;
        }
  return out;
}

}  // namespace testutil
