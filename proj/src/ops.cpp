#include "rcn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "rcn/error.hpp"

namespace rcn {

using detail::grad_sink;
using detail::make_result;

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

}  // namespace

// ---- element-wise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<Real> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [a, b](std::span<const Real> g) {
    for (auto sink : {grad_sink(a), grad_sink(b)}) {
      if (sink.empty()) continue;
      for (std::size_t i = 0; i < g.size(); ++i) sink[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<Real> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [a, b](std::span<const Real> g) {
    if (auto s = grad_sink(a); !s.empty())
      for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
    if (auto s = grad_sink(b); !s.empty())
      for (std::size_t i = 0; i < g.size(); ++i) s[i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<Real> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](std::span<const Real> g) {
    auto da = a.data();
    auto db = b.data();
    if (auto s = grad_sink(a); !s.empty())
      for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * db[i];
    if (auto s = grad_sink(b); !s.empty())
      for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * da[i];
  });
}

Tensor scale(const Tensor& x, Real factor) {
  std::vector<Real> out(x.numel());
  auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * factor;
  return make_result("scale", x.shape(), std::move(out), {x}, [x, factor](std::span<const Real> g) {
    auto s = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * factor;
  });
}

Tensor scale_by(const Tensor& x, const Tensor& factor) {
  if (factor.numel() != 1) throw ShapeError("scale_by: factor must have one element");
  const Real f = factor[0];
  std::vector<Real> out(x.numel());
  auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * f;
  return make_result("scale_by", x.shape(), std::move(out), {x, factor},
                     [x, factor](std::span<const Real> g) {
                       const Real f = factor[0];
                       if (auto s = grad_sink(x); !s.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * f;
                       if (auto s = grad_sink(factor); !s.empty()) {
                         auto dx = x.data();
                         double acc = 0;
                         for (std::size_t i = 0; i < g.size(); ++i) acc += double(g[i]) * dx[i];
                         s[0] += Real(acc);
                       }
                     });
}

Tensor relu(const Tensor& x) {
  std::vector<Real> out(x.numel());
  auto dx = x.data();
  // NaN passes through so the result check catches it
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = !(dx[i] <= 0) ? dx[i] : Real(0);
  if (detail::kink_probe_active())
    for (std::size_t i = 0; i < out.size(); ++i) detail::kink_mix(dx[i] > 0);
  return make_result("relu", x.shape(), std::move(out), {x}, [x](std::span<const Real> g) {
    auto s = grad_sink(x);
    auto dx = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += dx[i] > 0 ? g[i] : Real(0);
  });
}

Tensor softplus(const Tensor& x) {
  std::vector<Real> out(x.numel());
  auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = dx[i] > Real(20) ? dx[i] : std::log1p(std::exp(dx[i]));
  }
  return make_result("softplus", x.shape(), std::move(out), {x}, [x](std::span<const Real> g) {
    auto s = grad_sink(x);
    auto dx = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] / (Real(1) + std::exp(-dx[i]));
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0;
  for (Real v : x.data()) acc += v;
  return make_result("sum", Shape{1}, {Real(acc)}, {x}, [x](std::span<const Real> g) {
    auto s = grad_sink(x);
    for (auto& v : s) v += g[0];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<Real> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [x](std::span<const Real> g) {
                       auto s = grad_sink(x);
                       for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
                     });
}

Tensor select(const Tensor& x, std::size_t index) {
  if (index >= x.numel()) throw ShapeError("select: index out of range");
  return make_result("select", Shape{1}, {x[index]}, {x}, [x, index](std::span<const Real> g) {
    grad_sink(x)[index] += g[0];
  });
}

Tensor normalize_sum(const Tensor& x) {
  require_rank("normalize_sum", x, 1);
  double total = 0;
  for (Real v : x.data()) total += v;
  if (!(total > 0)) throw NumericError("normalize_sum: non-positive total");
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Real(x[i] / total);
  return make_result("normalize_sum", x.shape(), std::move(out), {x},
                     [x, total](std::span<const Real> g) {
                       auto s = grad_sink(x);
                       double gx = 0;
                       for (std::size_t i = 0; i < g.size(); ++i) gx += double(g[i]) * x[i];
                       for (std::size_t j = 0; j < g.size(); ++j) {
                         s[j] += Real(g[j] / total - gx / (total * total));
                       }
                     });
}

// ---- convolution -----------------------------------------------------------

std::size_t conv_out_extent(std::size_t n, std::size_t kernel, const ConvSpec& spec) {
  if (spec.stride == 0 || spec.dilation == 0) throw ShapeError("conv: stride and dilation must be >= 1");
  const long span = long(spec.dilation) * (long(kernel) - 1) + 1;
  const long padded = long(n) + 2 * long(spec.padding);
  if (padded < span) {
    throw ShapeError("conv: non-positive output extent for input " + std::to_string(n) +
                     ", kernel " + std::to_string(kernel));
  }
  return std::size_t((padded - span) / long(spec.stride)) + 1;
}

namespace {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, oh, ow;
  ConvSpec spec;
  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return oh * ow; }
  bool direct() const {
    return k == 1 && spec.stride == 1 && spec.padding == 0;
  }
};

// output columns ox whose tap kw lands inside the input row
std::pair<std::size_t, std::size_t> valid_range(const ConvGeom& g, std::size_t kw) {
  const long s = long(g.spec.stride), off = long(kw) * long(g.spec.dilation) - long(g.spec.padding);
  const long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const long hi = long(g.w) - off <= 0 ? 0 : (long(g.w) - off + s - 1) / s;
  const long h = std::min<long>(hi, long(g.ow));
  const long l = std::min<long>(lo, h);
  return {std::size_t(l), std::size_t(h)};
}

// Output rows [y0, y1) only; column index is (oy - y0)*OW + ox.
// cols[(ci*k + kh)*k + kw][.] = x[ci][oy*s + kh*d - p][ox*s + kw*d - p]
void im2col(const Real* x, const ConvGeom& g, std::size_t y0, std::size_t y1, Real* cols) {
  const long s = long(g.spec.stride), d = long(g.spec.dilation), p = long(g.spec.padding);
  const std::size_t P = (y1 - y0) * g.ow;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const Real* plane = x + ci * g.h * g.w;
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        Real* row = cols + ((ci * g.k + kh) * g.k + kw) * P;
        for (std::size_t oy = y0; oy < y1; ++oy) {
          const long iy = long(oy) * s + long(kh) * d - p;
          Real* dst = row + (oy - y0) * g.ow;
          if (iy < 0 || iy >= long(g.h)) {
            std::fill(dst, dst + g.ow, Real(0));
            continue;
          }
          const Real* src = plane + std::size_t(iy) * g.w;
          const auto [lo, hi] = valid_range(g, kw);
          const long off = long(kw) * d - p;
          std::fill(dst, dst + lo, Real(0));
          if (s == 1) {
            std::copy(src + (long(lo) + off), src + (long(hi) + off), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[long(ox) * s + off];
          }
          std::fill(dst + hi, dst + g.ow, Real(0));
        }
      }
    }
  }
}

void col2im_add(const Real* cols, const ConvGeom& g, std::size_t y0, std::size_t y1, Real* dx) {
  const long s = long(g.spec.stride), d = long(g.spec.dilation), p = long(g.spec.padding);
  const std::size_t P = (y1 - y0) * g.ow;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    Real* plane = dx + ci * g.h * g.w;
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        const Real* row = cols + ((ci * g.k + kh) * g.k + kw) * P;
        for (std::size_t oy = y0; oy < y1; ++oy) {
          const long iy = long(oy) * s + long(kh) * d - p;
          if (iy < 0 || iy >= long(g.h)) continue;
          Real* dst = plane + std::size_t(iy) * g.w;
          const Real* src = row + (oy - y0) * g.ow;
          const auto [lo, hi] = valid_range(g, kw);
          const long off = long(kw) * d - p;
          if (s == 1) {
            Real* d1 = dst + off;
            for (std::size_t ox = lo; ox < hi; ++ox) d1[ox] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[long(ox) * s + off] += src[ox];
          }
        }
      }
    }
  }
}

// output rows per im2col chunk, sized so the column buffer stays in L2
std::size_t chunk_rows(const ConvGeom& g) {
  const std::size_t budget = (256 * 1024) / sizeof(Real);
  return std::clamp<std::size_t>(budget / std::max<std::size_t>(g.rows() * g.ow, 1), 1, g.oh);
}

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 128 / sizeof(Real);

// C[m][n] += sum_k A[m][k] * B[k][n]. Each element accumulates k in ascending
// order, the same order as a plain triple loop.
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const Real* A, std::size_t lda, const Real* B,
             std::size_t ldb, Real* C, std::size_t ldc) {
  for (std::size_t n0 = 0; n0 < N; n0 += kColBlock) {
    const std::size_t nn = std::min(kColBlock, N - n0);
    std::size_t m0 = 0;
    if (nn == kColBlock) {
      for (; m0 + kRowBlock <= M; m0 += kRowBlock) {
        Real acc[kRowBlock][kColBlock];
        for (std::size_t i = 0; i < kRowBlock; ++i)
          for (std::size_t j = 0; j < kColBlock; ++j) acc[i][j] = C[(m0 + i) * ldc + n0 + j];
        for (std::size_t k = 0; k < K; ++k) {
          const Real* b = B + k * ldb + n0;
          for (std::size_t i = 0; i < kRowBlock; ++i) {
            const Real a = A[(m0 + i) * lda + k];
            for (std::size_t j = 0; j < kColBlock; ++j) acc[i][j] += a * b[j];
          }
        }
        for (std::size_t i = 0; i < kRowBlock; ++i)
          for (std::size_t j = 0; j < kColBlock; ++j) C[(m0 + i) * ldc + n0 + j] = acc[i][j];
      }
    }
    for (; m0 < M; ++m0) {
      Real* c = C + m0 * ldc + n0;
      for (std::size_t k = 0; k < K; ++k) {
        const Real a = A[m0 * lda + k];
        const Real* b = B + k * ldb + n0;
        for (std::size_t j = 0; j < nn; ++j) c[j] += a * b[j];
      }
    }
  }
}

// C[m][n] += sum_k A[m][k] * B[n][k]
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const Real* A, std::size_t lda, const Real* B,
             std::size_t ldb, Real* C, std::size_t ldc) {
  typedef Real vec __attribute__((vector_size(32)));
  constexpr std::size_t V = sizeof(vec) / sizeof(Real);
  const std::size_t K0 = K - K % V;
  auto tail = [&](std::size_t m, std::size_t n, Real t) {
    for (std::size_t k = K0; k < K; ++k) t += A[m * lda + k] * B[n * ldb + k];
    C[m * ldc + n] += t;
  };
  std::size_t m0 = 0;
  for (; m0 + 4 <= M; m0 += 4) {
    std::size_t n0 = 0;
    for (; n0 + 2 <= N; n0 += 2) {
      vec acc[4][2] = {};
      for (std::size_t k = 0; k < K0; k += V) {
        vec b0, b1;
        std::memcpy(&b0, B + n0 * ldb + k, sizeof(vec));
        std::memcpy(&b1, B + (n0 + 1) * ldb + k, sizeof(vec));
        for (std::size_t i = 0; i < 4; ++i) {
          vec a;
          std::memcpy(&a, A + (m0 + i) * lda + k, sizeof(vec));
          acc[i][0] += a * b0;
          acc[i][1] += a * b1;
        }
      }
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
          Real t = 0;
          for (std::size_t l = 0; l < V; ++l) t += acc[i][j][l];
          tail(m0 + i, n0 + j, t);
        }
    }
    for (; n0 < N; ++n0)
      for (std::size_t i = 0; i < 4; ++i) {
        Real t = 0;
        for (std::size_t k = 0; k < K0; ++k) t += A[(m0 + i) * lda + k] * B[n0 * ldb + k];
        tail(m0 + i, n0, t);
      }
  }
  for (; m0 < M; ++m0)
    for (std::size_t n = 0; n < N; ++n) {
      Real t = 0;
      for (std::size_t k = 0; k < K0; ++k) t += A[m0 * lda + k] * B[n * ldb + k];
      tail(m0, n, t);
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d weight", weight, 4);
  if (weight.dim(2) != weight.dim(3)) throw ShapeError("conv2d: kernel must be square");
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, got " + std::to_string(x.dim(1)));
  }
  if (bias.numel() != weight.dim(0)) throw ShapeError("conv2d: bias size mismatch");

  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), 0, 0, spec};
  g.oh = conv_out_extent(g.h, g.k, spec);
  g.ow = conv_out_extent(g.w, g.k, spec);
  const std::size_t R = g.rows(), P = g.cols();

  std::vector<Real> out(g.batch * g.cout * P);
  const std::size_t rows = chunk_rows(g);
  std::vector<Real> buf(g.direct() ? 0 : R * rows * g.ow);
  const Real* W = weight.data().data();
  const Real* B = bias.data().data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    const Real* xn = x.data().data() + n * g.cin * g.h * g.w;
    Real* on = out.data() + n * g.cout * P;
    // Each output starts at its bias, then adds taps in (ci, kh, kw) order.
    for (std::size_t co = 0; co < g.cout; ++co) std::fill(on + co * P, on + (co + 1) * P, B[co]);
    if (g.direct()) {
      gemm_nn(g.cout, P, R, W, R, xn, P, on, P);
      continue;
    }
    for (std::size_t y0 = 0; y0 < g.oh; y0 += rows) {
      const std::size_t y1 = std::min(g.oh, y0 + rows), pc = (y1 - y0) * g.ow;
      im2col(xn, g, y0, y1, buf.data());
      gemm_nn(g.cout, pc, R, W, R, buf.data(), pc, on + y0 * g.ow, P);
    }
  }

  return make_result(
      "conv2d", Shape{g.batch, g.cout, g.oh, g.ow}, std::move(out), {x, weight, bias},
      [x, weight, bias, g](std::span<const Real> gout) {
        const std::size_t R = g.rows(), P = g.cols();
        auto gx = grad_sink(x);
        auto gw = grad_sink(weight);
        auto gb = grad_sink(bias);
        const Real* W = weight.data().data();
        const std::size_t rows = chunk_rows(g);
        std::vector<Real> cols(!g.direct() && !gw.empty() ? R * rows * g.ow : 0);
        std::vector<Real> dcols(!g.direct() && !gx.empty() ? R * rows * g.ow : 0);
        std::vector<Real> wt(gx.empty() ? 0 : R * g.cout);  // weight transposed to [R, cout]
        for (std::size_t co = 0; co < wt.size() / R; ++co)
          for (std::size_t r = 0; r < R; ++r) wt[r * g.cout + co] = W[co * R + r];
        for (std::size_t n = 0; n < g.batch; ++n) {
          const Real* gn = gout.data() + n * g.cout * P;
          if (!gb.empty()) {
            for (std::size_t co = 0; co < g.cout; ++co) {
              const Real* gr = gn + co * P;
              Real acc = 0;
#pragma omp simd reduction(+ : acc)
              for (std::size_t i = 0; i < P; ++i) acc += gr[i];
              gb[co] += acc;
            }
          }
          const Real* xn = x.data().data() + n * g.cin * g.h * g.w;
          Real* gxn = gx.empty() ? nullptr : gx.data() + n * g.cin * g.h * g.w;
          if (g.direct()) {
            if (!gw.empty()) gemm_nt(g.cout, R, P, gn, P, xn, P, gw.data(), R);
            if (!gx.empty()) gemm_nn(R, P, g.cout, wt.data(), g.cout, gn, P, gxn, P);
            continue;
          }
          for (std::size_t y0 = 0; y0 < g.oh; y0 += rows) {
            const std::size_t y1 = std::min(g.oh, y0 + rows), pc = (y1 - y0) * g.ow;
            if (!gw.empty()) {
              im2col(xn, g, y0, y1, cols.data());
              gemm_nt(g.cout, R, pc, gn + y0 * g.ow, P, cols.data(), pc, gw.data(), R);
            }
            if (!gx.empty()) {
              std::fill(dcols.begin(), dcols.begin() + R * pc, Real(0));
              gemm_nn(R, pc, g.cout, wt.data(), g.cout, gn + y0 * g.ow, P, dcols.data(), pc);
              col2im_add(dcols.data(), g, y0, y1, gxn);
            }
          }
        }
      });
}

// ---- normalization ---------------------------------------------------------

BatchNorm2d::BatchNorm2d(std::size_t channels)
    : gamma(Shape{channels}, Real(1), true),
      beta(Shape{channels}, Real(0), true),
      running_mean(Shape{channels}, Real(0)),
      running_var(Shape{channels}, Real(1)) {}

Tensor batchnorm2d(const Tensor& x, BatchNorm2d& state, bool training) {
  require_rank("batchnorm2d", x, 4);
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (state.gamma.numel() != C) throw ShapeError("batchnorm2d: channel mismatch");
  const std::size_t count = N * HW;
  const Real eps = state.eps;

  std::vector<Real> mean(C), inv_std(C);
  auto xd = x.data();
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const Real* p = xd.data() + (n * C + c) * HW;
#pragma omp simd reduction(+ : s)
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double m = s / double(count);
      double ss = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const Real* p = xd.data() + (n * C + c) * HW;
#pragma omp simd reduction(+ : ss)
        for (std::size_t i = 0; i < HW; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      const double var = ss / double(count);
      mean[c] = Real(m);
      inv_std[c] = Real(1.0 / std::sqrt(var + eps));
      const double unbiased = count > 1 ? ss / double(count - 1) : var;
      auto rm = state.running_mean.data();
      auto rv = state.running_var.data();
      rm[c] = Real((1.0 - state.momentum) * rm[c] + state.momentum * m);
      rv[c] = Real((1.0 - state.momentum) * rv[c] + state.momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = Real(1.0 / std::sqrt(double(state.running_var[c]) + eps));
    }
  }

  std::vector<Real> xhat(x.numel()), out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      const Real gm = state.gamma[c], bt = state.beta[c];
      for (std::size_t i = 0; i < HW; ++i) {
        const Real h = (xd[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = gm * h + bt;
      }
    }
  }

  Tensor gamma = state.gamma, beta = state.beta;
  return make_result(
      "batchnorm2d", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, training, N, C, HW, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](std::span<const Real> g) {
        auto gx = grad_sink(x);
        auto gg = grad_sink(gamma);
        auto gb = grad_sink(beta);
        const double cnt = double(N * HW);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * HW;
#pragma omp simd reduction(+ : sum_g, sum_gx)
            for (std::size_t i = 0; i < HW; ++i) {
              sum_g += g[base + i];
              sum_gx += double(g[base + i]) * xhat[base + i];
            }
          }
          if (!gg.empty()) gg[c] += Real(sum_gx);
          if (!gb.empty()) gb[c] += Real(sum_g);
          if (gx.empty()) continue;
          const double gm = gamma[c];
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              double d;
              if (training) {
                d = gm * inv_std[c] *
                    (g[base + i] - sum_g / cnt - xhat[base + i] * sum_gx / cnt);
              } else {
                d = gm * inv_std[c] * g[base + i];
              }
              gx[base + i] += Real(d);
            }
          }
        }
      });
}

// ---- pooling and resampling ------------------------------------------------

Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank("maxpool2d", x, 4);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < kernel || W < kernel) throw ShapeError("maxpool2d: input smaller than kernel");
  const std::size_t OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  std::vector<Real> out(N * C * OH * OW);
  std::vector<std::size_t> argmax(out.size());
  auto xd = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = base + oy * stride * W + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = base + (oy * stride + ky) * W + ox * stride + kx;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        const std::size_t o = (nc * OH + oy) * OW + ox;
        out[o] = xd[best];
        argmax[o] = best;
      }
    }
  }
  if (detail::kink_probe_active())
    for (auto a : argmax) detail::kink_mix(a);
  return make_result("maxpool2d", Shape{N, C, OH, OW}, std::move(out), {x},
                     [x, argmax = std::move(argmax)](std::span<const Real> g) {
                       auto s = grad_sink(x);
                       for (std::size_t o = 0; o < g.size(); ++o) s[argmax[o]] += g[o];
                     });
}

namespace {

struct Bin {
  std::size_t begin, end;
};

std::vector<Bin> adaptive_bins(std::size_t in, std::size_t out) {
  std::vector<Bin> bins(out);
  for (std::size_t i = 0; i < out; ++i) {
    bins[i].begin = (i * in) / out;
    bins[i].end = ((i + 1) * in + out - 1) / out;
  }
  return bins;
}

}  // namespace

Tensor adaptive_avgpool2d(const Tensor& x, std::size_t out_size) {
  require_rank("adaptive_avgpool2d", x, 4);
  if (out_size == 0) throw ShapeError("adaptive_avgpool2d: output size must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = out_size;
  const auto rows = adaptive_bins(H, K);
  const auto cols = adaptive_bins(W, K);
  std::vector<Real> out(N * C * K * K);
  auto xd = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const Real* plane = xd.data() + nc * H * W;
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j) {
        double acc = 0;
        for (std::size_t y = rows[i].begin; y < rows[i].end; ++y)
          for (std::size_t xx = cols[j].begin; xx < cols[j].end; ++xx) acc += plane[y * W + xx];
        const double area = double((rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin));
        out[(nc * K + i) * K + j] = Real(acc / area);
      }
    }
  }
  return make_result(
      "adaptive_avgpool2d", Shape{N, C, K, K}, std::move(out), {x},
      [x, rows, cols, N, C, H, W, K](std::span<const Real> g) {
        auto s = grad_sink(x);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          Real* plane = s.data() + nc * H * W;
          for (std::size_t i = 0; i < K; ++i) {
            for (std::size_t j = 0; j < K; ++j) {
              const Real area = Real((rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin));
              const Real v = g[(nc * K + i) * K + j] / area;
              for (std::size_t y = rows[i].begin; y < rows[i].end; ++y)
                for (std::size_t xx = cols[j].begin; xx < cols[j].end; ++xx) plane[y * W + xx] += v;
            }
          }
        }
      });
}

namespace {

struct Tap {
  std::size_t i0, i1;
  Real t;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = double(in) / double(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (double(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, double(in - 1));
    const auto i0 = std::size_t(std::floor(src));
    taps[o] = {i0, std::min(i0 + 1, in - 1), Real(src - double(i0))};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank("upsample_bilinear", x, 4);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ty = bilinear_taps(H, out_h);
  const auto tx = bilinear_taps(W, out_w);
  std::vector<Real> out(N * C * out_h * out_w);
  auto xd = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const Real* p = xd.data() + nc * H * W;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        // Lerp form keeps constant inputs exactly constant.
        const Real v00 = p[a.i0 * W + b.i0], v01 = p[a.i0 * W + b.i1];
        const Real v10 = p[a.i1 * W + b.i0], v11 = p[a.i1 * W + b.i1];
        const Real top = v00 + (v01 - v00) * b.t;
        const Real bot = v10 + (v11 - v10) * b.t;
        out[(nc * out_h + oy) * out_w + ox] = top + (bot - top) * a.t;
      }
    }
  }
  return make_result("upsample_bilinear", Shape{N, C, out_h, out_w}, std::move(out), {x},
                     [x, ty, tx, N, C, H, W, out_h, out_w](std::span<const Real> g) {
                       auto s = grad_sink(x);
                       for (std::size_t nc = 0; nc < N * C; ++nc) {
                         Real* p = s.data() + nc * H * W;
                         for (std::size_t oy = 0; oy < out_h; ++oy) {
                           const auto& a = ty[oy];
                           for (std::size_t ox = 0; ox < out_w; ++ox) {
                             const auto& b = tx[ox];
                             const Real gv = g[(nc * out_h + oy) * out_w + ox];
                             p[a.i0 * W + b.i0] += gv * (1 - a.t) * (1 - b.t);
                             p[a.i0 * W + b.i1] += gv * (1 - a.t) * b.t;
                             p[a.i1 * W + b.i0] += gv * a.t * (1 - b.t);
                             p[a.i1 * W + b.i1] += gv * a.t * b.t;
                           }
                         }
                       }
                     });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const std::size_t N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::size_t C = 0;
  for (const auto& t : parts) {
    require_rank("concat_channels", t, 4);
    if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W) {
      throw ShapeError("concat_channels: incompatible part " + shape_str(t.shape()));
    }
    C += t.dim(1);
  }
  const std::size_t HW = H * W;
  std::vector<Real> out(N * C * HW);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t c0 = 0;
    for (const auto& t : parts) {
      const std::size_t ct = t.dim(1);
      std::copy_n(t.data().data() + n * ct * HW, ct * HW, out.data() + (n * C + c0) * HW);
      c0 += ct;
    }
  }
  return make_result("concat_channels", Shape{N, C, H, W}, std::move(out), parts,
                     [parts, N, C, HW](std::span<const Real> g) {
                       std::size_t c0 = 0;
                       for (const auto& t : parts) {
                         const std::size_t ct = t.dim(1);
                         if (auto s = grad_sink(t); !s.empty()) {
                           for (std::size_t n = 0; n < N; ++n) {
                             const Real* src = g.data() + (n * C + c0) * HW;
                             Real* dst = s.data() + n * ct * HW;
                             for (std::size_t i = 0; i < ct * HW; ++i) dst[i] += src[i];
                           }
                         }
                         c0 += ct;
                       }
                     });
}

// ---- spatial weighting -----------------------------------------------------

Tensor mul_spatial(const Tensor& x, const Tensor& map) {
  require_rank("mul_spatial", x, 4);
  require_rank("mul_spatial map", map, 4);
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (map.dim(0) != N || map.dim(1) != 1 || map.dim(2) != x.dim(2) || map.dim(3) != x.dim(3)) {
    throw ShapeError("mul_spatial: map " + shape_str(map.shape()) + " does not fit " +
                     shape_str(x.shape()));
  }
  std::vector<Real> out(x.numel());
  auto xd = x.data();
  auto md = map.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i)
        out[(n * C + c) * HW + i] = xd[(n * C + c) * HW + i] * md[n * HW + i];
  return make_result("mul_spatial", x.shape(), std::move(out), {x, map},
                     [x, map, N, C, HW](std::span<const Real> g) {
                       auto xd = x.data();
                       auto md = map.data();
                       auto gx = grad_sink(x);
                       auto gm = grad_sink(map);
                       for (std::size_t n = 0; n < N; ++n) {
                         for (std::size_t c = 0; c < C; ++c) {
                           const std::size_t base = (n * C + c) * HW;
                           for (std::size_t i = 0; i < HW; ++i) {
                             if (!gx.empty()) gx[base + i] += g[base + i] * md[n * HW + i];
                             if (!gm.empty()) gm[n * HW + i] += g[base + i] * xd[base + i];
                           }
                         }
                       }
                     });
}

Tensor channel_weighted_sum(const Tensor& x, std::span<const Real> weights) {
  require_rank("channel_weighted_sum", x, 4);
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (weights.size() != C * HW) {
    throw ShapeError("channel_weighted_sum: weights hold " + std::to_string(weights.size()) +
                     " values, features need " + std::to_string(C * HW));
  }
  std::vector<Real> w(weights.begin(), weights.end());
  std::vector<Real> out(N * HW, Real(0));
  auto xd = x.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i)
        out[n * HW + i] += w[c * HW + i] * xd[(n * C + c) * HW + i];
  return make_result("channel_weighted_sum", Shape{N, 1, x.dim(2), x.dim(3)}, std::move(out), {x},
                     [x, w = std::move(w), N, C, HW](std::span<const Real> g) {
                       auto s = grad_sink(x);
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t i = 0; i < HW; ++i)
                             s[(n * C + c) * HW + i] += w[c * HW + i] * g[n * HW + i];
                     });
}

Tensor normalize_by_max(const Tensor& x, Real floor) {
  require_rank("normalize_by_max", x, 4);
  const std::size_t N = x.dim(0), S = x.numel() / N;
  std::vector<Real> out(x.numel());
  std::vector<std::size_t> argmax(N);
  std::vector<Real> peak(N);
  auto xd = x.data();
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = n * S;
    for (std::size_t i = n * S; i < (n + 1) * S; ++i)
      if (xd[i] > xd[best]) best = i;
    argmax[n] = best;
    peak[n] = xd[best];
    for (std::size_t i = n * S; i < (n + 1) * S; ++i)
      out[i] = peak[n] > floor ? xd[i] / peak[n] : Real(1);
    if (detail::kink_probe_active()) detail::kink_mix(best * 2 + (peak[n] > floor));
  }
  return make_result("normalize_by_max", x.shape(), std::move(out), {x},
                     [x, argmax = std::move(argmax), peak = std::move(peak), N, S,
                      floor](std::span<const Real> g) {
                       auto s = grad_sink(x);
                       auto xd = x.data();
                       for (std::size_t n = 0; n < N; ++n) {
                         if (!(peak[n] > floor)) continue;
                         const double m = peak[n];
                         double gx = 0;
                         for (std::size_t i = n * S; i < (n + 1) * S; ++i) {
                           s[i] += Real(g[i] / m);
                           gx += double(g[i]) * xd[i];
                         }
                         s[argmax[n]] -= Real(gx / (m * m));
                       }
                     });
}

// ---- classifier head -------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear weight", weight, 2);
  const std::size_t N = x.dim(0), D = x.dim(1), C = weight.dim(0);
  if (weight.dim(1) != D) {
    throw ShapeError("linear: input width " + std::to_string(D) + " vs weight " +
                     shape_str(weight.shape()));
  }
  if (bias.numel() != C) throw ShapeError("linear: bias size mismatch");
  std::vector<Real> out(N * C);
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      Real acc = bias[c];
      for (std::size_t d = 0; d < D; ++d) acc += wd[c * D + d] * xd[n * D + d];
      out[n * C + c] = acc;
    }
  }
  return make_result("linear", Shape{N, C}, std::move(out), {x, weight, bias},
                     [x, weight, bias, N, D, C](std::span<const Real> g) {
                       auto xd = x.data();
                       auto wd = weight.data();
                       auto gx = grad_sink(x);
                       auto gw = grad_sink(weight);
                       auto gb = grad_sink(bias);
                       for (std::size_t n = 0; n < N; ++n) {
                         for (std::size_t c = 0; c < C; ++c) {
                           const Real gv = g[n * C + c];
                           if (!gb.empty()) gb[c] += gv;
                           for (std::size_t d = 0; d < D; ++d) {
                             if (!gw.empty()) gw[c * D + d] += gv * xd[n * D + d];
                             if (!gx.empty()) gx[n * D + d] += gv * wd[c * D + d];
                           }
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x) {
  require_rank("softmax", x, 2);
  const std::size_t N = x.dim(0), C = x.dim(1);
  std::vector<Real> out(N * C);
  auto xd = x.data();
  for (std::size_t n = 0; n < N; ++n) {
    const Real* row = xd.data() + n * C;
    const Real mx = *std::max_element(row, row + C);
    double z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(double(row[c]) - mx);
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = Real(std::exp(double(row[c]) - mx) / z);
  }
  std::vector<Real> y = out;
  return make_result("softmax", x.shape(), std::move(out), {x},
                     [x, y = std::move(y), N, C](std::span<const Real> g) {
                       auto s = grad_sink(x);
                       for (std::size_t n = 0; n < N; ++n) {
                         double dot = 0;
                         for (std::size_t c = 0; c < C; ++c) dot += double(g[n * C + c]) * y[n * C + c];
                         for (std::size_t c = 0; c < C; ++c)
                           s[n * C + c] += Real(y[n * C + c] * (g[n * C + c] - dot));
                       }
                     });
}

Tensor dropout(const Tensor& x, Real ratio, bool training, Rng& rng) {
  if (!(ratio >= 0 && ratio < 1)) throw UsageError("dropout: ratio must lie in [0, 1)");
  if (!training || ratio == 0) return x;
  const Real keep_scale = Real(1) / (Real(1) - ratio);
  // one engine draw seeds a splitmix64 stream; two 32-bit draws per step,
  // keep when below (1 - ratio) * 2^32
  const auto cut = std::uint64_t((1.0 - double(ratio)) * 4294967296.0);
  std::uint64_t state = rng();
  std::vector<Real> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); i += 2) {
    std::uint64_t r = (state += 0x9e3779b97f4a7c15ull);
    r = (r ^ (r >> 30)) * 0xbf58476d1ce4e5b9ull;
    r = (r ^ (r >> 27)) * 0x94d049bb133111ebull;
    r ^= r >> 31;
    mask[i] = (r & 0xffffffffu) < cut ? keep_scale : Real(0);
    if (i + 1 < mask.size()) mask[i + 1] = (r >> 32) < cut ? keep_scale : Real(0);
  }
  std::vector<Real> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  return make_result("dropout", x.shape(), std::move(out), {x},
                     [x, mask = std::move(mask)](std::span<const Real> g) {
                       auto s = grad_sink(x);
                       for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * mask[i];
                     });
}

// ---- losses ----------------------------------------------------------------

namespace {

void check_labels(const char* op, std::size_t N, std::size_t C, std::span<const int> labels) {
  if (labels.size() != N) throw ShapeError(std::string(op) + ": label count mismatch");
  for (int y : labels) {
    if (y < 0 || std::size_t(y) >= C) throw ShapeError(std::string(op) + ": label out of range");
  }
}

}  // namespace

Tensor loss_eq9(const Tensor& probs, std::span<const int> labels) {
  require_rank("loss_eq9", probs, 2);
  const std::size_t N = probs.dim(0), C = probs.dim(1);
  check_labels("loss_eq9", N, C, labels);
  auto p = probs.data();
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    double row = 0;
    for (std::size_t c = 0; c < C; ++c) row += p[n * C + c];
    if (std::abs(row - 1.0) > 1e-5) {
      throw NumericError("loss_eq9: probability row " + std::to_string(n) + " sums to " +
                         std::to_string(row));
    }
    for (std::size_t c = 0; c < C; ++c) {
      const double q = std::clamp(double(p[n * C + c]), double(kProbClamp), 1.0 - double(kProbClamp));
      if (detail::kink_probe_active()) detail::kink_mix(q != double(p[n * C + c]));
      total -= (std::size_t(labels[n]) == c) ? std::log(q) : std::log(1.0 - q);
    }
  }
  std::vector<int> y(labels.begin(), labels.end());
  return make_result("loss_eq9", Shape{1}, {Real(total / double(N))}, {probs},
                     [probs, y = std::move(y), N, C](std::span<const Real> g) {
                       auto s = grad_sink(probs);
                       auto p = probs.data();
                       const double lo = kProbClamp, hi = 1.0 - double(kProbClamp);
                       for (std::size_t n = 0; n < N; ++n) {
                         for (std::size_t c = 0; c < C; ++c) {
                           const double q = p[n * C + c];
                           if (q < lo || q > hi) continue;  // clamped: flat
                           const double d = (std::size_t(y[n]) == c) ? -1.0 / q : 1.0 / (1.0 - q);
                           s[n * C + c] += Real(g[0] * d / double(N));
                         }
                       }
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  check_labels("softmax_cross_entropy", N, C, labels);
  auto z = logits.data();
  std::vector<Real> prob(N * C);
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const Real* row = z.data() + n * C;
    const double mx = *std::max_element(row, row + C);
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[labels[n]];
    for (std::size_t c = 0; c < C; ++c) prob[n * C + c] = Real(std::exp(row[c] - lse));
  }
  std::vector<int> y(labels.begin(), labels.end());
  return make_result("softmax_cross_entropy", Shape{1}, {Real(total / double(N))}, {logits},
                     [logits, prob = std::move(prob), y = std::move(y), N, C](std::span<const Real> g) {
                       auto s = grad_sink(logits);
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t c = 0; c < C; ++c)
                           s[n * C + c] += Real(g[0] *
                                                (prob[n * C + c] - (std::size_t(y[n]) == c ? 1.0 : 0.0)) /
                                                double(N));
                     });
}

}  // namespace rcn
