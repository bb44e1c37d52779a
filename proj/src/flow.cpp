#include "rcn/flow.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "rcn/error.hpp"

namespace rcn::flow {

double Plane::clamped(long x, long y) const {
  x = std::clamp(x, 0L, long(width) - 1);
  y = std::clamp(y, 0L, long(height) - 1);
  return values[std::size_t(y) * width + std::size_t(x)];
}

double Plane::sample(double x, double y) const {
  x = std::clamp(x, 0.0, double(width - 1));
  y = std::clamp(y, 0.0, double(height - 1));
  const auto x0 = std::size_t(x), y0 = std::size_t(y);
  const auto x1 = std::min(x0 + 1, width - 1), y1 = std::min(y0 + 1, height - 1);
  const double tx = x - double(x0), ty = y - double(y0);
  const double top = (*this)(x0, y0) + ((*this)(x1, y0) - (*this)(x0, y0)) * tx;
  const double bot = (*this)(x0, y1) + ((*this)(x1, y1) - (*this)(x0, y1)) * tx;
  return top + (bot - top) * ty;
}

void validate_frame(const Frame& frame) {
  if (frame.width < 16 || frame.height < 16) {
    throw DataError("frame must be at least 16x16, got " + std::to_string(frame.width) + "x" +
                    std::to_string(frame.height));
  }
  if (frame.values.size() != frame.width * frame.height) throw DataError("frame: size mismatch");
  for (double v : frame.values) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("frame: intensity outside [0,1]");
  }
}

void FlowSolverConfig::validate() const {
  if (!(pyramid_scale > 0 && pyramid_scale < 1)) throw UsageError("flow: pyramid scale must lie in (0,1)");
  if (pyramid_levels == 0 || outer_warps == 0 || irls_iters == 0 || jacobi_sweeps == 0) {
    throw UsageError("flow: iteration counts must be >= 1");
  }
  if (!(lorentzian_sigma > 0) || !(smoothness_lambda >= 0)) {
    throw UsageError("flow: sigma must be positive and lambda non-negative");
  }
}

double lorentzian(double z, double sigma) { return std::log1p(z * z / (2 * sigma * sigma)); }

namespace {

// rho'(z)/z for the Lorentzian.
inline double lorentzian_weight(double z, double sigma) { return 2.0 / (2 * sigma * sigma + z * z); }

struct Tap1 {
  std::size_t index;
  double weight;
};

std::vector<std::vector<Tap1>> resample_taps(std::size_t in, std::size_t out) {
  std::vector<std::vector<Tap1>> taps(out);
  if (in == out) {
    for (std::size_t o = 0; o < out; ++o) taps[o] = {{o, 1.0}};
    return taps;
  }
  const double ratio = double(in) / double(out);
  if (out > in) {
    for (std::size_t o = 0; o < out; ++o) {
      const double src = std::clamp((double(o) + 0.5) * ratio - 0.5, 0.0, double(in - 1));
      const auto i0 = std::size_t(src);
      const auto i1 = std::min(i0 + 1, in - 1);
      const double t = src - double(i0);
      taps[o] = {{i0, 1.0 - t}, {i1, t}};
    }
    return taps;
  }
  for (std::size_t o = 0; o < out; ++o) {
    const double lo = double(o) * ratio, hi = double(o + 1) * ratio;
    for (auto i = std::size_t(lo); i < in && double(i) < hi; ++i) {
      const double overlap = std::min(hi, double(i + 1)) - std::max(lo, double(i));
      if (overlap > 1e-12) taps[o].push_back({i, overlap / ratio});
    }
  }
  return taps;
}

double derivative(const Plane& p, std::size_t x, std::size_t y, bool along_x) {
  const std::size_t n = along_x ? p.width : p.height;
  const std::size_t i = along_x ? x : y;
  if (n < 2) return 0;
  auto at = [&](std::size_t k) { return along_x ? p(k, y) : p(x, k); };
  if (i == 0) return at(1) - at(0);
  if (i == n - 1) return at(n - 1) - at(n - 2);
  return 0.5 * (at(i + 1) - at(i - 1));
}

std::vector<Plane> build_pyramid(const Plane& img, std::size_t levels, double scale) {
  std::vector<Plane> pyr{img};
  while (pyr.size() < levels) {
    const auto& prev = pyr.back();
    const auto w = std::size_t(std::lround(double(prev.width) * scale));
    const auto h = std::size_t(std::lround(double(prev.height) * scale));
    if (w < 8 || h < 8) break;
    pyr.push_back(resize(prev, w, h));
  }
  return pyr;
}

/// Linearized Black-Anandan energy and its IRLS solver for one warp.
class WarpProblem {
 public:
  WarpProblem(const Plane& onset, const Plane& warped, const FlowField& base, const FlowSolverConfig& cfg)
      : w_(onset.width), h_(onset.height), base_(base), cfg_(cfg),
        ix_(w_, h_), iy_(w_, h_), it_(w_, h_), du_(w_, h_), dv_(w_, h_) {
    Plane avg(w_, h_);
    for (std::size_t i = 0; i < avg.values.size(); ++i) {
      avg.values[i] = 0.5 * (onset.values[i] + warped.values[i]);
      it_.values[i] = warped.values[i] - onset.values[i];
    }
    for (std::size_t y = 0; y < h_; ++y) {
      for (std::size_t x = 0; x < w_; ++x) {
        ix_(x, y) = derivative(avg, x, y, true);
        iy_(x, y) = derivative(avg, x, y, false);
      }
    }
  }

  double u(std::size_t x, std::size_t y) const { return base_.vx(x, y) + du_(x, y); }
  double v(std::size_t x, std::size_t y) const { return base_.vy(x, y) + dv_(x, y); }

  double energy() const {
    const double s = cfg_.lorentzian_sigma, lambda = cfg_.smoothness_lambda;
    double data = 0, smooth = 0;
    for (std::size_t y = 0; y < h_; ++y) {
      for (std::size_t x = 0; x < w_; ++x) {
        data += lorentzian(ix_(x, y) * du_(x, y) + iy_(x, y) * dv_(x, y) + it_(x, y), s);
        if (x + 1 < w_) {
          smooth += lorentzian(u(x, y) - u(x + 1, y), s) + lorentzian(v(x, y) - v(x + 1, y), s);
        }
        if (y + 1 < h_) {
          smooth += lorentzian(u(x, y) - u(x, y + 1), s) + lorentzian(v(x, y) - v(x, y + 1), s);
        }
      }
    }
    return data + lambda * smooth;
  }

  void irls_iteration() {
    const double s = cfg_.lorentzian_sigma, lambda = cfg_.smoothness_lambda;
    // Weights frozen at the current estimate; edges stored on their left/top pixel.
    Plane wd(w_, h_), wuh(w_, h_), wuv(w_, h_), wvh(w_, h_), wvv(w_, h_);
    for (std::size_t y = 0; y < h_; ++y) {
      for (std::size_t x = 0; x < w_; ++x) {
        wd(x, y) = lorentzian_weight(ix_(x, y) * du_(x, y) + iy_(x, y) * dv_(x, y) + it_(x, y), s);
        if (x + 1 < w_) {
          wuh(x, y) = lorentzian_weight(u(x, y) - u(x + 1, y), s);
          wvh(x, y) = lorentzian_weight(v(x, y) - v(x + 1, y), s);
        }
        if (y + 1 < h_) {
          wuv(x, y) = lorentzian_weight(u(x, y) - u(x, y + 1), s);
          wvv(x, y) = lorentzian_weight(v(x, y) - v(x, y + 1), s);
        }
      }
    }

    Plane ndu(w_, h_), ndv(w_, h_);
    for (std::size_t sweep = 0; sweep < cfg_.jacobi_sweeps; ++sweep) {
      for (std::size_t y = 0; y < h_; ++y) {
        for (std::size_t x = 0; x < w_; ++x) {
          double su = 0, tu = 0, sv = 0, tv = 0;
          auto edge = [&](double wu, double wv, std::size_t qx, std::size_t qy) {
            su += wu;
            tu += wu * u(qx, qy);
            sv += wv;
            tv += wv * v(qx, qy);
          };
          if (x > 0) edge(wuh(x - 1, y), wvh(x - 1, y), x - 1, y);
          if (x + 1 < w_) edge(wuh(x, y), wvh(x, y), x + 1, y);
          if (y > 0) edge(wuv(x, y - 1), wvv(x, y - 1), x, y - 1);
          if (y + 1 < h_) edge(wuv(x, y), wvv(x, y), x, y + 1);

          const double gx = ix_(x, y), gy = iy_(x, y), gt = it_(x, y), w = wd(x, y);
          const double a11 = w * gx * gx + lambda * su + 1e-12;
          const double a22 = w * gy * gy + lambda * sv + 1e-12;
          const double a12 = w * gx * gy;
          const double b1 = -w * gx * gt + lambda * (tu - su * base_.vx(x, y));
          const double b2 = -w * gy * gt + lambda * (tv - sv * base_.vy(x, y));
          const double det = a11 * a22 - a12 * a12;
          ndu(x, y) = (a22 * b1 - a12 * b2) / det;
          ndv(x, y) = (a11 * b2 - a12 * b1) / det;
        }
      }
      std::swap(du_.values, ndu.values);
      std::swap(dv_.values, ndv.values);
    }
  }

  FlowField total() const {
    FlowField f{Plane(w_, h_), Plane(w_, h_)};
    for (std::size_t i = 0; i < f.vx.values.size(); ++i) {
      f.vx.values[i] = base_.vx.values[i] + du_.values[i];
      f.vy.values[i] = base_.vy.values[i] + dv_.values[i];
    }
    return f;
  }

 private:
  std::size_t w_, h_;
  const FlowField& base_;
  const FlowSolverConfig& cfg_;
  Plane ix_, iy_, it_, du_, dv_;
};

}  // namespace

Plane resize(const Plane& src, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw UsageError("resize: empty target");
  if (width == src.width && height == src.height) return src;
  const auto tx = resample_taps(src.width, width);
  const auto ty = resample_taps(src.height, height);
  Plane tmp(width, src.height);
  for (std::size_t y = 0; y < src.height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double acc = 0;
      for (const auto& t : tx[x]) acc += t.weight * src(t.index, y);
      tmp(x, y) = acc;
    }
  }
  Plane out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double acc = 0;
      for (const auto& t : ty[y]) acc += t.weight * tmp(x, t.index);
      out(x, y) = acc;
    }
  }
  return out;
}

Plane warp(const Plane& img, const FlowField& flow) {
  Plane out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      out(x, y) = img.sample(double(x) + flow.vx(x, y), double(y) + flow.vy(x, y));
  return out;
}

Plane median_filter(const Plane& src, std::size_t radius) {
  if (radius == 0) return src;
  Plane out(src.width, src.height);
  std::vector<double> window;
  const long r = long(radius);
  for (std::size_t y = 0; y < src.height; ++y) {
    for (std::size_t x = 0; x < src.width; ++x) {
      window.clear();
      for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) window.push_back(src.clamped(long(x) + dx, long(y) + dy));
      auto mid = window.begin() + long(window.size() / 2);
      std::nth_element(window.begin(), mid, window.end());
      out(x, y) = *mid;
    }
  }
  return out;
}

FlowField estimate_flow(const Frame& onset, const Frame& apex, const FlowSolverConfig& cfg,
                        FlowDiagnostics* diagnostics) {
  cfg.validate();
  if (onset.width != apex.width || onset.height != apex.height) {
    throw DataError("estimate_flow: onset " + std::to_string(onset.width) + "x" +
                    std::to_string(onset.height) + " vs apex " + std::to_string(apex.width) + "x" +
                    std::to_string(apex.height));
  }
  const auto pyr_onset = build_pyramid(onset, cfg.pyramid_levels, cfg.pyramid_scale);
  const auto pyr_apex = build_pyramid(apex, cfg.pyramid_levels, cfg.pyramid_scale);
  if (diagnostics) diagnostics->finest_energy.clear();

  FlowField flow;
  for (std::size_t lvl = pyr_onset.size(); lvl-- > 0;) {
    const Plane& i0 = pyr_onset[lvl];
    const Plane& i1 = pyr_apex[lvl];
    if (flow.vx.values.empty()) {
      flow = {Plane(i0.width, i0.height), Plane(i0.width, i0.height)};
    } else {
      const double sx = double(i0.width) / double(flow.vx.width);
      const double sy = double(i0.height) / double(flow.vy.height);
      flow.vx = resize(flow.vx, i0.width, i0.height);
      flow.vy = resize(flow.vy, i0.width, i0.height);
      for (auto& v : flow.vx.values) v *= sx;
      for (auto& v : flow.vy.values) v *= sy;
    }
    for (std::size_t w = 0; w < cfg.outer_warps; ++w) {
      const Plane warped = warp(i1, flow);
      WarpProblem problem(i0, warped, flow, cfg);
      std::vector<double> energies;
      const bool record = diagnostics && lvl == 0;
      if (record) energies.push_back(problem.energy());
      for (std::size_t it = 0; it < cfg.irls_iters; ++it) {
        problem.irls_iteration();
        if (record) energies.push_back(problem.energy());
      }
      FlowField next = problem.total();
      flow.vx = median_filter(next.vx, cfg.median_radius);
      flow.vy = median_filter(next.vy, cfg.median_radius);
      if (record) diagnostics->finest_energy.push_back(std::move(energies));
    }
  }
  return flow;
}

Plane optical_strain(const FlowField& flow) {
  const auto& u = flow.vx;
  const auto& v = flow.vy;
  Plane out(u.width, u.height);
  for (std::size_t y = 0; y < u.height; ++y) {
    for (std::size_t x = 0; x < u.width; ++x) {
      const double ux = derivative(u, x, y, true), uy = derivative(u, x, y, false);
      const double vx = derivative(v, x, y, true), vy = derivative(v, x, y, false);
      out(x, y) = std::sqrt(ux * ux + vy * vy + 0.5 * (uy * uy + vx * vx));
    }
  }
  return out;
}

FlowMap assemble_flow_map(const FlowField& flow, std::size_t resolution) {
  if (resolution < 16) throw UsageError("flow map resolution must be >= 16");
  const Plane strain = optical_strain(flow);
  const double sx = double(resolution) / double(flow.vx.width);
  const double sy = double(resolution) / double(flow.vy.height);
  const Plane vx = resize(flow.vx, resolution, resolution);
  const Plane vy = resize(flow.vy, resolution, resolution);
  const Plane vz = resize(strain, resolution, resolution);
  FlowMap map{resolution, resolution, std::vector<float>(resolution * resolution * 3)};
  for (std::size_t i = 0; i < resolution * resolution; ++i) {
    map.values[3 * i + 0] = float(vx.values[i] * sx);
    map.values[3 * i + 1] = float(vy.values[i] * sy);
    map.values[3 * i + 2] = float(vz.values[i]);
  }
  return map;
}

std::size_t locate_apex(std::span<const Frame> frames, std::size_t onset_index) {
  if (frames.empty()) throw DataError("locate_apex: empty sequence");
  if (frames.size() < 2) throw DataError("locate_apex: need at least two frames");
  if (onset_index + 1 >= frames.size()) throw DataError("locate_apex: no frame after onset");
  auto smooth = [](const Frame& f) {
    Plane out(f.width, f.height);
    for (std::size_t y = 0; y < f.height; ++y)
      for (std::size_t x = 0; x < f.width; ++x) {
        double acc = 0;
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) acc += f.clamped(long(x) + dx, long(y) + dy);
        out(x, y) = acc / 9.0;
      }
    return out;
  };
  const Plane base = smooth(frames[onset_index]);
  std::size_t best = onset_index + 1;
  double best_dist = -1;
  for (std::size_t t = onset_index + 1; t < frames.size(); ++t) {
    if (frames[t].width != base.width || frames[t].height != base.height) {
      throw DataError("locate_apex: frame size mismatch at index " + std::to_string(t));
    }
    const Plane s = smooth(frames[t]);
    double d = 0;
    for (std::size_t i = 0; i < s.values.size(); ++i) d += (s.values[i] - base.values[i]) * (s.values[i] - base.values[i]);
    if (d > best_dist) {
      best_dist = d;
      best = t;
    }
  }
  return best;
}

}  // namespace rcn::flow
