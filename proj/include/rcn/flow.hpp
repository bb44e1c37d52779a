#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace rcn::flow {

/// Single-channel real image, row-major.
struct Plane {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;

  Plane() = default;
  Plane(std::size_t w, std::size_t h, double fill = 0) : width(w), height(h), values(w * h, fill) {}

  double& operator()(std::size_t x, std::size_t y) { return values[y * width + x]; }
  double operator()(std::size_t x, std::size_t y) const { return values[y * width + x]; }
  /// Replicate-border access.
  double clamped(long x, long y) const;
  /// Bilinear sample at a real position, clamped to the border.
  double sample(double x, double y) const;

  bool operator==(const Plane&) const = default;
};

/// Grayscale frame: intensities in [0,1], both sides at least 16 pixels.
using Frame = Plane;
void validate_frame(const Frame& frame);

struct FlowField {
  Plane vx;  // horizontal displacement, pixels
  Plane vy;  // vertical displacement, pixels
};

/// H x W x 3 map [Vx, Vy, Vz], channel-interleaved, 32-bit.
struct FlowMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;

  float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * 3 + c]; }
  float& at(std::size_t y, std::size_t x, std::size_t c) { return values[(y * width + x) * 3 + c]; }
  bool operator==(const FlowMap&) const = default;
};

struct FlowSolverConfig {
  std::size_t pyramid_levels = 3;
  double pyramid_scale = 0.5;
  std::size_t outer_warps = 3;
  std::size_t irls_iters = 10;
  double lorentzian_sigma = 0.03;
  double smoothness_lambda = 0.1;
  std::size_t median_radius = 2;
  std::size_t jacobi_sweeps = 30;

  void validate() const;
};

/// Per-IRLS-iteration objective values recorded at the finest level, one
/// series per warp (first entry is the objective before the first iteration).
struct FlowDiagnostics {
  std::vector<std::vector<double>> finest_energy;
};

double lorentzian(double z, double sigma);

/// Robust coarse-to-fine flow from onset to apex: positive Vx means content
/// moved right between the two frames.
FlowField estimate_flow(const Frame& onset, const Frame& apex, const FlowSolverConfig& cfg = {},
                        FlowDiagnostics* diagnostics = nullptr);

/// sqrt(ux^2 + vy^2 + (uy^2 + vx^2)/2): central differences inside, one-sided at borders.
Plane optical_strain(const FlowField& flow);

/// Resamples Vx, Vy and the strain of `flow` to R x R. Displacements are
/// rescaled into target-pixel units; strain is not.
FlowMap assemble_flow_map(const FlowField& flow, std::size_t resolution);

/// Bilinear when enlarging, area-weighted averaging when shrinking.
Plane resize(const Plane& src, std::size_t width, std::size_t height);

/// img sampled at (x + vx, y + vy).
Plane warp(const Plane& img, const FlowField& flow);

Plane median_filter(const Plane& src, std::size_t radius);

/// Frame index after `onset_index` farthest (L2, after 3x3 box smoothing) from
/// the onset frame; first maximum wins.
std::size_t locate_apex(std::span<const Frame> frames, std::size_t onset_index);

}  // namespace rcn::flow
