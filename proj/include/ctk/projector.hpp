#pragma once

// Parallel-beam projector.
//
// View v sits at angle theta_v = pi * v / n_views. Detector bin d measures
// the line x cos(theta) + y sin(theta) = s_d with
// s_d = (d - (n_det - 1) / 2) * det_spacing. Line integrals use Joseph
// interpolation: the ray is sampled once per row (or column) along its
// dominant axis and linearly interpolated between the two nearest pixel
// centers, zero outside the grid. back_project applies the transpose of
// exactly the same weights.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ctk/core.hpp"

namespace ctk {

struct Geometry {
  int n_views = 90;
  int n_det = 136;
  double det_spacing = 1.0;  // mm
  int width = 64;
  int height = 64;
  double pixel_size = 1.0;  // mm

  /// Detector span of span_factor times the image diagonal, det_spacing
  /// defaulting to the pixel size.
  static Geometry for_grid(int width, int height, double pixel_size, int n_views, double det_spacing = 0,
                           double span_factor = 1.5);

  double angle(int view) const;
  double det_position(int det) const;
  std::size_t n_rays() const { return static_cast<std::size_t>(n_views) * n_det; }
  std::size_t n_pixels() const { return static_cast<std::size_t>(width) * height; }
  friend bool operator==(const Geometry&, const Geometry&) = default;
};

void validate(const Geometry& g);

/// Line integrals, n_views x n_det, view-major.
struct Sinogram {
  Geometry geometry;
  std::vector<float> values;
  friend bool operator==(const Sinogram&, const Sinogram&) = default;
};

struct CountsSinogram {
  Geometry geometry;
  std::vector<double> counts;  // nonnegative integers
  double i0 = 1e4;
  friend bool operator==(const CountsSinogram&, const CountsSinogram&) = default;
};

/// Line integrals plus statistical weights recovered from counts.
struct WeightedSinogram {
  Sinogram sinogram;
  std::vector<double> weights;
};

/// Calls visit(pixel_index, weight) for every pixel the ray touches, in a
/// fixed order.
template <class Visit>
void trace_ray(const Geometry& g, int view, int det, Visit&& visit);

// 64-bit primitives.
std::vector<double> forward_project(std::span<const double> image, const Geometry& g);
std::vector<double> back_project(std::span<const double> sino, const Geometry& g);

/// Attenuation image (1/mm) to line integrals.
Sinogram forward_project(const Image2D& mu, const Geometry& g);
/// Exact adjoint; result in the same units as the image argument of forward_project.
Image2D back_project(const Sinogram& sino, const Geometry& g);

/// counts ~ Poisson(i0 * exp(-p)), deterministic for a given seed.
CountsSinogram simulate_counts(const Sinogram& sino, double i0, std::uint64_t seed);

/// p = -ln(max(c, eps) / i0), weight = max(c, eps).
WeightedSinogram counts_to_line_integrals(const CountsSinogram& cs, double eps_counts = 1.0);

/// Column-compressed system matrix built from the same ray weights; each
/// column holds the rays touching one pixel in increasing ray order.
class SystemMatrix {
 public:
  explicit SystemMatrix(const Geometry& g);

  const Geometry& geometry() const { return geometry_; }
  std::span<const std::uint32_t> rows(std::size_t pixel) const {
    return {rows_.data() + offsets_[pixel], offsets_[pixel + 1] - offsets_[pixel]};
  }
  std::span<const double> weights(std::size_t pixel) const {
    return {weights_.data() + offsets_[pixel], offsets_[pixel + 1] - offsets_[pixel]};
  }
  std::size_t nnz() const { return weights_.size(); }

 private:
  Geometry geometry_;
  std::vector<std::size_t> offsets_;
  std::vector<std::uint32_t> rows_;
  std::vector<double> weights_;
};

void write_sinogram(const std::filesystem::path& path, const Sinogram& sino);
Sinogram read_sinogram(const std::filesystem::path& path);
void write_counts(const std::filesystem::path& path, const CountsSinogram& cs);
CountsSinogram read_counts(const std::filesystem::path& path);
/// All slices of a volume in one container, extents {slices, views, det}.
void write_counts_volume(const std::filesystem::path& path, std::span<const CountsSinogram> slices,
                         double slice_spacing);
std::vector<CountsSinogram> read_counts_volume(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

template <class Visit>
void trace_ray(const Geometry& g, int view, int det, Visit&& visit) {
  const double theta = g.angle(view);
  const double c = std::cos(theta), s = std::sin(theta);
  const double sd = g.det_position(det);
  const double ps = g.pixel_size;
  const double xc = 0.5 * (g.width - 1), yc = 0.5 * (g.height - 1);
  if (std::abs(c) >= std::abs(s)) {
    // Ray runs mostly along y: one sample per row.
    const double step = ps / std::abs(c);
    for (int iy = 0; iy < g.height; ++iy) {
      const double y = (iy - yc) * ps;
      const double fx = (sd - y * s) / c / ps + xc;
      const double fl = std::floor(fx);
      if (fl < -1.0 || fl > g.width) continue;
      const int i0 = static_cast<int>(fl);
      const double f = fx - fl;
      const std::size_t row = static_cast<std::size_t>(iy) * g.width;
      if (i0 >= 0 && i0 < g.width) visit(row + i0, step * (1.0 - f));
      if (i0 + 1 >= 0 && i0 + 1 < g.width && f > 0) visit(row + i0 + 1, step * f);
    }
  } else {
    const double step = ps / std::abs(s);
    for (int ix = 0; ix < g.width; ++ix) {
      const double x = (ix - xc) * ps;
      const double fy = (sd - x * c) / s / ps + yc;
      const double fl = std::floor(fy);
      if (fl < -1.0 || fl > g.height) continue;
      const int j0 = static_cast<int>(fl);
      const double f = fy - fl;
      if (j0 >= 0 && j0 < g.height) visit(static_cast<std::size_t>(j0) * g.width + ix, step * (1.0 - f));
      if (j0 + 1 >= 0 && j0 + 1 < g.height && f > 0)
        visit(static_cast<std::size_t>(j0 + 1) * g.width + ix, step * f);
    }
  }
}

}  // namespace ctk
