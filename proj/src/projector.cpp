#include "ctk/projector.hpp"

#include <numbers>
#include <random>
#include <string>

#include "ctk/container.hpp"
#include "ctk/error.hpp"
#include "ctk/parallel.hpp"

namespace ctk {

Geometry Geometry::for_grid(int width, int height, double pixel_size, int n_views, double det_spacing,
                            double span_factor) {
  Geometry g;
  g.width = width;
  g.height = height;
  g.pixel_size = pixel_size;
  g.n_views = n_views;
  g.det_spacing = det_spacing > 0 ? det_spacing : pixel_size;
  const double diagonal = std::hypot(width * pixel_size, height * pixel_size);
  g.n_det = static_cast<int>(std::ceil(span_factor * diagonal / g.det_spacing));
  return g;
}

double Geometry::angle(int view) const { return std::numbers::pi * view / n_views; }

double Geometry::det_position(int det) const { return (det - 0.5 * (n_det - 1)) * det_spacing; }

void validate(const Geometry& g) {
  if (g.n_views < 1) throw data_error("geometry: n_views must be >= 1");
  if (g.n_det < 1) throw data_error("geometry: n_det must be >= 1");
  if (!(g.det_spacing > 0)) throw data_error("geometry: det_spacing must be positive");
  if (g.width < 1 || g.height < 1 || !(g.pixel_size > 0)) throw data_error("geometry: degenerate grid");
  const double diagonal = std::hypot(g.width * g.pixel_size, g.height * g.pixel_size);
  if (g.n_det * g.det_spacing < diagonal * (1 - 1e-12))
    throw data_error("geometry: detector span does not cover the image diagonal");
}

std::vector<double> forward_project(std::span<const double> image, const Geometry& g) {
  validate(g);
  if (image.size() != g.n_pixels())
    throw data_error("forward_project: image has " + std::to_string(image.size()) + " pixels, geometry expects " +
                     std::to_string(g.n_pixels()));
  std::vector<double> sino(g.n_rays());
  parallel_for(static_cast<std::size_t>(g.n_views), [&](std::size_t v) {
    for (int d = 0; d < g.n_det; ++d) {
      double sum = 0;
      trace_ray(g, static_cast<int>(v), d, [&](std::size_t j, double w) { sum += w * image[j]; });
      sino[v * g.n_det + d] = sum;
    }
  });
  return sino;
}

std::vector<double> back_project(std::span<const double> sino, const Geometry& g) {
  validate(g);
  if (sino.size() != g.n_rays())
    throw data_error("back_project: sinogram has " + std::to_string(sino.size()) + " values, geometry expects " +
                     std::to_string(g.n_rays()));
  // Per-view partial images summed in view order: bit-identical for any
  // thread count.
  const std::size_t np = g.n_pixels();
  const std::size_t block = static_cast<std::size_t>(threads());
  std::vector<double> partial(block * np);
  std::vector<double> image(np, 0.0);
  for (std::size_t v0 = 0; v0 < static_cast<std::size_t>(g.n_views); v0 += block) {
    const std::size_t nb = std::min(block, static_cast<std::size_t>(g.n_views) - v0);
    parallel_for(nb, [&](std::size_t b) {
      double* out = partial.data() + b * np;
      std::fill(out, out + np, 0.0);
      const std::size_t v = v0 + b;
      for (int d = 0; d < g.n_det; ++d) {
        const double val = sino[v * g.n_det + d];
        if (val == 0) continue;
        trace_ray(g, static_cast<int>(v), d, [&](std::size_t j, double w) { out[j] += w * val; });
      }
    });
    for (std::size_t b = 0; b < nb; ++b) {
      const double* p = partial.data() + b * np;
      for (std::size_t j = 0; j < np; ++j) image[j] += p[j];
    }
  }
  return image;
}

Sinogram forward_project(const Image2D& mu, const Geometry& g) {
  if (mu.width != g.width || mu.height != g.height || mu.pixel_size != g.pixel_size)
    throw data_error("forward_project: image grid does not match geometry");
  const std::vector<double> x(mu.values.begin(), mu.values.end());
  const auto y = forward_project(x, g);
  return {g, std::vector<float>(y.begin(), y.end())};
}

Image2D back_project(const Sinogram& sino, const Geometry& g) {
  if (!(sino.geometry == g)) throw data_error("back_project: sinogram geometry does not match");
  const std::vector<double> y(sino.values.begin(), sino.values.end());
  const auto x = back_project(y, g);
  Image2D img(g.width, g.height, g.pixel_size);
  std::copy(x.begin(), x.end(), img.values.begin());
  return img;
}

CountsSinogram simulate_counts(const Sinogram& sino, double i0, std::uint64_t seed) {
  if (!(i0 > 0)) throw data_error("simulate_counts: i0 must be positive");
  if (sino.values.size() != sino.geometry.n_rays()) throw data_error("simulate_counts: sinogram shape mismatch");
  CountsSinogram cs{sino.geometry, std::vector<double>(sino.values.size()), i0};
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < sino.values.size(); ++i) {
    const double p = sino.values[i];
    if (!(p >= 0)) throw data_error("simulate_counts: negative or non-finite line integral at ray " + std::to_string(i));
    std::poisson_distribution<long long> poisson(i0 * std::exp(-p));
    cs.counts[i] = static_cast<double>(poisson(rng));
  }
  return cs;
}

WeightedSinogram counts_to_line_integrals(const CountsSinogram& cs, double eps_counts) {
  if (!(cs.i0 > 0)) throw data_error("counts_to_line_integrals: i0 must be positive");
  if (!(eps_counts >= 1)) throw data_error("counts_to_line_integrals: eps_counts must be >= 1");
  WeightedSinogram out;
  out.sinogram.geometry = cs.geometry;
  out.sinogram.values.resize(cs.counts.size());
  out.weights.resize(cs.counts.size());
  for (std::size_t i = 0; i < cs.counts.size(); ++i) {
    const double c = std::max(cs.counts[i], eps_counts);
    out.sinogram.values[i] = static_cast<float>(-std::log(c / cs.i0));
    out.weights[i] = c;
  }
  return out;
}

SystemMatrix::SystemMatrix(const Geometry& g) : geometry_(g) {
  validate(g);
  const std::size_t np = g.n_pixels();
  std::vector<std::size_t> count(np, 0);
  for (int v = 0; v < g.n_views; ++v)
    for (int d = 0; d < g.n_det; ++d) trace_ray(g, v, d, [&](std::size_t j, double) { ++count[j]; });
  offsets_.assign(np + 1, 0);
  for (std::size_t j = 0; j < np; ++j) offsets_[j + 1] = offsets_[j] + count[j];
  rows_.resize(offsets_[np]);
  weights_.resize(offsets_[np]);
  std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
  for (int v = 0; v < g.n_views; ++v)
    for (int d = 0; d < g.n_det; ++d) {
      const auto ray = static_cast<std::uint32_t>(v * g.n_det + d);
      trace_ray(g, v, d, [&](std::size_t j, double w) {
        rows_[fill[j]] = ray;
        weights_[fill[j]] = w;
        ++fill[j];
      });
    }
}

namespace {

Container sinogram_container(const Geometry& g, double i0) {
  Container c;
  c.kind = ContainerKind::sinogram;
  c.extents = {static_cast<std::uint32_t>(g.n_views), static_cast<std::uint32_t>(g.n_det)};
  c.pixel_size = g.pixel_size;
  c.sinogram = SinogramHeader{g.det_spacing, static_cast<std::uint32_t>(g.width),
                              static_cast<std::uint32_t>(g.height), i0};
  return c;
}

Geometry geometry_from(const Container& c) {
  const auto nd = c.extents.size();
  if (c.kind != ContainerKind::sinogram || !c.sinogram || nd < 2 || nd > 3)
    throw ContainerError(ContainerErrc::kind_mismatch, "expected sinogram");
  Geometry g;
  g.n_views = static_cast<int>(c.extents[nd - 2]);
  g.n_det = static_cast<int>(c.extents[nd - 1]);
  g.det_spacing = c.sinogram->det_spacing;
  g.width = static_cast<int>(c.sinogram->grid_width);
  g.height = static_cast<int>(c.sinogram->grid_height);
  g.pixel_size = c.pixel_size;
  validate(g);
  return g;
}

}  // namespace

void write_sinogram(const std::filesystem::path& path, const Sinogram& sino) {
  validate(sino.geometry);
  auto c = sinogram_container(sino.geometry, 0.0);
  c.payload = sino.values;
  write_container(path, c);
}

Sinogram read_sinogram(const std::filesystem::path& path) {
  const auto c = read_container(path);
  if (c.extents.size() != 2) throw ContainerError(ContainerErrc::kind_mismatch, "expected a single sinogram");
  Sinogram s{geometry_from(c), {}};
  if (c.sinogram->i0 != 0) throw ContainerError(ContainerErrc::kind_mismatch, "file holds photon counts");
  if (c.dtype() != DType::f32) throw ContainerError(ContainerErrc::bad_dtype, "line integrals are f32");
  s.values = std::get<std::vector<float>>(c.payload);
  return s;
}

void write_counts(const std::filesystem::path& path, const CountsSinogram& cs) {
  validate(cs.geometry);
  if (!(cs.i0 > 0)) throw data_error("write_counts: i0 must be positive");
  auto c = sinogram_container(cs.geometry, cs.i0);
  c.payload = cs.counts;
  write_container(path, c);
}

CountsSinogram read_counts(const std::filesystem::path& path) {
  const auto c = read_container(path);
  if (c.extents.size() != 2) throw ContainerError(ContainerErrc::kind_mismatch, "expected a single sinogram");
  CountsSinogram cs{geometry_from(c), {}, c.sinogram->i0};
  if (!(cs.i0 > 0)) throw ContainerError(ContainerErrc::kind_mismatch, "file holds line integrals");
  if (c.dtype() != DType::f64) throw ContainerError(ContainerErrc::bad_dtype, "counts are f64");
  cs.counts = std::get<std::vector<double>>(c.payload);
  return cs;
}

void write_counts_volume(const std::filesystem::path& path, std::span<const CountsSinogram> slices,
                         double slice_spacing) {
  if (slices.empty()) throw data_error("write_counts_volume: no slices");
  const auto& g = slices[0].geometry;
  validate(g);
  auto c = sinogram_container(g, slices[0].i0);
  if (!(slices[0].i0 > 0)) throw data_error("write_counts_volume: i0 must be positive");
  c.extents.insert(c.extents.begin(), static_cast<std::uint32_t>(slices.size()));
  c.slice_spacing = slice_spacing;
  std::vector<double> all;
  for (const auto& s : slices) {
    if (!(s.geometry == g) || s.i0 != slices[0].i0 || s.counts.size() != g.n_rays())
      throw data_error("write_counts_volume: slices differ in geometry or i0");
    all.insert(all.end(), s.counts.begin(), s.counts.end());
  }
  c.payload = std::move(all);
  write_container(path, c);
}

std::vector<CountsSinogram> read_counts_volume(const std::filesystem::path& path) {
  const auto c = read_container(path);
  const Geometry g = geometry_from(c);
  if (c.extents.size() != 3) throw ContainerError(ContainerErrc::kind_mismatch, "expected a sinogram stack");
  if (!(c.sinogram->i0 > 0)) throw ContainerError(ContainerErrc::kind_mismatch, "file holds line integrals");
  if (c.dtype() != DType::f64) throw ContainerError(ContainerErrc::bad_dtype, "counts are f64");
  const auto& all = std::get<std::vector<double>>(c.payload);
  std::vector<CountsSinogram> out;
  const std::size_t n = g.n_rays();
  for (std::uint32_t k = 0; k < c.extents[0]; ++k)
    out.push_back({g, std::vector<double>(all.begin() + k * n, all.begin() + (k + 1) * n), c.sinogram->i0});
  return out;
}

}  // namespace ctk
