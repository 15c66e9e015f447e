#include "ctk/mbir.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <string>

#include "ctk/error.hpp"

namespace ctk {

void validate(const MbirParams& m) {
  if (!(1.0 <= m.q && m.q <= m.p && m.p <= 2.0)) throw data_error("mbir: need 1 <= q <= p <= 2");
  if (!(m.c > 0)) throw data_error("mbir: c must be positive");
  if (!(m.beta >= 0)) throw data_error("mbir: beta must be >= 0");
  if (!(m.tol > 0)) throw data_error("mbir: tol must be positive");
  if (m.max_iters < 0) throw data_error("mbir: max_iters must be >= 0");
}

NeighborWeights neighbor_weights() {
  const double axial = 1.0 / (4.0 + 4.0 / std::sqrt(2.0));
  return {axial, axial / std::sqrt(2.0)};
}

double rho(double delta, double p, double q, double c) {
  const double a = std::abs(delta);
  if (a == 0) return 0.0;
  return std::pow(a, p) / (1.0 + std::pow(a / c, p - q));
}

double surrogate_curvature(double delta, double p, double q, double c) {
  // At delta = 0 the limit is finite only for p = 2; for p < 2 evaluate
  // just off zero.
  double a = std::abs(delta);
  if (a == 0) {
    if (p == 2.0) return 1.0;
    a = 1e-9 * c;
  }
  const double u = std::pow(a / c, p - q);
  return std::pow(a, p - 2.0) * (p + q * u) / (2.0 * (1.0 + u) * (1.0 + u));
}

namespace {

// Offsets covering each unordered neighbor pair exactly once.
constexpr int kHalfOffsets[4][2] = {{1, 0}, {-1, 1}, {0, 1}, {1, 1}};
constexpr int kAllOffsets[8][2] = {{-1, -1}, {0, -1}, {1, -1}, {-1, 0}, {1, 0}, {-1, 1}, {0, 1}, {1, 1}};

}  // namespace

double prior_cost(std::span<const double> x, int width, int height, const MbirParams& m) {
  if (m.beta == 0) return 0.0;
  const auto nw = neighbor_weights();
  double sum = 0;
  for (int y = 0; y < height; ++y)
    for (int xi = 0; xi < width; ++xi) {
      const double v = x[static_cast<std::size_t>(y) * width + xi];
      for (const auto& o : kHalfOffsets) {
        const int nx = xi + o[0], ny = y + o[1];
        if (nx < 0 || nx >= width || ny < 0 || ny >= height) continue;
        const double b = (o[0] != 0 && o[1] != 0) ? nw.diagonal : nw.axial;
        sum += b * rho(v - x[static_cast<std::size_t>(ny) * width + nx], m.p, m.q, m.c);
      }
    }
  return m.beta * sum;
}

double objective(std::span<const double> x, std::span<const double> sino, std::span<const double> weights,
                 const Geometry& g, const MbirParams& params) {
  validate(params);
  if (sino.size() != g.n_rays() || weights.size() != g.n_rays() || x.size() != g.n_pixels())
    throw data_error("objective: shapes do not match geometry");
  for (double w : weights)
    if (!(w >= 0)) throw data_error("objective: negative weight");
  const auto ax = forward_project(x, g);
  double data = 0;
  for (std::size_t i = 0; i < ax.size(); ++i) {
    const double e = sino[i] - ax[i];
    data += weights[i] * e * e;
  }
  return 0.5 * data + prior_cost(x, g.width, g.height, params);
}

Image2D MbirResult::image(const Geometry& g) const {
  Image2D img(g.width, g.height, g.pixel_size);
  std::transform(x.begin(), x.end(), img.values.begin(), [](double v) { return static_cast<float>(v); });
  return img;
}

MbirResult mbir_reconstruct(std::span<const double> sino, std::span<const double> weights, const Geometry& g,
                            const MbirParams& m, const SystemMatrix* system, std::span<const double> init) {
  validate(m);
  validate(g);
  if (sino.size() != g.n_rays() || weights.size() != g.n_rays())
    throw data_error("mbir: sinogram/weights shape does not match geometry");
  for (double w : weights)
    if (!(w >= 0)) throw data_error("mbir: negative weight");

  std::optional<SystemMatrix> local;
  if (!system || !(system->geometry() == g)) {
    local.emplace(g);
    system = &*local;
  }
  const std::size_t np = g.n_pixels();

  MbirResult result;
  if (!init.empty()) {
    if (init.size() != np) throw data_error("mbir: init image shape mismatch");
    result.x.assign(init.begin(), init.end());
  } else if (m.init == MbirInit::fbp) {
    result.x = fbp_reconstruct(sino, g, m.init_fbp);
  } else {
    result.x.assign(np, 0.0);
  }
  auto& x = result.x;

  // Residual e = y - A x, kept current through every pixel update.
  std::vector<double> e(sino.begin(), sino.end());
  std::vector<double> theta2(np, 0.0);
  for (std::size_t j = 0; j < np; ++j) {
    const auto rows = system->rows(j);
    const auto a = system->weights(j);
    double t2 = 0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      e[rows[k]] -= a[k] * x[j];
      t2 += a[k] * a[k] * weights[rows[k]];
    }
    theta2[j] = t2;
  }

  auto cost = [&] {
    double data = 0;
    for (std::size_t i = 0; i < e.size(); ++i) data += weights[i] * e[i] * e[i];
    return 0.5 * data + prior_cost(x, g.width, g.height, m);
  };

  std::vector<std::size_t> order(np);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(m.order_seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto nw = neighbor_weights();
  result.objective_trace.push_back(cost());
  if (!std::isfinite(result.objective_trace.back())) throw numerical_error("mbir: initial cost is not finite");

  for (int it = 0; it < m.max_iters; ++it) {
    for (std::size_t j : order) {
      const auto rows = system->rows(j);
      const auto a = system->weights(j);
      double theta1 = 0;
      for (std::size_t k = 0; k < rows.size(); ++k) theta1 -= a[k] * weights[rows[k]] * e[rows[k]];

      const int xi = static_cast<int>(j % g.width), yi = static_cast<int>(j / g.width);
      double num = 0, den = 0;
      if (m.beta > 0) {
        for (const auto& o : kAllOffsets) {
          const int nx = xi + o[0], ny = yi + o[1];
          if (nx < 0 || nx >= g.width || ny < 0 || ny >= g.height) continue;
          const double xk = x[static_cast<std::size_t>(ny) * g.width + nx];
          const double b = (o[0] != 0 && o[1] != 0) ? nw.diagonal : nw.axial;
          const double coef = b * surrogate_curvature(x[j] - xk, m.p, m.q, m.c);
          num += coef * xk;
          den += coef;
        }
      }
      const double denom = theta2[j] + 2.0 * m.beta * den;
      if (denom <= 0) continue;
      const double v = (theta2[j] * x[j] - theta1 + 2.0 * m.beta * num) / denom;
      if (!std::isfinite(v))
        throw numerical_error("mbir: non-finite update at pixel " + std::to_string(j) + " in pass " +
                              std::to_string(it + 1));
      const double dv = v - x[j];
      if (dv == 0) continue;
      for (std::size_t k = 0; k < rows.size(); ++k) e[rows[k]] -= a[k] * dv;
      x[j] = v;
    }
    const double c = cost();
    if (!std::isfinite(c)) throw numerical_error("mbir: cost became non-finite in pass " + std::to_string(it + 1));
    const double prev = result.objective_trace.back();
    result.objective_trace.push_back(c);
    result.iterations_run = it + 1;
    if (prev == 0 || (prev - c) / std::abs(prev) < m.tol) break;
  }
  return result;
}

MbirResult mbir_reconstruct(const WeightedSinogram& data, const Geometry& g, const MbirParams& params,
                            const SystemMatrix* system) {
  if (!(data.sinogram.geometry == g)) throw data_error("mbir: sinogram geometry does not match");
  const std::vector<double> y(data.sinogram.values.begin(), data.sinogram.values.end());
  return mbir_reconstruct(y, data.weights, g, params, system);
}

}  // namespace ctk
