#pragma once

// Model-based iterative reconstruction.
//
// Cost:  1/2 sum_i w_i (y_i - (A x)_i)^2  +  beta * sum_{j~k} b_jk rho(x_j - x_k)
// with the q-GGMRF potential rho(d) = |d|^p / (1 + |d / c|^(p - q)) and the
// 8-neighborhood counted once per unordered pair. Minimized by iterative
// coordinate descent; each pixel update minimizes the quadratic data term
// plus the symmetric half-quadratic majorizer of rho, so the cost never
// increases.

#include <cstdint>
#include <span>
#include <vector>

#include "ctk/core.hpp"
#include "ctk/fbp.hpp"
#include "ctk/projector.hpp"

namespace ctk {

enum class MbirInit { fbp, zero };

struct MbirParams {
  double p = 2.0;
  double q = 1.2;
  double c = 10.0 / 1000.0 * kDefaultMuWater;  // 10 HU contrast in 1/mm
  double beta = 6e6;  // MBIR std ~0.5x Hann FBP std on a water disk at i0 = 1e4, 90 views, 64^2 / 1 mm
  int max_iters = 40;
  double tol = 1e-5;  // stop when the relative cost decrease per pass drops below
  MbirInit init = MbirInit::fbp;
  std::uint64_t order_seed = 0;
  FbpParams init_fbp{};
};

void validate(const MbirParams& params);

/// Neighbor weights: axial neighbors share one weight, diagonal ones 1/sqrt(2)
/// of it; the eight sum to 1.
struct NeighborWeights {
  double axial;
  double diagonal;
};
NeighborWeights neighbor_weights();

double rho(double delta, double p, double q, double c);

/// rho'(delta) / (2 delta): curvature of the symmetric quadratic majorizer
/// touching rho at delta.
double surrogate_curvature(double delta, double p, double q, double c);

/// beta * sum over unordered neighbor pairs of b_jk rho(x_j - x_k).
double prior_cost(std::span<const double> x, int width, int height, const MbirParams& params);

/// Full cost using forward_project. Rejects negative weights.
double objective(std::span<const double> x, std::span<const double> sino, std::span<const double> weights,
                 const Geometry& g, const MbirParams& params);

struct MbirResult {
  std::vector<double> x;  // attenuation, 1/mm
  std::vector<double> objective_trace;  // entry 0 is the initial cost, then one per full pass
  int iterations_run = 0;

  Image2D image(const Geometry& g) const;
};

/// `system` may be shared across calls with the same geometry; built on the
/// fly when null. `init` overrides params.init when non-empty.
MbirResult mbir_reconstruct(std::span<const double> sino, std::span<const double> weights, const Geometry& g,
                            const MbirParams& params, const SystemMatrix* system = nullptr,
                            std::span<const double> init = {});

MbirResult mbir_reconstruct(const WeightedSinogram& data, const Geometry& g, const MbirParams& params,
                            const SystemMatrix* system = nullptr);

}  // namespace ctk
