#pragma once

#include <span>
#include <vector>

#include "ctk/core.hpp"
#include "ctk/projector.hpp"

namespace ctk {

enum class FilterWindow { ramlak, hann };

struct FbpParams {
  FilterWindow window = FilterWindow::hann;
  int pad_factor = 2;  // power of two >= 2
};

void validate(const FbpParams& p);

/// Zero-padded row length: pad_factor * next_pow2(n_det).
int padded_length(int n_det, const FbpParams& p);

/// Frequency response of the discrete filter, bins 0..L/2 (units 1/mm^2).
/// Built from the DFT of the spatial Ram-Lak kernel h[0] = 1/(4 t^2),
/// h[odd n] = -1/(pi^2 n^2 t^2); the DC bin is then set to zero.
std::vector<double> ramp_response(int n_det, double det_spacing, const FbpParams& p);

/// Filters every view along the detector axis (linear convolution through
/// the zero padding), scaled by det_spacing.
std::vector<double> ramp_filter(std::span<const double> sino, const Geometry& g, const FbpParams& p);
Sinogram ramp_filter(const Sinogram& sino, const FbpParams& p);

/// Pixel-driven backprojection of the filtered views with linear detector
/// interpolation, scaled by pi / n_views. Output in 1/mm.
std::vector<double> fbp_reconstruct(std::span<const double> sino, const Geometry& g, const FbpParams& p);
Image2D fbp_reconstruct(const Sinogram& sino, const Geometry& g, const FbpParams& p = {});

}  // namespace ctk
