#pragma once

// Procedural ellipse phantoms with slow z drift. Coordinates are mm with the
// origin at the grid center; x grows with column, y grows with row.

#include <cstdint>
#include <string>
#include <vector>

#include "ctk/core.hpp"

namespace ctk {

struct EllipseSpec {
  double cx = 0, cy = 0;  // mm
  double ax = 1, ay = 1;  // semi-axes, mm
  double angle = 0;       // radians
  double delta_hu = 0;    // HU added inside
  friend bool operator==(const EllipseSpec&, const EllipseSpec&) = default;
};

struct PhantomSpec {
  EllipseSpec body{0, 0, 26, 22, 0, 0};  // delta_hu is the background HU
  std::vector<EllipseSpec> inserts;
  double z_drift = 0;  // fractional change of insert centers/axes per slice
  int n_slices = 9;
  std::uint64_t seed = 0;
  int width = 64;
  int height = 64;
  double pixel_size = 1.0;
  friend bool operator==(const PhantomSpec&, const PhantomSpec&) = default;
};

enum class Difficulty { easy, standard };

/// Throws ctk::Error(data) naming the violated constraint.
void validate(const PhantomSpec& spec);

/// Insert geometry at a given slice after applying z drift.
EllipseSpec drifted(const EllipseSpec& insert, const PhantomSpec& spec, int slice_index);

/// Area fraction of each pixel covered by the ellipse, 4x4 subpixel sampling.
std::vector<float> coverage(const EllipseSpec& e, int width, int height, double pixel_size);

Image2D render_slice(const PhantomSpec& spec, int slice_index);
SliceStack render_volume(const PhantomSpec& spec);

/// Inserts stay out of the central square |x|,|y| <= keep_out_fraction * fov,
/// leaving a uniform water region for noise measurements.
inline constexpr double kKeepOutFraction = 0.2;

/// Easy: 2-4 inserts, |delta| in [60, 250] HU. Standard: 4-7 inserts,
/// |delta| in [20, 400] HU with occasional bone-like +600..1000 HU.
PhantomSpec random_spec(std::uint64_t seed, Difficulty difficulty, int n_slices = 9, int width = 64,
                        int height = 64, double pixel_size = 1.0);

std::string to_text(const PhantomSpec& spec);
PhantomSpec phantom_from_text(const std::string& text);

}  // namespace ctk
