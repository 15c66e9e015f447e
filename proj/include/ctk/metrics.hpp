#pragma once

// Image-quality metrics: PSNR against a reference, ROI statistics, line
// profiles, difference images and the noise power spectrum.
//
// NPS convention: each N x N patch f (after detrending) gives
//   P(u, v) = dx * dy / (N * N) * |DFT2(f)|^2      [HU^2 mm^2]
// on the frequency grid du = 1 / (N dx). Patches are averaged. With this
// normalization sum(P) du dv equals the mean of f^2 over the patch, i.e. the
// detrended variance.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ctk/core.hpp"

namespace ctk {

inline constexpr double kPsnrCap = 200.0;  // dB, returned for identical images
inline constexpr double kDefaultDataRange = 2000.0;  // HU

/// 20 log10(range / RMSE); kPsnrCap when RMSE is zero.
double psnr(const Image2D& img, const Image2D& ref, double data_range = kDefaultDataRange);

struct RoiStats {
  double mean = 0;
  double std = 0;  // n - 1 denominator
  std::size_t count = 0;
};

RoiStats roi_stats(const Image2D& img, const RoiSpec& roi);

struct ProfilePoint {
  double position;  // mm, pixel center
  double value;
};

/// Pixels x_start..x_end (inclusive) of one row, left to right.
std::vector<ProfilePoint> line_profile(const Image2D& img, int row, int x_start, int x_end);

/// img - ref.
Image2D difference_image(const Image2D& img, const Image2D& ref);

enum class Detrend { mean, plane };

struct NpsParams {
  int patch_size = 16;
  int stride = 4;
  Detrend detrend = Detrend::mean;
  RoiSpec roi = RoiSpec::rect(20, 20, 24, 24);
};

void validate(const NpsParams& p, int width, int height);

/// Averaged periodogram in FFT order: index [v * N + u], frequency index u
/// meaning u for u < N/2 and u - N above.
struct NpsMap {
  int size = 0;
  double pixel_size = 1.0;
  std::vector<double> power;
  std::size_t patches = 0;
  double mean_variance = 0;  // mean over patches of the detrended mean square

  double frequency_step() const { return 1.0 / (size * pixel_size); }
  /// sum(P) du dv relative to mean_variance, minus one.
  double parseval_error() const;
};

/// Patches: patch_size squares stepped by stride from the ROI bounding-box
/// corner, kept when every pixel center lies in the ROI.
std::size_t nps_patch_count(const NpsParams& p, int width, int height);

NpsMap nps2d(const Image2D& img, const NpsParams& params);
/// Pools the patches of several equally sized images.
NpsMap nps2d(std::span<const Image2D> images, const NpsParams& params);

struct NpsProfile {
  std::vector<double> bin_centers;  // cycles/mm
  std::vector<double> power;        // HU^2 mm^2
  std::vector<std::size_t> counts;
};

/// Annular average over n_bins equal-width bins covering (0, Nyquist].
/// Samples beyond Nyquist (the corners) and DC are left out.
NpsProfile nps_radial(const NpsMap& map, int n_bins);

/// Euclidean distance between the power arrays. Rejects differing bins.
double profile_distance(const NpsProfile& a, const NpsProfile& b);

struct LabeledProfile {
  std::string label;
  NpsProfile profile;
};

struct ProfileDistance {
  std::string label;
  double distance;
};

/// Distance of every profile to the one labeled `reference`.
std::vector<ProfileDistance> nps_compare(std::span<const LabeledProfile> profiles,
                                         const std::string& reference = "MBIR");

struct MetricsRow {
  std::string volume;
  std::string method;
  int slice = 0;
  double psnr_db = 0;
  double roi_mean = 0;
  double roi_std = 0;
};

struct MetricsAggregate {
  std::string method;
  double psnr_db = 0;
  double roi_mean = 0;
  double roi_std = 0;
  std::size_t rows = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::vector<MetricsAggregate> aggregates;  // methods in first-seen order
};

/// Fills report.aggregates with per-method means over rows.
void aggregate(MetricsReport& report);

// CSV exports. Columns:
//   metrics:    volume,method,slice,psnr_db,roi_mean_hu,roi_std_hu
//   aggregates: method,psnr_db,roi_mean_hu,roi_std_hu,n_slices
//   nps:        method,frequency_per_mm,power_hu2_mm2,count
//   distances:  method,distance_to_<reference>
std::string metrics_csv(const MetricsReport& report);
std::string aggregates_csv(const MetricsReport& report);
std::string nps_csv(std::span<const LabeledProfile> profiles);
std::string distances_csv(std::span<const ProfileDistance> d, const std::string& reference = "MBIR");

}  // namespace ctk
