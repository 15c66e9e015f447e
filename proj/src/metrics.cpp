#include "ctk/metrics.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <sstream>

#include "ctk/error.hpp"
#include "ctk/text.hpp"
#include "fftw_lock.hpp"

namespace ctk {

namespace {

void require_same_grid(const Image2D& a, const Image2D& b, const char* what) {
  validate(a);
  validate(b);
  if (a.width != b.width || a.height != b.height)
    throw data_error(std::string(what) + ": image is " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                     ", reference is " + std::to_string(b.width) + "x" + std::to_string(b.height));
}

struct Patch {
  int x0, y0;
};

std::vector<Patch> patches(const NpsParams& p, int width, int height) {
  const auto idx = roi_indices(p.roi, width, height);
  std::vector<char> mask(static_cast<std::size_t>(width) * height, 0);
  int xmin = width, ymin = height, xmax = -1, ymax = -1;
  for (auto i : idx) {
    mask[i] = 1;
    const int x = static_cast<int>(i % width), y = static_cast<int>(i / width);
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  std::vector<Patch> out;
  const int n = p.patch_size;
  for (int y0 = ymin; y0 + n - 1 <= ymax; y0 += p.stride)
    for (int x0 = xmin; x0 + n - 1 <= xmax; x0 += p.stride) {
      bool inside = true;
      for (int y = y0; y < y0 + n && inside; ++y)
        for (int x = x0; x < x0 + n; ++x)
          if (!mask[static_cast<std::size_t>(y) * width + x]) {
            inside = false;
            break;
          }
      if (inside) out.push_back({x0, y0});
    }
  return out;
}

// Least-squares fit of a + b x + c y over an N x N patch with centered
// coordinates; the x and y columns are orthogonal to each other and to 1.
void detrend_plane(std::vector<double>& f, int n) {
  double sum = 0, sx = 0, sy = 0, xx = 0;
  const double c = 0.5 * (n - 1);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double v = f[y * n + x];
      sum += v;
      sx += v * (x - c);
      sy += v * (y - c);
    }
  for (int x = 0; x < n; ++x) xx += (x - c) * (x - c);
  xx *= n;
  const double a = sum / (n * n), b = sx / xx, cc = sy / xx;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) f[y * n + x] -= a + b * (x - c) + cc * (y - c);
}

class Fft2 {
 public:
  explicit Fft2(int n) : n_(n) {
    buf_ = fftw_alloc_complex(static_cast<std::size_t>(n) * n);
    std::lock_guard lock(detail::fftw_planner_mutex());
    plan_ = fftw_plan_dft_2d(n, n, buf_, buf_, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  ~Fft2() {
    {
      std::lock_guard lock(detail::fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(buf_);
  }
  Fft2(const Fft2&) = delete;
  Fft2& operator=(const Fft2&) = delete;

  // Adds |DFT2(f)|^2 into acc.
  void accumulate_power(const std::vector<double>& f, std::vector<double>& acc) {
    const std::size_t nn = static_cast<std::size_t>(n_) * n_;
    for (std::size_t i = 0; i < nn; ++i) {
      buf_[i][0] = f[i];
      buf_[i][1] = 0.0;
    }
    fftw_execute(plan_);
    for (std::size_t i = 0; i < nn; ++i) acc[i] += buf_[i][0] * buf_[i][0] + buf_[i][1] * buf_[i][1];
  }

 private:
  int n_;
  fftw_complex* buf_;
  fftw_plan plan_;
};

}  // namespace

double psnr(const Image2D& img, const Image2D& ref, double data_range) {
  require_same_grid(img, ref, "psnr");
  if (!(data_range > 0)) throw usage_error("psnr: data range must be > 0");
  double se = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double d = double(img.values[i]) - double(ref.values[i]);
    se += d * d;
  }
  if (se == 0) return kPsnrCap;
  const double rmse = std::sqrt(se / double(img.size()));
  return std::min(kPsnrCap, 20.0 * std::log10(data_range / rmse));
}

RoiStats roi_stats(const Image2D& img, const RoiSpec& roi) {
  const auto v = extract_roi(img, roi);
  if (v.size() < 4) throw data_error("ROI covers fewer than 4 pixels");
  RoiStats s;
  s.count = v.size();
  for (float x : v) s.mean += x;
  s.mean /= double(v.size());
  double ss = 0;
  for (float x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / double(v.size() - 1));
  return s;
}

std::vector<ProfilePoint> line_profile(const Image2D& img, int row, int x_start, int x_end) {
  validate(img);
  if (row < 0 || row >= img.height || x_start < 0 || x_end >= img.width || x_start > x_end)
    throw data_error("line profile row " + std::to_string(row) + ", x " + std::to_string(x_start) + ".." +
                     std::to_string(x_end) + " outside " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + " image");
  std::vector<ProfilePoint> out;
  for (int x = x_start; x <= x_end; ++x)
    out.push_back({(x - 0.5 * (img.width - 1)) * img.pixel_size, double(img.at(x, row))});
  return out;
}

Image2D difference_image(const Image2D& img, const Image2D& ref) {
  require_same_grid(img, ref, "difference image");
  Image2D d(img.width, img.height, img.pixel_size);
  for (std::size_t i = 0; i < d.size(); ++i) d.values[i] = img.values[i] - ref.values[i];
  return d;
}

void validate(const NpsParams& p, int width, int height) {
  if (p.patch_size < 2 || !std::has_single_bit(static_cast<unsigned>(p.patch_size)))
    throw usage_error("NPS patch size must be a power of two >= 2");
  if (p.stride < 1) throw usage_error("NPS stride must be >= 1");
  validate(p.roi, width, height);
  const auto n = patches(p, width, height).size();
  if (n < 8) throw data_error("NPS needs at least 8 patches inside the ROI, found " + std::to_string(n));
}

std::size_t nps_patch_count(const NpsParams& p, int width, int height) {
  validate(p.roi, width, height);
  return patches(p, width, height).size();
}

double NpsMap::parseval_error() const {
  double s = 0;
  for (double v : power) s += v;
  const double du = frequency_step();
  return s * du * du / mean_variance - 1.0;
}

NpsMap nps2d(const Image2D& img, const NpsParams& params) { return nps2d(std::span<const Image2D>(&img, 1), params); }

NpsMap nps2d(std::span<const Image2D> images, const NpsParams& params) {
  if (images.empty()) throw usage_error("nps2d: no images");
  for (const auto& im : images) require_same_grid(im, images[0], "nps2d");
  validate(params, images[0].width, images[0].height);
  const int n = params.patch_size;
  const auto list = patches(params, images[0].width, images[0].height);
  NpsMap map;
  map.size = n;
  map.pixel_size = images[0].pixel_size;
  map.power.assign(static_cast<std::size_t>(n) * n, 0.0);
  Fft2 fft(n);
  std::vector<double> f(static_cast<std::size_t>(n) * n);
  double var_sum = 0;
  for (const auto& im : images)
    for (const auto& p : list) {
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) f[y * n + x] = im.at(p.x0 + x, p.y0 + y);
      if (params.detrend == Detrend::plane) {
        detrend_plane(f, n);
      } else {
        double m = 0;
        for (double v : f) m += v;
        m /= double(f.size());
        for (double& v : f) v -= m;
      }
      double ms = 0;
      for (double v : f) ms += v * v;
      var_sum += ms / double(f.size());
      fft.accumulate_power(f, map.power);
      ++map.patches;
    }
  const double scale = map.pixel_size * map.pixel_size / (double(n) * n) / double(map.patches);
  for (double& v : map.power) v *= scale;
  map.mean_variance = var_sum / double(map.patches);
  return map;
}

NpsProfile nps_radial(const NpsMap& map, int n_bins) {
  if (n_bins < 4) throw usage_error("NPS radial profile needs at least 4 bins");
  const int n = map.size;
  if (n < 2 || map.power.size() != static_cast<std::size_t>(n) * n) throw data_error("malformed NPS map");
  const double du = map.frequency_step();
  const double nyquist = 0.5 / map.pixel_size;
  const double width = nyquist / n_bins;
  NpsProfile prof;
  prof.power.assign(n_bins, 0.0);
  prof.counts.assign(n_bins, 0);
  for (int b = 0; b < n_bins; ++b) prof.bin_centers.push_back((b + 0.5) * width);
  for (int v = 0; v < n; ++v)
    for (int u = 0; u < n; ++u) {
      if (!u && !v) continue;
      const int ku = u < n / 2 ? u : u - n, kv = v < n / 2 ? v : v - n;
      // Radius in units of du; compare in integers to keep the edges exact.
      const long long r2 = 1LL * ku * ku + 1LL * kv * kv;
      const double r = std::sqrt(double(r2));
      if (4 * r2 > 1LL * n * n) continue;  // beyond Nyquist
      int b = static_cast<int>(std::ceil(r * du / width - 1e-9)) - 1;
      b = std::clamp(b, 0, n_bins - 1);
      prof.power[b] += map.power[static_cast<std::size_t>(v) * n + u];
      ++prof.counts[b];
    }
  for (int b = 0; b < n_bins; ++b)
    if (prof.counts[b]) prof.power[b] /= double(prof.counts[b]);
  return prof;
}

double profile_distance(const NpsProfile& a, const NpsProfile& b) {
  if (a.bin_centers != b.bin_centers) throw data_error("NPS profiles use different binning");
  double s = 0;
  for (std::size_t i = 0; i < a.power.size(); ++i) s += (a.power[i] - b.power[i]) * (a.power[i] - b.power[i]);
  return std::sqrt(s);
}

std::vector<ProfileDistance> nps_compare(std::span<const LabeledProfile> profiles, const std::string& reference) {
  const LabeledProfile* ref = nullptr;
  for (const auto& p : profiles)
    if (p.label == reference) ref = &p;
  if (!ref) throw data_error("no NPS profile labeled " + reference);
  std::vector<ProfileDistance> out;
  for (const auto& p : profiles) out.push_back({p.label, profile_distance(p.profile, ref->profile)});
  return out;
}

void aggregate(MetricsReport& report) {
  report.aggregates.clear();
  for (const auto& r : report.rows) {
    auto it = std::find_if(report.aggregates.begin(), report.aggregates.end(),
                           [&](const MetricsAggregate& a) { return a.method == r.method; });
    if (it == report.aggregates.end()) {
      report.aggregates.push_back({r.method, 0, 0, 0, 0});
      it = report.aggregates.end() - 1;
    }
    it->psnr_db += r.psnr_db;
    it->roi_mean += r.roi_mean;
    it->roi_std += r.roi_std;
    ++it->rows;
  }
  for (auto& a : report.aggregates) {
    a.psnr_db /= double(a.rows);
    a.roi_mean /= double(a.rows);
    a.roi_std /= double(a.rows);
  }
}

std::string metrics_csv(const MetricsReport& report) {
  std::ostringstream o;
  o << "volume,method,slice,psnr_db,roi_mean_hu,roi_std_hu\n";
  for (const auto& r : report.rows)
    o << r.volume << ',' << r.method << ',' << r.slice << ',' << format_double(r.psnr_db) << ','
      << format_double(r.roi_mean) << ',' << format_double(r.roi_std) << '\n';
  return o.str();
}

std::string aggregates_csv(const MetricsReport& report) {
  std::ostringstream o;
  o << "method,psnr_db,roi_mean_hu,roi_std_hu,n_slices\n";
  for (const auto& a : report.aggregates)
    o << a.method << ',' << format_double(a.psnr_db) << ',' << format_double(a.roi_mean) << ','
      << format_double(a.roi_std) << ',' << a.rows << '\n';
  return o.str();
}

std::string nps_csv(std::span<const LabeledProfile> profiles) {
  std::ostringstream o;
  o << "method,frequency_per_mm,power_hu2_mm2,count\n";
  for (const auto& p : profiles)
    for (std::size_t b = 0; b < p.profile.power.size(); ++b)
      o << p.label << ',' << format_double(p.profile.bin_centers[b]) << ',' << format_double(p.profile.power[b])
        << ',' << p.profile.counts[b] << '\n';
  return o.str();
}

std::string distances_csv(std::span<const ProfileDistance> d, const std::string& reference) {
  std::ostringstream o;
  o << "method,distance_to_" << reference << '\n';
  for (const auto& x : d) o << x.label << ',' << format_double(x.distance) << '\n';
  return o.str();
}

}  // namespace ctk
