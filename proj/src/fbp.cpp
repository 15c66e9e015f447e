#include "ctk/fbp.hpp"

#include <fftw3.h>

#include <bit>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>

#include "ctk/error.hpp"
#include "ctk/parallel.hpp"
#include "fftw_lock.hpp"

namespace ctk {

std::mutex& detail::fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

namespace {

using detail::fftw_planner_mutex;

class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    real_ = fftw_alloc_real(n);
    spec_ = fftw_alloc_complex(n / 2 + 1);
    std::lock_guard lock(fftw_planner_mutex());
    forward_ = fftw_plan_dft_r2c_1d(n, real_, spec_, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(n, spec_, real_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(forward_);
      fftw_destroy_plan(inverse_);
    }
    fftw_free(real_);
    fftw_free(spec_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* real() { return real_; }
  std::complex<double>* spectrum() { return reinterpret_cast<std::complex<double>*>(spec_); }
  void forward() { fftw_execute(forward_); }
  void inverse() { fftw_execute(inverse_); }  // unnormalized
  int size() const { return n_; }

 private:
  int n_;
  double* real_;
  fftw_complex* spec_;
  fftw_plan forward_;
  fftw_plan inverse_;
};

}  // namespace

void validate(const FbpParams& p) {
  if (p.pad_factor < 2 || !std::has_single_bit(static_cast<unsigned>(p.pad_factor)))
    throw data_error("fbp: pad_factor must be a power of two >= 2");
}

int padded_length(int n_det, const FbpParams& p) {
  validate(p);
  return p.pad_factor * static_cast<int>(std::bit_ceil(static_cast<unsigned>(n_det)));
}

std::vector<double> ramp_response(int n_det, double det_spacing, const FbpParams& p) {
  const int L = padded_length(n_det, p);
  const double t2 = det_spacing * det_spacing;
  RealFft fft(L);
  double* h = fft.real();
  for (int m = 0; m < L; ++m) {
    const int n = m <= L / 2 ? m : m - L;
    if (n == 0)
      h[m] = 1.0 / (4.0 * t2);
    else if (n % 2 != 0)
      h[m] = -1.0 / (std::numbers::pi * std::numbers::pi * double(n) * double(n) * t2);
    else
      h[m] = 0.0;
  }
  fft.forward();
  std::vector<double> H(L / 2 + 1);
  for (int k = 0; k <= L / 2; ++k) {
    double gain = fft.spectrum()[k].real();
    if (p.window == FilterWindow::hann) gain *= 0.5 * (1.0 + std::cos(std::numbers::pi * k / (L / 2)));
    H[k] = gain;
  }
  H[0] = 0.0;
  return H;
}

std::vector<double> ramp_filter(std::span<const double> sino, const Geometry& g, const FbpParams& p) {
  validate(g);
  if (sino.size() != g.n_rays()) throw data_error("ramp_filter: sinogram shape does not match geometry");
  const auto H = ramp_response(g.n_det, g.det_spacing, p);
  const int L = padded_length(g.n_det, p);
  const double scale = g.det_spacing / L;
  std::vector<double> out(sino.size());
  parallel_for(static_cast<std::size_t>(g.n_views), [&](std::size_t v) {
    RealFft fft(L);
    double* row = fft.real();
    std::fill(row, row + L, 0.0);
    std::copy_n(sino.data() + v * g.n_det, g.n_det, row);
    fft.forward();
    for (int k = 0; k <= L / 2; ++k) fft.spectrum()[k] *= H[k];
    fft.inverse();
    for (int d = 0; d < g.n_det; ++d) out[v * g.n_det + d] = row[d] * scale;
  });
  return out;
}

Sinogram ramp_filter(const Sinogram& sino, const FbpParams& p) {
  const std::vector<double> y(sino.values.begin(), sino.values.end());
  const auto q = ramp_filter(y, sino.geometry, p);
  return {sino.geometry, std::vector<float>(q.begin(), q.end())};
}

std::vector<double> fbp_reconstruct(std::span<const double> sino, const Geometry& g, const FbpParams& p) {
  const auto q = ramp_filter(sino, g, p);
  std::vector<double> cs(g.n_views), sn(g.n_views);
  for (int v = 0; v < g.n_views; ++v) {
    cs[v] = std::cos(g.angle(v));
    sn[v] = std::sin(g.angle(v));
  }
  const double xc = 0.5 * (g.width - 1), yc = 0.5 * (g.height - 1);
  const double dc = 0.5 * (g.n_det - 1);
  const double scale = std::numbers::pi / g.n_views;
  std::vector<double> img(g.n_pixels());
  parallel_for(static_cast<std::size_t>(g.height), [&](std::size_t iy) {
    const double y = (static_cast<double>(iy) - yc) * g.pixel_size;
    for (int ix = 0; ix < g.width; ++ix) {
      const double x = (ix - xc) * g.pixel_size;
      double sum = 0;
      for (int v = 0; v < g.n_views; ++v) {
        const double u = (x * cs[v] + y * sn[v]) / g.det_spacing + dc;
        const double fl = std::floor(u);
        const int d0 = static_cast<int>(fl);
        const double f = u - fl;
        const double* row = q.data() + static_cast<std::size_t>(v) * g.n_det;
        if (d0 >= 0 && d0 < g.n_det) sum += (1.0 - f) * row[d0];
        if (d0 + 1 >= 0 && d0 + 1 < g.n_det) sum += f * row[d0 + 1];
      }
      img[iy * g.width + ix] = sum * scale;
    }
  });
  return img;
}

Image2D fbp_reconstruct(const Sinogram& sino, const Geometry& g, const FbpParams& p) {
  if (!(sino.geometry == g)) throw data_error("fbp_reconstruct: sinogram geometry does not match");
  const std::vector<double> y(sino.values.begin(), sino.values.end());
  const auto x = fbp_reconstruct(y, g, p);
  Image2D img(g.width, g.height, g.pixel_size);
  std::copy(x.begin(), x.end(), img.values.begin());
  return img;
}

}  // namespace ctk
