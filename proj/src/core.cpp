#include "ctk/core.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ctk/error.hpp"

namespace ctk {

std::size_t shape_numel(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e != 0 && n > std::numeric_limits<std::size_t>::max() / e)
      throw data_error("tensor shape overflows size_t");
    n *= e;
  }
  return n;
}

void validate(const Image2D& img) {
  if (img.width < 1 || img.height < 1)
    throw data_error("image dimensions must be >= 1, got " + std::to_string(img.width) + "x" +
                     std::to_string(img.height));
  if (!(img.pixel_size > 0) || !std::isfinite(img.pixel_size))
    throw data_error("pixel_size must be positive");
  if (img.values.size() != static_cast<std::size_t>(img.width) * img.height)
    throw data_error("image value count does not match width*height");
  for (std::size_t i = 0; i < img.values.size(); ++i)
    if (!std::isfinite(img.values[i]))
      throw data_error("non-finite pixel at index " + std::to_string(i));
}

void validate(const SliceStack& stack) {
  if (stack.slices.empty()) throw data_error("slice stack is empty");
  if (!(stack.slice_spacing > 0)) throw data_error("slice_spacing must be positive");
  for (const auto& s : stack.slices) {
    validate(s);
    if (!s.same_grid(stack.slices.front())) throw data_error("slices do not share a grid");
  }
}

void validate(const RoiSpec& roi, int width, int height) {
  if (roi.shape == RoiSpec::Shape::rect) {
    if (roi.c < 1 || roi.d < 1) throw data_error("rect ROI must have positive size");
    if (roi.a < 0 || roi.b < 0 || roi.a + roi.c > width || roi.b + roi.d > height)
      throw data_error("rect ROI extends outside the image");
  } else {
    if (!(roi.c > 0)) throw data_error("circle ROI radius must be positive");
    if (roi.a - roi.c < -0.5 || roi.b - roi.c < -0.5 || roi.a + roi.c > width - 0.5 ||
        roi.b + roi.c > height - 0.5)
      throw data_error("circle ROI extends outside the image");
  }
}

template <class T>
void validate(const BasicTensor<T>& t) {
  if (shape_numel(t.shape) != t.data.size())
    throw data_error("tensor data length does not match its shape");
  for (std::size_t i = 0; i < t.data.size(); ++i)
    if (!std::isfinite(t.data[i]))
      throw data_error("non-finite tensor entry at index " + std::to_string(i));
}
template void validate(const BasicTensor<float>&);
template void validate(const BasicTensor<double>&);

namespace {

template <class In, class F>
std::vector<double> map_checked(std::span<const In> in, F f) {
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!std::isfinite(in[i])) throw data_error("non-finite pixel at index " + std::to_string(i));
    out[i] = f(static_cast<double>(in[i]));
  }
  return out;
}

void check_mu_water(double mu_water) {
  if (!(mu_water > 0)) throw data_error("mu_water must be positive");
}

}  // namespace

std::vector<double> hu_to_mu(std::span<const double> hu, double mu_water) {
  check_mu_water(mu_water);
  return map_checked(hu, [mu_water](double v) { return mu_water * (1.0 + v / 1000.0); });
}

std::vector<double> mu_to_hu(std::span<const double> mu, double mu_water) {
  check_mu_water(mu_water);
  return map_checked(mu, [mu_water](double v) { return 1000.0 * (v / mu_water - 1.0); });
}

Image2D hu_to_mu(const Image2D& hu, double mu_water) {
  check_mu_water(mu_water);
  auto d = map_checked(std::span<const float>(hu.values),
                       [mu_water](double v) { return mu_water * (1.0 + v / 1000.0); });
  Image2D out(hu.width, hu.height, hu.pixel_size);
  for (std::size_t i = 0; i < d.size(); ++i) out.values[i] = static_cast<float>(d[i]);
  return out;
}

Image2D mu_to_hu(const Image2D& mu, double mu_water) {
  check_mu_water(mu_water);
  auto d = map_checked(std::span<const float>(mu.values),
                       [mu_water](double v) { return 1000.0 * (v / mu_water - 1.0); });
  Image2D out(mu.width, mu.height, mu.pixel_size);
  for (std::size_t i = 0; i < d.size(); ++i) out.values[i] = static_cast<float>(d[i]);
  return out;
}

std::vector<std::size_t> roi_indices(const RoiSpec& roi, int width, int height) {
  validate(roi, width, height);
  std::vector<std::size_t> idx;
  if (roi.shape == RoiSpec::Shape::rect) {
    const int x0 = static_cast<int>(roi.a), y0 = static_cast<int>(roi.b);
    const int w = static_cast<int>(roi.c), h = static_cast<int>(roi.d);
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) idx.push_back(static_cast<std::size_t>(y) * width + x);
  } else {
    const double r2 = roi.c * roi.c;
    const int ylo = std::max(0, static_cast<int>(std::floor(roi.b - roi.c)));
    const int yhi = std::min(height - 1, static_cast<int>(std::ceil(roi.b + roi.c)));
    const int xlo = std::max(0, static_cast<int>(std::floor(roi.a - roi.c)));
    const int xhi = std::min(width - 1, static_cast<int>(std::ceil(roi.a + roi.c)));
    for (int y = ylo; y <= yhi; ++y)
      for (int x = xlo; x <= xhi; ++x) {
        const double dx = x - roi.a, dy = y - roi.b;
        if (dx * dx + dy * dy <= r2) idx.push_back(static_cast<std::size_t>(y) * width + x);
      }
  }
  if (idx.empty()) throw data_error("ROI covers no pixel centers");
  return idx;
}

std::vector<float> extract_roi(const Image2D& img, const RoiSpec& roi) {
  std::vector<float> out;
  for (std::size_t i : roi_indices(roi, img.width, img.height)) out.push_back(img.values[i]);
  return out;
}

}  // namespace ctk
