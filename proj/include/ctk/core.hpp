#pragma once

// Shared image, volume and tensor types.
//
// Every 2-D grid in the project is stored row-major, y then x:
// values[y * width + x]. Stacks add the slice index as the slowest axis.

#include <cstddef>
#include <span>
#include <vector>

namespace ctk {

inline constexpr double kDefaultMuWater = 0.02;  // 1/mm, water near 70 keV

/// Single axial slice. Values are HU unless a function documents 1/mm.
struct Image2D {
  int width = 0;
  int height = 0;
  double pixel_size = 1.0;  // mm
  std::vector<float> values;

  Image2D() = default;
  Image2D(int w, int h, double pixel_mm, float fill = 0.0f)
      : width(w), height(h), pixel_size(pixel_mm),
        values(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  std::size_t size() const { return values.size(); }
  float& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  bool same_grid(const Image2D& o) const {
    return width == o.width && height == o.height && pixel_size == o.pixel_size;
  }
  friend bool operator==(const Image2D&, const Image2D&) = default;
};

struct SliceStack {
  std::vector<Image2D> slices;
  double slice_spacing = 1.0;  // mm

  std::size_t size() const { return slices.size(); }
  const Image2D& operator[](std::size_t i) const { return slices[i]; }
  Image2D& operator[](std::size_t i) { return slices[i]; }
  friend bool operator==(const SliceStack&, const SliceStack&) = default;
};

struct RoiSpec {
  enum class Shape { rect, circle };
  Shape shape = Shape::rect;
  // rect: x0, y0, w, h. circle: cx, cy, r. Pixel units.
  double a = 0, b = 0, c = 0, d = 0;

  static RoiSpec rect(int x0, int y0, int w, int h) {
    return {Shape::rect, double(x0), double(y0), double(w), double(h)};
  }
  static RoiSpec circle(double cx, double cy, double r) { return {Shape::circle, cx, cy, r, 0}; }
};

/// Row-major dense array. float for storage and training, double for
/// verification paths.
template <class T>
struct BasicTensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  BasicTensor() = default;
  explicit BasicTensor(std::vector<std::size_t> extents, T fill = T(0));

  std::size_t numel() const { return data.size(); }
  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

std::size_t shape_numel(std::span<const std::size_t> shape);

template <class T>
BasicTensor<T>::BasicTensor(std::vector<std::size_t> extents, T fill)
    : shape(std::move(extents)), data(shape_numel(shape), fill) {}

// Validation. Each throws ctk::Error(data) describing the violated invariant.
void validate(const Image2D& img);
void validate(const SliceStack& stack);
void validate(const RoiSpec& roi, int width, int height);
template <class T>
void validate(const BasicTensor<T>& t);

/// mu = mu_water * (1 + HU / 1000). Throws on non-finite pixels, naming the index.
Image2D hu_to_mu(const Image2D& hu, double mu_water = kDefaultMuWater);
Image2D mu_to_hu(const Image2D& mu, double mu_water = kDefaultMuWater);

// 64-bit variants over raw buffers, used by the verification tests.
std::vector<double> hu_to_mu(std::span<const double> hu, double mu_water);
std::vector<double> mu_to_hu(std::span<const double> mu, double mu_water);

/// Row-major list of the pixels whose centers fall inside the ROI.
std::vector<float> extract_roi(const Image2D& img, const RoiSpec& roi);

/// Row-major pixel indices (y * width + x) covered by the ROI.
std::vector<std::size_t> roi_indices(const RoiSpec& roi, int width, int height);

}  // namespace ctk
