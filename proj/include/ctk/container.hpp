#pragma once

// CTK1 binary container.
//
//   offset  size        field
//   0       4           magic "CTK1"
//   4       2   u16     version (1)
//   6       1   u8      kind (1 image, 2 stack, 3 sinogram, 4 tensor)
//   7       1   u8      dtype (1 f32, 2 f64)
//   8       4   u32     ndim
//   12      4*ndim u32  extents, slowest axis first
//   ..      8   f64     pixel_size_mm
//   ..      8   f64     slice_spacing_mm (0 if not applicable)
//   sinogram only:
//   ..      8   f64     det_spacing_mm
//   ..      4   u32     grid width
//   ..      4   u32     grid height
//   ..      8   f64     i0 (0 for line integrals, > 0 for photon counts)
//   ..                  payload, row-major
//
// All multi-byte fields are little-endian.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "ctk/core.hpp"
#include "ctk/error.hpp"

namespace ctk {

enum class ContainerKind : std::uint8_t { image = 1, stack = 2, sinogram = 3, tensor = 4 };
enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

enum class ContainerErrc {
  io,
  bad_magic,
  version_mismatch,
  truncated,
  dimension_overflow,
  bad_kind,
  bad_dtype,
  bad_shape,
  trailing_bytes,
  kind_mismatch,
};

const char* to_string(ContainerErrc code);

class ContainerError : public Error {
 public:
  ContainerError(ContainerErrc code, const std::string& detail);
  ContainerErrc code() const noexcept { return code_; }

 private:
  ContainerErrc code_;
};

inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::uint32_t kMaxDims = 8;

struct SinogramHeader {
  double det_spacing = 1.0;
  std::uint32_t grid_width = 0;
  std::uint32_t grid_height = 0;
  double i0 = 0.0;
  friend bool operator==(const SinogramHeader&, const SinogramHeader&) = default;
};

struct Container {
  ContainerKind kind = ContainerKind::tensor;
  std::vector<std::uint32_t> extents;
  double pixel_size = 0.0;
  double slice_spacing = 0.0;
  std::optional<SinogramHeader> sinogram;
  std::variant<std::vector<float>, std::vector<double>> payload;

  DType dtype() const { return payload.index() == 0 ? DType::f32 : DType::f64; }
  friend bool operator==(const Container&, const Container&) = default;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(std::span<const std::uint8_t> bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Typed wrappers.
void write_image(const std::filesystem::path& path, const Image2D& img);
Image2D read_image(const std::filesystem::path& path);
void write_stack(const std::filesystem::path& path, const SliceStack& stack);
SliceStack read_stack(const std::filesystem::path& path);

template <class T>
Container tensor_container(const BasicTensor<T>& t);
template <class T>
BasicTensor<T> tensor_from_container(const Container& c);

template <class T>
void write_tensor(const std::filesystem::path& path, const BasicTensor<T>& t) {
  write_container(path, tensor_container(t));
}
template <class T>
BasicTensor<T> read_tensor(const std::filesystem::path& path) {
  return tensor_from_container<T>(read_container(path));
}

}  // namespace ctk
