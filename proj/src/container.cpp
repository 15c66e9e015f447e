#include "ctk/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

static_assert(std::endian::native == std::endian::little, "CTK1 I/O assumes a little-endian host");

namespace ctk {

const char* to_string(ContainerErrc code) {
  switch (code) {
    case ContainerErrc::io: return "io error";
    case ContainerErrc::bad_magic: return "bad magic";
    case ContainerErrc::version_mismatch: return "version mismatch";
    case ContainerErrc::truncated: return "truncated data";
    case ContainerErrc::dimension_overflow: return "dimension overflow";
    case ContainerErrc::bad_kind: return "bad kind code";
    case ContainerErrc::bad_dtype: return "bad dtype code";
    case ContainerErrc::bad_shape: return "bad shape";
    case ContainerErrc::trailing_bytes: return "trailing bytes";
    case ContainerErrc::kind_mismatch: return "kind mismatch";
  }
  return "unknown";
}

ContainerError::ContainerError(ContainerErrc code, const std::string& detail)
    : Error(ErrorKind::data, std::string("CTK1: ") + to_string(code) +
                                 (detail.empty() ? "" : " (" + detail + ")")),
      code_(code) {}

namespace {

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  template <class T>
  void put_array(const std::vector<T>& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    buf_.insert(buf_.end(), p, p + v.size() * sizeof(T));
  }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  template <class T>
  std::vector<T> get_array(std::size_t n) {
    need(n * sizeof(T), "payload");
    std::vector<T> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* field) {
    if (remaining() < n) throw ContainerError(ContainerErrc::truncated, field);
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t checked_numel(const std::vector<std::uint32_t>& extents, std::size_t elem_size) {
  std::size_t n = 1;
  for (auto e : extents) {
    if (e == 0) throw ContainerError(ContainerErrc::bad_shape, "zero extent");
    if (n > std::numeric_limits<std::size_t>::max() / e)
      throw ContainerError(ContainerErrc::dimension_overflow, "extent product");
    n *= e;
  }
  if (n > std::numeric_limits<std::size_t>::max() / elem_size)
    throw ContainerError(ContainerErrc::dimension_overflow, "byte size");
  return n;
}

std::size_t payload_size(const Container& c) {
  return std::visit([](const auto& v) { return v.size(); }, c.payload);
}

}  // namespace

std::vector<std::uint8_t> encode_container(const Container& c) {
  if (c.extents.empty() || c.extents.size() > kMaxDims)
    throw ContainerError(ContainerErrc::dimension_overflow, "ndim out of range");
  const std::size_t elem = c.dtype() == DType::f32 ? 4 : 8;
  if (checked_numel(c.extents, elem) != payload_size(c))
    throw ContainerError(ContainerErrc::bad_shape, "payload length does not match extents");
  if ((c.kind == ContainerKind::sinogram) != c.sinogram.has_value())
    throw ContainerError(ContainerErrc::bad_kind, "sinogram header present iff kind is sinogram");

  Writer w;
  w.put<char>('C');
  w.put<char>('T');
  w.put<char>('K');
  w.put<char>('1');
  w.put<std::uint16_t>(kContainerVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.kind));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.dtype()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.extents.size()));
  for (auto e : c.extents) w.put<std::uint32_t>(e);
  w.put<double>(c.pixel_size);
  w.put<double>(c.slice_spacing);
  if (c.sinogram) {
    w.put<double>(c.sinogram->det_spacing);
    w.put<std::uint32_t>(c.sinogram->grid_width);
    w.put<std::uint32_t>(c.sinogram->grid_height);
    w.put<double>(c.sinogram->i0);
  }
  std::visit([&w](const auto& v) { w.put_array(v); }, c.payload);
  return w.take();
}

Container decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "CTK1", 4) != 0)
    throw ContainerError(ContainerErrc::bad_magic, "");
  Reader r(bytes.subspan(4));
  const auto version = r.get<std::uint16_t>("version");
  if (version != kContainerVersion)
    throw ContainerError(ContainerErrc::version_mismatch, "found " + std::to_string(version));
  const auto kind = r.get<std::uint8_t>("kind");
  if (kind < 1 || kind > 4) throw ContainerError(ContainerErrc::bad_kind, std::to_string(kind));
  const auto dtype = r.get<std::uint8_t>("dtype");
  if (dtype < 1 || dtype > 2) throw ContainerError(ContainerErrc::bad_dtype, std::to_string(dtype));
  const auto ndim = r.get<std::uint32_t>("ndim");
  if (ndim == 0 || ndim > kMaxDims)
    throw ContainerError(ContainerErrc::dimension_overflow, "ndim " + std::to_string(ndim));

  Container c;
  c.kind = static_cast<ContainerKind>(kind);
  for (std::uint32_t i = 0; i < ndim; ++i) c.extents.push_back(r.get<std::uint32_t>("extents"));
  c.pixel_size = r.get<double>("pixel_size");
  c.slice_spacing = r.get<double>("slice_spacing");
  if (c.kind == ContainerKind::sinogram) {
    SinogramHeader h;
    h.det_spacing = r.get<double>("det_spacing");
    h.grid_width = r.get<std::uint32_t>("grid_width");
    h.grid_height = r.get<std::uint32_t>("grid_height");
    h.i0 = r.get<double>("i0");
    c.sinogram = h;
  }
  const std::size_t elem = dtype == 1 ? 4 : 8;
  const std::size_t n = checked_numel(c.extents, elem);
  if (r.remaining() < n * elem) throw ContainerError(ContainerErrc::truncated, "payload");
  if (dtype == 1)
    c.payload = r.get_array<float>(n);
  else
    c.payload = r.get_array<double>(n);
  if (r.remaining() != 0)
    throw ContainerError(ContainerErrc::trailing_bytes, std::to_string(r.remaining()) + " bytes");
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ContainerError(ContainerErrc::io, "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ContainerError(ContainerErrc::io, "write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ContainerError(ContainerErrc::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const ContainerError& e) {
    throw ContainerError(e.code(), path.string());
  }
}

namespace {

void expect_kind(const Container& c, ContainerKind k, std::size_t ndim) {
  if (c.kind != k) throw ContainerError(ContainerErrc::kind_mismatch, "unexpected kind code");
  if (c.extents.size() != ndim) throw ContainerError(ContainerErrc::bad_shape, "unexpected ndim");
}

const std::vector<float>& f32_payload(const Container& c) {
  if (c.dtype() != DType::f32) throw ContainerError(ContainerErrc::bad_dtype, "expected f32");
  return std::get<std::vector<float>>(c.payload);
}

}  // namespace

void write_image(const std::filesystem::path& path, const Image2D& img) {
  validate(img);
  Container c;
  c.kind = ContainerKind::image;
  c.extents = {static_cast<std::uint32_t>(img.height), static_cast<std::uint32_t>(img.width)};
  c.pixel_size = img.pixel_size;
  c.payload = img.values;
  write_container(path, c);
}

Image2D read_image(const std::filesystem::path& path) {
  const auto c = read_container(path);
  expect_kind(c, ContainerKind::image, 2);
  Image2D img(static_cast<int>(c.extents[1]), static_cast<int>(c.extents[0]), c.pixel_size);
  img.values = f32_payload(c);
  validate(img);
  return img;
}

void write_stack(const std::filesystem::path& path, const SliceStack& stack) {
  validate(stack);
  const auto& s0 = stack.slices.front();
  Container c;
  c.kind = ContainerKind::stack;
  c.extents = {static_cast<std::uint32_t>(stack.size()), static_cast<std::uint32_t>(s0.height),
               static_cast<std::uint32_t>(s0.width)};
  c.pixel_size = s0.pixel_size;
  c.slice_spacing = stack.slice_spacing;
  std::vector<float> data;
  data.reserve(stack.size() * s0.size());
  for (const auto& s : stack.slices) data.insert(data.end(), s.values.begin(), s.values.end());
  c.payload = std::move(data);
  write_container(path, c);
}

SliceStack read_stack(const std::filesystem::path& path) {
  const auto c = read_container(path);
  expect_kind(c, ContainerKind::stack, 3);
  const auto& data = f32_payload(c);
  SliceStack stack;
  stack.slice_spacing = c.slice_spacing;
  const int h = static_cast<int>(c.extents[1]), w = static_cast<int>(c.extents[2]);
  const std::size_t per = static_cast<std::size_t>(w) * h;
  for (std::uint32_t k = 0; k < c.extents[0]; ++k) {
    Image2D img(w, h, c.pixel_size);
    std::copy(data.begin() + k * per, data.begin() + (k + 1) * per, img.values.begin());
    stack.slices.push_back(std::move(img));
  }
  validate(stack);
  return stack;
}

template <class T>
Container tensor_container(const BasicTensor<T>& t) {
  validate(t);
  Container c;
  c.kind = ContainerKind::tensor;
  for (auto e : t.shape) {
    if (e > std::numeric_limits<std::uint32_t>::max())
      throw ContainerError(ContainerErrc::dimension_overflow, "extent exceeds u32");
    c.extents.push_back(static_cast<std::uint32_t>(e));
  }
  c.payload = t.data;
  return c;
}

template <class T>
BasicTensor<T> tensor_from_container(const Container& c) {
  if (c.kind != ContainerKind::tensor) throw ContainerError(ContainerErrc::kind_mismatch, "expected tensor");
  if (!std::holds_alternative<std::vector<T>>(c.payload))
    throw ContainerError(ContainerErrc::bad_dtype, "tensor dtype differs from requested");
  BasicTensor<T> t;
  t.shape.assign(c.extents.begin(), c.extents.end());
  t.data = std::get<std::vector<T>>(c.payload);
  validate(t);
  return t;
}

template Container tensor_container(const BasicTensor<float>&);
template Container tensor_container(const BasicTensor<double>&);
template BasicTensor<float> tensor_from_container(const Container&);
template BasicTensor<double> tensor_from_container(const Container&);

}  // namespace ctk
