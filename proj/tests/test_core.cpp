#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "ctk/container.hpp"
#include "ctk/core.hpp"
#include "doctest.h"

using namespace ctk;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ctk_test_core_" + name);
}

Image2D random_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1000.0f, 2000.0f);
  Image2D img(w, h, 0.7);
  for (auto& v : img.values) v = u(rng);
  return img;
}

ContainerErrc decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_container(bytes);
  } catch (const ContainerError& e) {
    return e.code();
  }
  FAIL("decode succeeded unexpectedly");
  return ContainerErrc::io;
}

}  // namespace

TEST_CASE("hu_to_mu reference values") {
  Image2D img(3, 1, 1.0);
  img.values = {0.0f, -1000.0f, 74.68f};
  const auto mu = hu_to_mu(img, 0.02);
  CHECK(mu.values[0] == doctest::Approx(0.02).epsilon(1e-7));
  CHECK(mu.values[1] == 0.0f);
  CHECK(mu.values[2] == doctest::Approx(0.0214936).epsilon(1e-6));

  Image2D m(2, 1, 1.0);
  m.values = {0.02f, 0.0f};
  const auto hu = mu_to_hu(m, 0.02);
  CHECK(std::abs(hu.values[0]) < 1e-3);  // 0.02f is inexact
  CHECK(hu.values[1] == -1000.0f);
}

TEST_CASE("hu/mu round trip") {
  const auto img = random_image(32, 32, 1);
  const auto back = mu_to_hu(hu_to_mu(img));
  double max_err = 0;
  for (std::size_t i = 0; i < img.size(); ++i)
    max_err = std::max(max_err, std::abs(double(back.values[i]) - img.values[i]));
  CHECK(max_err < 1e-3);

  // 64-bit mode is exact to 1e-6 relative.
  std::vector<double> hu(img.values.begin(), img.values.end());
  const auto rt = mu_to_hu(hu_to_mu(hu, 0.02), 0.02);
  for (std::size_t i = 0; i < hu.size(); ++i)
    CHECK(std::abs(rt[i] - hu[i]) <= 1e-6 * std::max(1.0, std::abs(hu[i])));
}

TEST_CASE("hu_to_mu rejects non-finite pixels with their index") {
  Image2D img(2, 2, 1.0);
  img.values[3] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_WITH_AS(hu_to_mu(img), doctest::Contains("index 3"), Error);
  CHECK_THROWS_AS(hu_to_mu(Image2D(2, 2, 1.0), 0.0), Error);
}

TEST_CASE("container round trips are bitwise") {
  SUBCASE("2x2 image") {
    const auto img = random_image(2, 2, 3);
    write_image(temp_path("img.ctk"), img);
    CHECK(read_image(temp_path("img.ctk")) == img);
  }
  SUBCASE("64x64x9 stack") {
    SliceStack stack;
    stack.slice_spacing = 1.25;
    for (int k = 0; k < 9; ++k) stack.slices.push_back(random_image(64, 64, 10 + k));
    write_stack(temp_path("stack.ctk"), stack);
    const auto back = read_stack(temp_path("stack.ctk"));
    REQUIRE(back.size() == 9);
    for (int k = 0; k < 9; ++k)
      CHECK(std::memcmp(back[k].values.data(), stack[k].values.data(), stack[k].size() * 4) == 0);
    CHECK(back.slice_spacing == 1.25);
  }
  SUBCASE("f64 tensor") {
    Tensor64 t({3, 4, 5});
    std::mt19937_64 rng(5);
    for (auto& v : t.data) v = std::normal_distribution<double>()(rng);
    write_tensor(temp_path("t.ctk"), t);
    CHECK(read_tensor<double>(temp_path("t.ctk")) == t);
  }
}

TEST_CASE("container header layout") {
  Image2D img(3, 2, 0.5, 1.0f);
  Container c;
  c.kind = ContainerKind::image;
  c.extents = {2, 3};
  c.pixel_size = 0.5;
  c.payload = img.values;
  const auto bytes = encode_container(c);
  // magic + u16 + u8 + u8 + u32 + 2*u32 + 2*f64 + 6*f32
  CHECK(bytes.size() == 4 + 2 + 1 + 1 + 4 + 8 + 16 + 24);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CTK1");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 1);  // kind image
  CHECK(bytes[7] == 1);  // f32
  CHECK(bytes[8] == 2);  // ndim
  CHECK(bytes[12] == 2);  // height first
  CHECK(bytes[16] == 3);
}

TEST_CASE("container errors are distinct") {
  Container c;
  c.kind = ContainerKind::tensor;
  c.extents = {4};
  c.payload = std::vector<float>{1, 2, 3, 4};
  const auto good = encode_container(c);

  CHECK(decode_error({}) == ContainerErrc::bad_magic);
  {
    std::ofstream(temp_path("empty.ctk"), std::ios::binary | std::ios::trunc);
    CHECK_THROWS_WITH(read_container(temp_path("empty.ctk")), doctest::Contains("bad magic"));
  }
  auto v = good;
  v[4] = 2;
  CHECK(decode_error(v) == ContainerErrc::version_mismatch);
  v = good;
  v.resize(v.size() - 3);
  CHECK(decode_error(v) == ContainerErrc::truncated);
  v = good;
  v[8] = 9;  // ndim
  CHECK(decode_error(v) == ContainerErrc::dimension_overflow);
  v = good;
  v[6] = 7;
  CHECK(decode_error(v) == ContainerErrc::bad_kind);
  v = good;
  v[7] = 3;
  CHECK(decode_error(v) == ContainerErrc::bad_dtype);
  v = good;
  v.push_back(0);
  CHECK(decode_error(v) == ContainerErrc::trailing_bytes);

  // Two extents whose product overflows size_t * 4.
  Container big;
  big.kind = ContainerKind::tensor;
  big.extents = {1, 1};
  big.payload = std::vector<float>{1};
  auto b = encode_container(big);
  b[8] = 3;  // ndim 3, then patch three 0xffffffff extents over the old fields
  b.insert(b.begin() + 20, 4, 0);
  for (int i = 12; i < 24; ++i) b[i] = 0xff;
  CHECK(decode_error(b) == ContainerErrc::dimension_overflow);
}

TEST_CASE("extract_roi") {
  Image2D img(4, 4, 1.0);
  for (int i = 0; i < 16; ++i) img.values[i] = float(i);
  const auto rect = extract_roi(img, RoiSpec::rect(0, 0, 2, 2));
  CHECK(rect == std::vector<float>{0, 1, 4, 5});

  const auto one = extract_roi(img, RoiSpec::circle(1, 2, 0.9));
  CHECK(one == std::vector<float>{9});

  CHECK_THROWS_AS(extract_roi(img, RoiSpec::rect(3, 3, 2, 2)), Error);
  CHECK_THROWS_AS(extract_roi(img, RoiSpec::circle(1, 1, 3)), Error);
}

TEST_CASE("circle ROI matches a brute-force center scan") {
  Image2D img(64, 64, 1.0);
  const double cx = 30.3, cy = 33.0, r = 10.0;
  std::size_t brute = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) ++brute;
  CHECK(extract_roi(img, RoiSpec::circle(cx, cy, r)).size() == brute);

  // Row-major order.
  const auto idx = roi_indices(RoiSpec::circle(cx, cy, r), 64, 64);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
}
