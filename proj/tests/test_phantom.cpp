#include <cmath>

#include "ctk/phantom.hpp"
#include "doctest.h"

using namespace ctk;

namespace {

double correlation(const Image2D& a, const Image2D& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a.values[i];
    mb += b.values[i];
  }
  ma /= a.size();
  mb /= b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a.values[i] - ma, db = b.values[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  return sab / std::sqrt(saa * sbb);
}

int center_pixel(double mm, int n) { return static_cast<int>(std::lround(mm + 0.5 * (n - 1))); }

}  // namespace

TEST_CASE("body only: exact water and air") {
  PhantomSpec spec;
  spec.inserts.clear();
  const auto img = render_slice(spec, 0);
  CHECK(img.at(32, 32) == 0.0f);
  CHECK(img.at(0, 0) == -1000.0f);
  for (float v : img.values) CHECK((v >= -1000.0f && v <= 0.0f));
}

TEST_CASE("insert contrast is additive") {
  PhantomSpec spec;
  spec.inserts = {{10, 0, 4, 4, 0, 100}};
  auto img = render_slice(spec, 4);
  CHECK(img.at(center_pixel(10, 64), 32) == doctest::Approx(100.0));

  spec.inserts.push_back({11, 0, 3, 3, 0, -50});
  img = render_slice(spec, 4);
  CHECK(img.at(center_pixel(10, 64), 32) == doctest::Approx(50.0));
}

TEST_CASE("degenerate or escaping inserts are rejected") {
  PhantomSpec spec;
  spec.inserts = {{0, 0, 0, 2, 0, 100}};
  CHECK_THROWS(render_slice(spec, 0));
  spec.inserts = {{24, 0, 4, 4, 0, 100}};
  CHECK_THROWS(render_slice(spec, 0));
  spec.inserts = {{0, 0, 2, 2, 0, 5000}};
  CHECK_THROWS(validate(spec));
  spec.inserts.clear();
  CHECK_THROWS(render_slice(spec, 9));
}

TEST_CASE("render_volume and z drift") {
  auto spec = random_spec(11, Difficulty::easy, 5);
  spec.z_drift = 0;
  const auto flat = render_volume(spec);
  REQUIRE(flat.size() == 5);
  for (int k = 1; k < 5; ++k) CHECK(flat[k] == flat[0]);

  spec = random_spec(11, Difficulty::easy, 9);
  REQUIRE(spec.z_drift > 0);
  const auto vol = render_volume(spec);
  CHECK_FALSE(vol[0] == vol[1]);
  CHECK(correlation(vol[3], vol[4]) > correlation(vol[0], vol[8]));
}

TEST_CASE("random_spec contract") {
  CHECK(random_spec(7, Difficulty::standard) == random_spec(7, Difficulty::standard));
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto easy = random_spec(seed, Difficulty::easy);
    CHECK_NOTHROW(validate(easy));
    CHECK(easy.inserts.size() >= 2);
    CHECK(easy.inserts.size() <= 4);
    CHECK_NOTHROW(validate(random_spec(seed, Difficulty::standard)));
  }
}

TEST_CASE("uniform center region stays water") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto vol = render_volume(random_spec(seed, Difficulty::standard));
    for (const auto& s : vol.slices)
      for (int y = 20; y < 44; ++y)
        for (int x = 20; x < 44; ++x) REQUIRE(s.at(x, y) == 0.0f);
  }
}

TEST_CASE("rendering is linear in insert contrast") {
  auto spec = random_spec(3, Difficulty::standard);
  auto bare = spec;
  bare.inserts.clear();
  const auto background = render_slice(bare, 2);
  const auto base = render_slice(spec, 2);
  for (auto& e : spec.inserts) e.delta_hu *= 0.5;
  const auto half = render_slice(spec, 2);
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double c_full = base.values[i] - background.values[i];
    const double c_half = half.values[i] - background.values[i];
    CHECK(c_half == doctest::Approx(0.5 * c_full).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("text round trip") {
  const auto spec = random_spec(42, Difficulty::standard);
  CHECK(phantom_from_text(to_text(spec)) == spec);
}
