#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>

#include "ctk/parallel.hpp"
#include "ctk/phantom.hpp"
#include "ctk/projector.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ctk;

namespace {

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

Image2D disk_mu(int n, double pixel, double radius, double mu) {
  EllipseSpec disk{0, 0, radius, radius, 0, 0};
  const auto cov = coverage(disk, n, n, pixel);
  Image2D img(n, n, pixel);
  for (std::size_t i = 0; i < cov.size(); ++i) img.values[i] = static_cast<float>(mu * cov[i]);
  return img;
}

}  // namespace

TEST_CASE("zero image projects to zero, zero sinogram backprojects to zero") {
  const auto g = Geometry::for_grid(16, 16, 1.0, 10);
  const auto sino = forward_project(Image2D(16, 16, 1.0), g);
  for (float v : sino.values) CHECK(v == 0.0f);
  const auto img = back_project(Sinogram{g, std::vector<float>(g.n_rays(), 0.0f)}, g);
  for (float v : img.values) CHECK(v == 0.0f);
}

TEST_CASE("centered disk chord lengths") {
  Geometry g;
  g.width = g.height = 128;
  g.pixel_size = 0.25;
  g.det_spacing = 0.25;
  g.n_det = 273;  // odd: a bin sits at s = 0
  g.n_views = 8;
  const auto sino = forward_project(disk_mu(128, 0.25, 10.0, 0.02), g);
  const int center = (g.n_det - 1) / 2;
  for (int v = 0; v < g.n_views; ++v) {
    CHECK(sino.values[v * g.n_det + center] == doctest::Approx(0.400).epsilon(0.01));
    CHECK(sino.values[v * g.n_det + center + 24] == doctest::Approx(0.320).epsilon(0.01));  // s = 6 mm
  }
}

TEST_CASE("forward projection matches the dense Radon oracle") {
  const auto g = Geometry::for_grid(8, 8, 1.0, 12);
  const auto A = oracle::dense_radon(g);
  const auto x = random_vector(64, 17);
  const auto y = forward_project(x, g);
  const Eigen::VectorXd ref = A * Eigen::Map<const Eigen::VectorXd>(x.data(), 64);
  double max_ref = ref.cwiseAbs().maxCoeff();
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - ref[i]) <= 1e-6 * max_ref);

  const SystemMatrix sm(g);
  std::vector<double> y2(g.n_rays(), 0.0);
  for (std::size_t j = 0; j < 64; ++j) {
    const auto rows = sm.rows(j);
    const auto w = sm.weights(j);
    for (std::size_t k = 0; k < rows.size(); ++k) y2[rows[k]] += w[k] * x[j];
  }
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y2[i] == doctest::Approx(y[i]).epsilon(1e-12));
}

TEST_CASE("back projection is the exact adjoint") {
  const auto g = Geometry::for_grid(64, 64, 1.0, 90);
  for (std::uint64_t t = 0; t < 10; ++t) {
    const auto x = random_vector(g.n_pixels(), 100 + t);
    const auto u = random_vector(g.n_rays(), 200 + t);
    const auto ax = forward_project(x, g);
    const auto atu = back_project(u, g);
    const double mismatch = std::abs(dot(ax, u) - dot(x, atu)) / (norm(ax) * norm(u));
    CHECK(mismatch < 1e-5);
  }
}

TEST_CASE("single axis-aligned view backprojects to stripes along the ray") {
  Geometry g = Geometry::for_grid(32, 32, 1.0, 1, 0.7);
  const auto img = back_project(Sinogram{g, std::vector<float>(g.n_rays(), 1.0f)}, g);
  // View 0 rays run along y: every column must be constant.
  double mean = 0;
  for (float v : img.values) mean += v;
  mean /= img.size();
  for (int x = 0; x < 32; ++x) {
    double m = 0, s2 = 0;
    for (int y = 0; y < 32; ++y) m += img.at(x, y);
    m /= 32;
    for (int y = 0; y < 32; ++y) s2 += (img.at(x, y) - m) * (img.at(x, y) - m);
    CHECK(std::sqrt(s2 / 31) < 1e-4 * mean);
  }
}

TEST_CASE("linearity and rotation consistency") {
  const auto g = Geometry::for_grid(32, 32, 1.0, 24);
  const auto x = random_vector(g.n_pixels(), 1);
  const auto z = random_vector(g.n_pixels(), 2);
  std::vector<double> comb(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) comb[i] = 2.5 * x[i] - 0.75 * z[i];
  const auto px = forward_project(x, g), pz = forward_project(z, g), pc = forward_project(comb, g);
  double scale = 0;
  for (double v : pc) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < pc.size(); ++i) CHECK(std::abs(pc[i] - (2.5 * px[i] - 0.75 * pz[i])) <= 1e-6 * scale);

  // Fine pixels keep the disk edge's partial volume small.
  const auto g2 = Geometry::for_grid(512, 512, 0.0625, 36);
  const auto disk = forward_project(disk_mu(512, 0.0625, 10.0, 0.02), g2);
  double peak = 0, worst = 0;
  for (float v : disk.values) peak = std::max(peak, double(v));
  for (int d = 0; d < g2.n_det; ++d)
    for (int v = 1; v < g2.n_views; ++v)
      worst = std::max(worst, std::abs(double(disk.values[v * g2.n_det + d]) - disk.values[d]));
  CHECK(worst < 0.01 * peak);
}

TEST_CASE("back projection is bit-identical across thread counts") {
  const auto g = Geometry::for_grid(32, 32, 1.0, 30);
  const auto u = random_vector(g.n_rays(), 9);
  set_threads(1);
  const auto one = back_project(u, g);
  set_threads(3);
  const auto three = back_project(u, g);
  set_threads(1);
  CHECK(one == three);
}

TEST_CASE("Poisson counts") {
  Geometry g = Geometry::for_grid(8, 8, 1.0, 100, 0.12);
  REQUIRE(g.n_rays() >= 10000);
  Sinogram zero{g, std::vector<float>(g.n_rays(), 0.0f)};
  auto stats = [](const CountsSinogram& cs) {
    double m = 0, v = 0;
    for (double c : cs.counts) m += c;
    m /= cs.counts.size();
    for (double c : cs.counts) v += (c - m) * (c - m);
    return std::pair{m, v / (cs.counts.size() - 1)};
  };
  const auto cs = simulate_counts(zero, 1e5, 1);
  auto [m0, v0] = stats(cs);
  CHECK(m0 == doctest::Approx(1e5).epsilon(0.01));
  CHECK(v0 / m0 > 0.95);
  CHECK(v0 / m0 < 1.05);

  Sinogram ten{g, std::vector<float>(g.n_rays(), static_cast<float>(std::log(10.0)))};
  auto [m1, v1] = stats(simulate_counts(ten, 1e5, 2));
  CHECK(m1 == doctest::Approx(1e4).epsilon(0.02));
  CHECK(v1 / m1 > 0.95);
  CHECK(v1 / m1 < 1.05);

  CHECK(simulate_counts(ten, 1e5, 2) == simulate_counts(ten, 1e5, 2));
  ten.values[5] = -0.1f;
  CHECK_THROWS(simulate_counts(ten, 1e5, 2));
  CHECK_THROWS(simulate_counts(zero, 0.0, 2));
}

TEST_CASE("counts to line integrals") {
  Geometry g = Geometry::for_grid(4, 4, 1.0, 1);
  CountsSinogram cs{g, std::vector<double>(g.n_rays(), 1e4), 1e4};
  cs.counts[1] = 0;
  const auto ws = counts_to_line_integrals(cs, 1.0);
  CHECK(ws.sinogram.values[0] == 0.0f);
  CHECK(ws.weights[0] == 1e4);
  CHECK(ws.sinogram.values[1] == doctest::Approx(std::log(1e4)));
  CHECK(ws.weights[1] == 1.0);
  cs.i0 = 0;
  CHECK_THROWS(counts_to_line_integrals(cs, 1.0));

  const auto g2 = Geometry::for_grid(32, 32, 1.0, 30);
  auto mu = disk_mu(32, 1.0, 12.0, 0.02);
  const auto truth = forward_project(mu, g2);
  const auto rec = counts_to_line_integrals(simulate_counts(truth, 1e6, 5));
  double se = 0, pmax = 0;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    se += std::pow(rec.sinogram.values[i] - truth.values[i], 2);
    pmax = std::max(pmax, double(truth.values[i]));
  }
  CHECK(std::sqrt(se / truth.values.size()) < 0.01 * pmax);
}

TEST_CASE("sinogram containers") {
  const auto g = Geometry::for_grid(16, 12, 0.5, 7);
  Sinogram s{g, std::vector<float>(g.n_rays())};
  for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] = 0.01f * i;
  const auto path = std::filesystem::temp_directory_path() / "ctk_test_sino.ctk";
  write_sinogram(path, s);
  CHECK(read_sinogram(path) == s);
  CHECK_THROWS(read_counts(path));

  const auto cs = simulate_counts(s, 1e3, 4);
  write_counts(path, cs);
  CHECK(read_counts(path) == cs);
  CHECK_THROWS(read_sinogram(path));
}

TEST_CASE("counts volume container") {
  const auto g = Geometry::for_grid(8, 8, 1.0, 5);
  std::vector<CountsSinogram> vol;
  for (int k = 0; k < 3; ++k)
    vol.push_back(simulate_counts(Sinogram{g, std::vector<float>(g.n_rays(), 0.1f * k)}, 500.0, k));
  const auto path = std::filesystem::temp_directory_path() / "ctk_test_counts_vol.ctk";
  write_counts_volume(path, vol, 1.5);
  CHECK(read_counts_volume(path) == vol);
  CHECK_THROWS(read_counts(path));
  write_counts(path, vol[0]);
  CHECK_THROWS(read_counts_volume(path));
}
