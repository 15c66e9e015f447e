#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "ctk/error.hpp"
#include "ctk/nnet.hpp"
#include "ctk/parallel.hpp"
#include "ctk/phantom.hpp"
#include "doctest.h"
#include "net_oracle.hpp"

using namespace ctk;

namespace {

SlicePairSet toy_pairs(int n, int size, int z, std::uint64_t seed) {
  SlicePairSet out;
  for (int i = 0; i < n; ++i) {
    const auto x = oracle::random_tensor({std::size_t(z), std::size_t(size), std::size_t(size)}, seed + 2 * i, 0.3);
    const auto y = oracle::random_tensor({1, std::size_t(size), std::size_t(size)}, seed + 2 * i + 1, 0.3);
    SlicePair p;
    p.input = Tensor(x.shape);
    p.target = Tensor(y.shape);
    for (std::size_t k = 0; k < x.data.size(); ++k) p.input.data[k] = float(x.data[k]);
    // Smooth-ish target tied to the input so there is something to learn.
    for (std::size_t k = 0; k < y.data.size(); ++k)
      p.target.data[k] = float(0.5 * x.data[(z / 2) * y.data.size() + k] + 0.1 * y.data[k]);
    p.id = "toy:" + std::to_string(i);
    out.push_back(std::move(p));
  }
  return out;
}

SliceStack stack_from(const std::vector<Image2D>& s) {
  SliceStack st;
  st.slices = s;
  return st;
}

}  // namespace

TEST_CASE("parameter count and layout") {
  // Z=1, depth 1, base 4, 3x3: enc0 (1*4*9+4)+(4*4*9+4), mid (4*8*9+8)+(8*8*9+8),
  // up0 8*4*9+4, dec0 (8*4*9+4)+(4*4*9+4), out 4+1.
  const auto p = build_unet<float>({1, 1, 4, 3, true}, 0);
  CHECK(p.numel() == 1805);
  CHECK(p.size() == 16);

  const auto p5 = build_unet<float>({5, 2, 8, 3, true}, 0);
  CHECK(p5.get("enc0_a.w").shape == std::vector<std::size_t>{8, 5, 3, 3});
  CHECK(p5.get("out.w").shape == std::vector<std::size_t>{1, 8, 1, 1});

  CHECK(build_unet<float>({3, 2, 4, 3, true}, 9) == build_unet<float>({3, 2, 4, 3, true}, 9));
  CHECK_FALSE(build_unet<float>({3, 2, 4, 3, true}, 9) == build_unet<float>({3, 2, 4, 3, true}, 10));

  CHECK_THROWS(build_unet<float>({2, 1, 4, 3, true}, 0));
  CHECK_THROWS(build_unet<float>({1, 0, 4, 3, true}, 0));
  CHECK_THROWS(build_unet<float>({1, 1, 2, 3, true}, 0));
  CHECK_THROWS(forward(p, Tensor({1, 15, 16})));
  CHECK_THROWS(forward(p, Tensor({3, 16, 16})));
}

TEST_CASE("zero weights") {
  const auto x = oracle::random_tensor({3, 16, 16}, 4);
  auto p = zero_params<double>({3, 2, 4, 3, false});
  for (double v : forward(p, x).data) CHECK(v == 0.0);

  p.spec.residual = true;
  const auto y = forward(p, x);
  for (std::size_t i = 0; i < 256; ++i) CHECK(y.data[i] == x.data[256 + i]);

  // Nothing downstream of the encoder carries signal, so its gradient is zero.
  const auto t = oracle::random_tensor({1, 16, 16}, 5);
  const auto g = backward<double>(p, {&x}, {&t});
  for (double v : g.grad.get("enc0_a.w").data) CHECK(v == 0.0);
  for (double v : g.grad.get("mid_b.w").data) CHECK(v == 0.0);
  double out_bias = g.grad.get("out.b").data[0];
  CHECK(out_bias != 0.0);
}

TEST_CASE("forward matches the straight-line reimplementation") {
  for (int depth : {1, 2}) {
    for (bool residual : {false, true}) {
      const NetSpec spec{3, depth, 4, 3, residual};
      const auto p = oracle::random_params(spec, 11);
      const auto x = oracle::random_tensor({3, 16, 16}, 12);
      const auto ours = forward(p, x);
      const auto ref = oracle::naive_forward(p, x);
      double scale = 0, worst = 0;
      for (std::size_t i = 0; i < ref.size(); ++i) {
        scale = std::max(scale, std::abs(ref[i]));
        worst = std::max(worst, std::abs(ours.data[i] - ref[i]));
      }
      CHECK(worst <= 1e-6 * scale);
    }
  }
}

TEST_CASE("mean-square loss") {
  const auto a = oracle::random_tensor({1, 8, 8}, 1);
  CHECK(loss_mse(a, a) == 0.0);
  auto b = a;
  for (auto& v : b.data) v += 0.25;
  CHECK(loss_mse(a, b) == doctest::Approx(0.0625).epsilon(1e-12));
  const auto c = oracle::random_tensor({1, 8, 8}, 2);
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += (a.data[i] - c.data[i]) * (a.data[i] - c.data[i]);
  CHECK(std::abs(loss_mse(a, c) - s / 64) <= 1e-12 * (s / 64));
  CHECK_THROWS(loss_mse(a, oracle::random_tensor({1, 4, 16}, 3)));
}

TEST_CASE("finite-difference gradient check") {
  CHECK(oracle::fd_check({1, 1, 4, 3, false}, 8, 50, 21) < 1e-6);
  CHECK(oracle::fd_check({3, 1, 4, 3, true}, 8, 50, 22) < 1e-6);
  CHECK(oracle::fd_check({3, 2, 4, 3, true}, 8, 50, 23) < 1e-5);
}

TEST_CASE("batch gradient is the mean of sample gradients") {
  const NetSpec spec{1, 1, 4, 3, true};
  const auto p = oracle::random_params(spec, 31);
  const auto x = oracle::random_tensor({1, 8, 8}, 32), y = oracle::random_tensor({1, 8, 8}, 33);
  const auto single = backward<double>(p, {&x}, {&y});
  const auto dup = backward<double>(p, {&x, &x}, {&y, &y});
  CHECK(dup.grad == single.grad);
  CHECK(dup.loss == single.loss);

  const auto x2 = oracle::random_tensor({1, 8, 8}, 34), y2 = oracle::random_tensor({1, 8, 8}, 35);
  set_threads(1);
  const auto one = backward<double>(p, {&x, &x2}, {&y, &y2});
  set_threads(2);
  const auto two = backward<double>(p, {&x, &x2}, {&y, &y2});
  set_threads(1);
  CHECK(one.grad == two.grad);
}

TEST_CASE("training: lr = 0 freezes the weights") {
  const auto pairs = toy_pairs(3, 8, 1, 40);
  TrainConfig cfg;
  cfg.learning_rate = 0;
  cfg.epochs = 4;
  cfg.batch_size = 2;
  const NetSpec spec{1, 1, 4, 3, true};
  const auto r = train(pairs, spec, cfg);
  CHECK(r.params == build_unet<float>(spec, cfg.seed));
  for (double l : r.loss_curve) CHECK(l == r.loss_curve[0]);
}

TEST_CASE("training is deterministic") {
  const auto pairs = toy_pairs(5, 16, 3, 50);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.seed = 7;
  const NetSpec spec{3, 2, 4, 3, true};
  const auto a = train(pairs, spec, cfg);
  const auto b = train(pairs, spec, cfg);
  CHECK(a.params == b.params);
  CHECK(a.loss_curve == b.loss_curve);
  set_threads(2);
  const auto c = train(pairs, spec, cfg);
  set_threads(1);
  CHECK(a.params == c.params);

  cfg.seed = 8;
  CHECK_FALSE(train(pairs, spec, cfg).params == a.params);
}

TEST_CASE("overfitting a single pair, residual and plain") {
  auto spec = random_spec(3, Difficulty::standard, 3, 32, 32, 2.0);
  const auto clean = render_volume(spec);
  SliceStack noisy = clean;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g(0.0f, 40.0f);
  for (auto& s : noisy.slices)
    for (auto& v : s.values) v += g(rng);
  auto pairs = make_pairs(noisy, clean, 1, "v");
  pairs.resize(1);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 500;
  cfg.batch_size = 1;
  double finals[2];
  for (bool residual : {true, false}) {
    const auto r = train(pairs, NetSpec{1, 2, 8, 3, residual}, cfg);
    MESSAGE("residual=", residual, " initial ", r.loss_curve.front(), " final ", r.loss_curve.back());
    CHECK(r.loss_curve.back() < 0.01 * r.loss_curve.front());
    finals[residual] = r.loss_curve.back();
  }
  MESSAGE("final loss ratio residual/plain ", finals[1] / finals[0]);
}

TEST_CASE("training loss settles after the first epochs") {
  const auto pairs = toy_pairs(8, 16, 1, 60);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 30;
  cfg.batch_size = 2;
  const auto r = train(pairs, NetSpec{1, 2, 4, 3, true}, cfg);
  for (std::size_t e = 4; e < r.loss_curve.size(); ++e) CHECK(r.loss_curve[e] <= 1.05 * r.loss_curve[e - 1]);
  CHECK(r.loss_curve.back() < r.loss_curve.front());
}

TEST_CASE("diverging training aborts") {
  const auto pairs = toy_pairs(2, 8, 1, 70);
  TrainConfig cfg;
  cfg.learning_rate = 1e6;
  cfg.optimizer = Optimizer::sgd;
  cfg.epochs = 20;
  cfg.batch_size = 1;
  CHECK_THROWS_AS(train(pairs, NetSpec{1, 1, 4, 3, true}, cfg), Error);
}

TEST_CASE("volume inference and window assembly") {
  std::vector<Image2D> slices;
  for (int k = 0; k < 5; ++k) {
    Image2D s(16, 16, 1.0);
    std::mt19937_64 rng(k);
    std::normal_distribution<float> g(0.0f, 100.0f);
    for (auto& v : s.values) v = g(rng);
    slices.push_back(s);
  }
  const auto vol = stack_from(slices);

  const auto p1 = build_unet<float>({1, 2, 4, 3, true}, 3);
  const auto out1 = infer_volume(p1, vol);
  REQUIRE(out1.size() == 5);
  for (int k = 0; k < 5; ++k) {
    Tensor x({1, 16, 16});
    for (std::size_t i = 0; i < 256; ++i) x.data[i] = float(vol[k].values[i] / 1000.0);
    const auto y = forward(p1, x);
    for (std::size_t i = 0; i < 256; ++i) CHECK(out1[k].values[i] == float(y.data[i] * 1000.0));
  }

  const auto p3 = build_unet<float>({3, 2, 4, 3, true}, 4);
  const auto out3 = infer_volume(p3, vol);
  Tensor w({3, 16, 16});
  for (int j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < 256; ++i) w.data[j * 256 + i] = float(vol[1 + j].values[i] / 1000.0);
  const auto y = forward(p3, w);
  for (std::size_t i = 0; i < 256; ++i) CHECK(out3[2].values[i] == float(y.data[i] * 1000.0));

  // Edge replication: slice 0's window is {0, 0, 1}.
  const auto w0 = slice_window(vol, 0, 3);
  for (std::size_t i = 0; i < 256; ++i) CHECK(w0.data[i] == w0.data[256 + i]);

  const auto same = stack_from(std::vector<Image2D>(6, slices[0]));
  const auto out5 = infer_volume(build_unet<float>({5, 1, 4, 3, true}, 5), same);
  for (int k = 1; k < 6; ++k) CHECK(out5[k] == out5[0]);

  CHECK_THROWS(infer_volume(build_unet<float>({1, 3, 4, 3, true}, 5), stack_from({Image2D(12, 12, 1.0)})));
}

TEST_CASE("cyclic shifts commute with the network away from borders") {
  const NetSpec spec{1, 1, 4, 3, false};
  const auto p = oracle::random_params(spec, 80);
  const int n = 48, shift = 2;
  const auto x = oracle::random_tensor({1, std::size_t(n), std::size_t(n)}, 81);
  Tensor64 xs = x;
  for (int yy = 0; yy < n; ++yy)
    for (int xx = 0; xx < n; ++xx) xs.data[yy * n + (xx + shift) % n] = x.data[yy * n + xx];
  const auto a = forward(p, x), b = forward(p, xs);
  // Receptive-field radius of this spec: 11 pixels.
  const int band = 11;
  for (int yy = band; yy < n - band; ++yy)
    for (int xx = band; xx < n - band - shift; ++xx)
      CHECK(b.data[yy * n + xx + shift] == doctest::Approx(a.data[yy * n + xx]).epsilon(1e-12));
}

TEST_CASE("weights file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "ctk_test_weights.ctkw";
  const auto p = build_unet<float>({3, 2, 4, 3, true}, 12);
  write_weights(path, p);
  CHECK(read_weights(path) == p);
  {
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    std::getline(f, line);
    CHECK(line.find("z=3") != std::string::npos);
  }
  // Truncate the payload.
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 10);
  CHECK_THROWS_AS(read_weights(path), Error);
}

TEST_CASE("dihedral transforms") {
  Tensor x({2, 4, 4});
  for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] = float(i);
  CHECK(dihedral(x, 0) == x);
  std::vector<Tensor> seen;
  for (int t = 0; t < 8; ++t) {
    const auto y = dihedral(x, t);
    auto sorted = y.data;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == x.data);  // a permutation
    for (const auto& s : seen) CHECK_FALSE(s == y);
    seen.push_back(y);
  }
  // Pure flips and the transpose are involutions.
  for (int t : {1, 2, 4, 6}) CHECK(dihedral(dihedral(x, t), t) == x);
  // Transpose then flip x is a quarter turn: four of them are the identity.
  auto r = x;
  for (int i = 0; i < 4; ++i) r = dihedral(r, 3);
  CHECK(r == x);
  CHECK(dihedral(x, 1).data[1] == x.data[4]);  // (y=0, x=1) <- (y=1, x=0)
  CHECK_THROWS(dihedral(Tensor({1, 4, 2}), 0));
  CHECK_THROWS(dihedral(x, 8));
}

TEST_CASE("augmented training is deterministic and differs from plain") {
  const auto pairs = toy_pairs(4, 16, 1, 90);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 3;
  const NetSpec spec{1, 1, 4, 3, true};
  const auto plain = train(pairs, spec, cfg);
  cfg.augment = true;
  const auto a = train(pairs, spec, cfg), b = train(pairs, spec, cfg);
  CHECK(a.params == b.params);
  CHECK_FALSE(a.params == plain.params);
}
