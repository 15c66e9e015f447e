#pragma once

// Straight-line f64 reimplementation of the network forward pass, plus a
// central finite-difference gradient check. Loops are written out directly
// and share nothing with the library kernels.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ctk/nnet.hpp"

namespace oracle {

struct Map3 {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(int ch, int y, int x) { return v[(std::size_t(ch) * h + y) * w + x]; }
  double at(int ch, int y, int x) const { return v[(std::size_t(ch) * h + y) * w + x]; }
};

inline Map3 make_map(int c, int h, int w) { return {c, h, w, std::vector<double>(std::size_t(c) * h * w, 0.0)}; }

inline Map3 naive_conv(const ctk::ParamStore64& p, const std::string& layer, const Map3& in, bool relu) {
  const auto& W = p.get(layer + ".w");
  const auto& B = p.get(layer + ".b");
  const int co = int(W.shape[0]), ci = int(W.shape[1]), k = int(W.shape[2]), r = k / 2;
  Map3 out = make_map(co, in.h, in.w);
  for (int o = 0; o < co; ++o)
    for (int y = 0; y < in.h; ++y)
      for (int x = 0; x < in.w; ++x) {
        double s = B.data[o];
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int yy = y + ky - r, xx = x + kx - r;
              if (yy < 0 || xx < 0 || yy >= in.h || xx >= in.w) continue;
              s += W.data[((std::size_t(o) * ci + c) * k + ky) * k + kx] * in.at(c, yy, xx);
            }
        out.at(o, y, x) = relu ? std::max(s, 0.0) : s;
      }
  return out;
}

inline Map3 naive_pool(const Map3& in) {
  Map3 out = make_map(in.c, in.h / 2, in.w / 2);
  for (int c = 0; c < in.c; ++c)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x)
        out.at(c, y, x) = std::max(std::max(in.at(c, 2 * y, 2 * x), in.at(c, 2 * y, 2 * x + 1)),
                                   std::max(in.at(c, 2 * y + 1, 2 * x), in.at(c, 2 * y + 1, 2 * x + 1)));
  return out;
}

inline Map3 naive_upsample(const Map3& in) {
  Map3 out = make_map(in.c, in.h * 2, in.w * 2);
  for (int c = 0; c < in.c; ++c)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) out.at(c, y, x) = in.at(c, y / 2, x / 2);
  return out;
}

inline Map3 naive_level(const ctk::ParamStore64& p, const Map3& x, int level, int depth) {
  if (level == depth) return naive_conv(p, "mid_b", naive_conv(p, "mid_a", x, true), true);
  const std::string l = std::to_string(level);
  const Map3 skip = naive_conv(p, "enc" + l + "_b", naive_conv(p, "enc" + l + "_a", x, true), true);
  const Map3 below = naive_level(p, naive_pool(skip), level + 1, depth);
  const Map3 up = naive_conv(p, "up" + l, naive_upsample(below), true);
  Map3 cat = make_map(skip.c + up.c, skip.h, skip.w);
  std::copy(skip.v.begin(), skip.v.end(), cat.v.begin());
  std::copy(up.v.begin(), up.v.end(), cat.v.begin() + long(skip.v.size()));
  return naive_conv(p, "dec" + l + "_b", naive_conv(p, "dec" + l + "_a", cat, true), true);
}

inline std::vector<double> naive_forward(const ctk::ParamStore64& p, const ctk::Tensor64& input) {
  const auto& s = p.spec;
  Map3 x{int(input.shape[0]), int(input.shape[1]), int(input.shape[2]), input.data};
  Map3 out = naive_conv(p, "out", naive_level(p, x, 0, s.depth), false);
  if (s.residual) {
    const std::size_t hw = std::size_t(x.h) * x.w;
    for (std::size_t i = 0; i < hw; ++i) out.v[i] += input.data[(s.z_channels / 2) * hw + i];
  }
  return out.v;
}

inline ctk::Tensor64 random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  ctk::Tensor64 t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  for (auto& v : t.data) v = g(rng);
  return t;
}

/// Randomized weights and biases so no ReLU sits exactly at its kink.
inline ctk::ParamStore64 random_params(const ctk::NetSpec& spec, std::uint64_t seed) {
  auto p = ctk::build_unet<double>(spec, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> g(0.0, 0.1);
  for (std::size_t k = 1; k < p.size(); k += 2)
    for (auto& b : p.tensors[k].data) b = g(rng);
  return p;
}

/// Largest relative error between the analytic gradient and central
/// differences over n_coords sampled parameter coordinates. Coordinates with
/// both values below `floor` in magnitude count as absolute errors.
inline double fd_check(const ctk::NetSpec& spec, int size, int n_coords, std::uint64_t seed, double step = 1e-5,
                       double floor = 1e-9) {
  const auto params = random_params(spec, seed);
  const auto x = random_tensor({std::size_t(spec.z_channels), std::size_t(size), std::size_t(size)}, seed + 2);
  const auto y = random_tensor({1, std::size_t(size), std::size_t(size)}, seed + 3);
  const auto g = ctk::backward<double>(params, {&x}, {&y});
  std::size_t total = params.numel();
  std::mt19937_64 rng(seed + 4);
  double worst = 0;
  for (int n = 0; n < n_coords; ++n) {
    std::size_t flat = std::uniform_int_distribution<std::size_t>(0, total - 1)(rng);
    std::size_t k = 0;
    while (flat >= params.tensors[k].numel()) flat -= params.tensors[k++].numel();
    auto plus = params, minus = params;
    plus.tensors[k].data[flat] += step;
    minus.tensors[k].data[flat] -= step;
    const double fd = (ctk::loss_mse(ctk::forward(plus, x), y) - ctk::loss_mse(ctk::forward(minus, x), y)) / (2 * step);
    const double an = g.grad.tensors[k].data[flat];
    const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace oracle
