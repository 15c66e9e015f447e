#include "ctk/nnet.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "ctk/container.hpp"
#include "ctk/error.hpp"
#include "ctk/parallel.hpp"
#include "ctk/text.hpp"

namespace ctk {

namespace {

struct LayerDesc {
  std::string name;
  int cin;
  int cout;
  int k;
  bool relu;
};

int channels(const NetSpec& s, int level) { return s.base_channels << level; }

// Layer order: enc{l}_a/b for l = 0..D-1, mid_a/b, then up{l}, dec{l}_a/b for
// l = D-1..0, then out.
std::vector<LayerDesc> layers(const NetSpec& s) {
  std::vector<LayerDesc> out;
  const int D = s.depth, k = s.kernel;
  int cin = s.z_channels;
  for (int l = 0; l < D; ++l) {
    const int c = channels(s, l);
    out.push_back({"enc" + std::to_string(l) + "_a", cin, c, k, true});
    out.push_back({"enc" + std::to_string(l) + "_b", c, c, k, true});
    cin = c;
  }
  out.push_back({"mid_a", cin, channels(s, D), k, true});
  out.push_back({"mid_b", channels(s, D), channels(s, D), k, true});
  for (int l = D - 1; l >= 0; --l) {
    const int c = channels(s, l);
    out.push_back({"up" + std::to_string(l), channels(s, l + 1), c, k, true});
    out.push_back({"dec" + std::to_string(l) + "_a", 2 * c, c, k, true});
    out.push_back({"dec" + std::to_string(l) + "_b", c, c, k, true});
  }
  out.push_back({"out", channels(s, 0), 1, 1, false});
  return out;
}

int enc_a(int l) { return 2 * l; }
int enc_b(int l) { return 2 * l + 1; }
int mid_a(int D) { return 2 * D; }
int mid_b(int D) { return 2 * D + 1; }
int up_layer(int D, int l) { return 2 * D + 2 + 3 * (D - 1 - l); }
int dec_a(int D, int l) { return up_layer(D, l) + 1; }
int dec_b(int D, int l) { return up_layer(D, l) + 2; }
int out_layer(int D) { return 5 * D + 2; }

template <class T>
struct Act {
  int c = 0, h = 0, w = 0;
  std::vector<T> v;

  Act() = default;
  Act(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, T(0)) {}
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Same-padding patch matrix: row (c, ky, kx), column (y, x).
template <class T>
void im2col(const Act<T>& in, int k, std::vector<T>& col) {
  const int r = k / 2, H = in.h, W = in.w;
  const std::size_t hw = in.plane();
  col.resize(static_cast<std::size_t>(in.c) * k * k * hw);
  for (int c = 0; c < in.c; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
        const int dy = ky - r, dx = kx - r;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int y = 0; y < H; ++y) {
          T* row = dst + static_cast<std::size_t>(y) * W;
          const int sy = y + dy;
          if (sy < 0 || sy >= H || x0 >= x1) {
            std::fill(row, row + W, T(0));
            continue;
          }
          const T* src = in.v.data() + c * hw + static_cast<std::size_t>(sy) * W;
          std::fill(row, row + x0, T(0));
          std::copy(src + x0 + dx, src + x1 + dx, row + x0);
          std::fill(row + x1, row + W, T(0));
        }
      }
}

// Adjoint of im2col, accumulated into din.
template <class T>
void col2im(const std::vector<T>& col, int k, Act<T>& din) {
  const int r = k / 2, H = din.h, W = din.w;
  const std::size_t hw = din.plane();
  for (int c = 0; c < din.c; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
        const int dy = ky - r, dx = kx - r;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          T* dst = din.v.data() + c * hw + static_cast<std::size_t>(sy) * W;
          const T* row = src + static_cast<std::size_t>(y) * W;
          for (int x = x0; x < x1; ++x) dst[x + dx] += row[x];
        }
      }
}

template <class T>
void check_finite(const Act<T>& a, const std::string& layer) {
  for (T v : a.v)
    if (!std::isfinite(v)) throw numerical_error("non-finite activation in layer " + layer);
}

template <class T>
Act<T> conv_forward(const Act<T>& in, const LayerDesc& L, const BasicTensor<T>& w, const BasicTensor<T>& b,
                    std::vector<T>& col) {
  Act<T> out(L.cout, in.h, in.w);
  const auto hw = static_cast<Eigen::Index>(in.plane());
  const Eigen::Index ckk = static_cast<Eigen::Index>(L.cin) * L.k * L.k;
  const T* cols = in.v.data();
  if (L.k > 1) {
    im2col(in, L.k, col);
    cols = col.data();
  }
  Eigen::Map<const RowMat<T>> W(w.data.data(), L.cout, ckk);
  Eigen::Map<const RowMat<T>> C(cols, ckk, hw);
  Eigen::Map<RowMat<T>> O(out.v.data(), L.cout, hw);
  O.noalias() = W * C;
  for (int o = 0; o < L.cout; ++o) {
    T* row = out.v.data() + o * hw;
    const T bias = b.data[o];
    if (L.relu)
      for (Eigen::Index i = 0; i < hw; ++i) row[i] = std::max(row[i] + bias, T(0));
    else
      for (Eigen::Index i = 0; i < hw; ++i) row[i] += bias;
  }
  check_finite(out, L.name);
  return out;
}

// g is the gradient at the layer output; it is masked in place for ReLU.
// Returns the gradient at the input when want_input.
template <class T>
Act<T> conv_backward(const Act<T>& in, const Act<T>& out, Act<T>& g, const LayerDesc& L, const BasicTensor<T>& w,
                     BasicTensor<T>& dw, BasicTensor<T>& db, std::vector<T>& col, bool want_input) {
  if (L.relu)
    for (std::size_t i = 0; i < g.v.size(); ++i)
      if (!(out.v[i] > T(0))) g.v[i] = T(0);
  const auto hw = static_cast<Eigen::Index>(in.plane());
  const Eigen::Index ckk = static_cast<Eigen::Index>(L.cin) * L.k * L.k;
  const T* cols = in.v.data();
  if (L.k > 1) {
    im2col(in, L.k, col);
    cols = col.data();
  }
  Eigen::Map<const RowMat<T>> G(g.v.data(), L.cout, hw);
  Eigen::Map<const RowMat<T>> C(cols, ckk, hw);
  Eigen::Map<RowMat<T>> dW(dw.data.data(), L.cout, ckk);
  dW.noalias() += G * C.transpose();
  for (int o = 0; o < L.cout; ++o) {
    const T* row = g.v.data() + o * hw;
    T s = 0;
    for (Eigen::Index i = 0; i < hw; ++i) s += row[i];
    db.data[o] += s;
  }
  Act<T> din;
  if (!want_input) return din;
  din = Act<T>(in.c, in.h, in.w);
  Eigen::Map<const RowMat<T>> W(w.data.data(), L.cout, ckk);
  if (L.k == 1) {
    Eigen::Map<RowMat<T>> D(din.v.data(), ckk, hw);
    D.noalias() = W.transpose() * G;
  } else {
    col.resize(static_cast<std::size_t>(ckk * hw));
    Eigen::Map<RowMat<T>> D(col.data(), ckk, hw);
    D.noalias() = W.transpose() * G;
    col2im(col, L.k, din);
  }
  return din;
}

template <class T>
Act<T> maxpool(const Act<T>& in, std::vector<std::uint32_t>& idx) {
  Act<T> out(in.c, in.h / 2, in.w / 2);
  idx.resize(out.v.size());
  std::size_t o = 0;
  for (int c = 0; c < in.c; ++c)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x, ++o) {
        std::size_t best = c * in.plane() + static_cast<std::size_t>(2 * y) * in.w + 2 * x;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t i = c * in.plane() + static_cast<std::size_t>(2 * y + dy) * in.w + 2 * x + dx;
            if (in.v[i] > in.v[best]) best = i;
          }
        out.v[o] = in.v[best];
        idx[o] = static_cast<std::uint32_t>(best);
      }
  return out;
}

template <class T>
Act<T> upsample(const Act<T>& in) {
  Act<T> out(in.c, in.h * 2, in.w * 2);
  std::size_t o = 0;
  for (int c = 0; c < in.c; ++c)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x, ++o) out.v[o] = in.v[c * in.plane() + static_cast<std::size_t>(y / 2) * in.w + x / 2];
  return out;
}

template <class T>
Act<T> upsample_backward(const Act<T>& g, int c, int h, int w) {
  Act<T> d(c, h, w);
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x, ++o) d.v[ch * d.plane() + static_cast<std::size_t>(y / 2) * w + x / 2] += g.v[o];
  return d;
}

template <class T>
struct Tape {
  std::vector<LayerDesc> desc;
  Act<T> input;
  std::vector<Act<T>> enc_a, skip, pooled;
  std::vector<std::vector<std::uint32_t>> pool_idx;
  Act<T> mid_a, mid_b;
  std::vector<Act<T>> upsampled, up, cat, dec_a, dec_b;
  Act<T> out;
};

template <class T>
const BasicTensor<T>& weight(const BasicParamStore<T>& p, int layer) {
  return p.tensors[2 * layer];
}
template <class T>
const BasicTensor<T>& bias(const BasicParamStore<T>& p, int layer) {
  return p.tensors[2 * layer + 1];
}

template <class T>
Tape<T> run_forward(const BasicParamStore<T>& p, const BasicTensor<T>& input) {
  const NetSpec& s = p.spec;
  if (input.shape.size() != 3 || input.shape[0] != static_cast<std::size_t>(s.z_channels))
    throw data_error("network input must be {" + std::to_string(s.z_channels) + ", H, W}");
  const int H = static_cast<int>(input.shape[1]), W = static_cast<int>(input.shape[2]);
  check_input_dims(s, H, W);
  const int D = s.depth;
  Tape<T> t;
  t.desc = layers(s);
  t.input = Act<T>(s.z_channels, H, W);
  t.input.v = input.data;
  t.enc_a.resize(D);
  t.skip.resize(D);
  t.pooled.resize(D);
  t.pool_idx.resize(D);
  t.upsampled.resize(D);
  t.up.resize(D);
  t.cat.resize(D);
  t.dec_a.resize(D);
  t.dec_b.resize(D);
  std::vector<T> col;
  auto conv = [&](const Act<T>& in, int layer) {
    return conv_forward(in, t.desc[layer], weight(p, layer), bias(p, layer), col);
  };

  const Act<T>* x = &t.input;
  for (int l = 0; l < D; ++l) {
    t.enc_a[l] = conv(*x, enc_a(l));
    t.skip[l] = conv(t.enc_a[l], enc_b(l));
    t.pooled[l] = maxpool(t.skip[l], t.pool_idx[l]);
    x = &t.pooled[l];
  }
  t.mid_a = conv(*x, mid_a(D));
  t.mid_b = conv(t.mid_a, mid_b(D));
  x = &t.mid_b;
  for (int l = D - 1; l >= 0; --l) {
    t.upsampled[l] = upsample(*x);
    t.up[l] = conv(t.upsampled[l], up_layer(D, l));
    Act<T>& cat = t.cat[l];
    cat = Act<T>(t.skip[l].c + t.up[l].c, t.skip[l].h, t.skip[l].w);
    std::copy(t.skip[l].v.begin(), t.skip[l].v.end(), cat.v.begin());
    std::copy(t.up[l].v.begin(), t.up[l].v.end(), cat.v.begin() + t.skip[l].v.size());
    t.dec_a[l] = conv(cat, dec_a(D, l));
    t.dec_b[l] = conv(t.dec_a[l], dec_b(D, l));
    x = &t.dec_b[l];
  }
  t.out = conv(*x, out_layer(D));
  if (s.residual) {
    const std::size_t hw = t.out.plane();
    const T* center = input.data.data() + static_cast<std::size_t>(s.z_channels / 2) * hw;
    for (std::size_t i = 0; i < hw; ++i) t.out.v[i] += center[i];
  }
  return t;
}

template <class T>
void add_into(Act<T>& acc, const Act<T>& g) {
  for (std::size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += g.v[i];
}

// Accumulates d(loss)/d(params) into grad for one sample with output
// gradient g_out; returns nothing else.
template <class T>
void run_backward(const BasicParamStore<T>& p, Tape<T>& t, Act<T> g, BasicParamStore<T>& grad) {
  const int D = p.spec.depth;
  std::vector<T> col;
  auto back = [&](const Act<T>& in, const Act<T>& out, Act<T>& gout, int layer, bool want_input) {
    return conv_backward(in, out, gout, t.desc[layer], weight(p, layer), grad.tensors[2 * layer],
                         grad.tensors[2 * layer + 1], col, want_input);
  };

  Act<T> gx = back(t.dec_b[0], t.out, g, out_layer(D), true);
  std::vector<Act<T>> g_skip(D);
  for (int l = 0; l < D; ++l) {
    Act<T> g_deca = back(t.dec_a[l], t.dec_b[l], gx, dec_b(D, l), true);
    Act<T> g_cat = back(t.cat[l], t.dec_a[l], g_deca, dec_a(D, l), true);
    const std::size_t n_skip = t.skip[l].v.size();
    g_skip[l] = Act<T>(t.skip[l].c, t.skip[l].h, t.skip[l].w);
    std::copy(g_cat.v.begin(), g_cat.v.begin() + n_skip, g_skip[l].v.begin());
    Act<T> g_up(t.up[l].c, t.up[l].h, t.up[l].w);
    std::copy(g_cat.v.begin() + n_skip, g_cat.v.end(), g_up.v.begin());
    Act<T> g_ups = back(t.upsampled[l], t.up[l], g_up, up_layer(D, l), true);
    const Act<T>& below = l + 1 < D ? t.dec_b[l + 1] : t.mid_b;
    gx = upsample_backward(g_ups, below.c, below.h, below.w);
  }
  Act<T> g_mida = back(t.mid_a, t.mid_b, gx, mid_b(D), true);
  Act<T> g_pool = back(t.pooled[D - 1], t.mid_a, g_mida, mid_a(D), true);
  for (int l = D - 1; l >= 0; --l) {
    Act<T>& gs = g_skip[l];
    const auto& idx = t.pool_idx[l];
    for (std::size_t i = 0; i < idx.size(); ++i) gs.v[idx[i]] += g_pool.v[i];
    Act<T> g_enca = back(t.enc_a[l], t.skip[l], gs, enc_b(l), true);
    const Act<T>& in = l > 0 ? t.pooled[l - 1] : t.input;
    g_pool = back(in, t.enc_a[l], g_enca, enc_a(l), l > 0);
  }
}

}  // namespace

void validate(const NetSpec& s) {
  if (s.z_channels < 1 || s.z_channels % 2 == 0) throw usage_error("Z must be odd and >= 1");
  if (s.depth < 1) throw usage_error("network depth must be >= 1");
  if (s.base_channels < 4) throw usage_error("base_channels must be >= 4");
  if (s.kernel < 1 || s.kernel % 2 == 0) throw usage_error("kernel size must be odd");
  if (s.depth > 12 || (static_cast<long long>(s.base_channels) << s.depth) > (1 << 20))
    throw usage_error("network too large");
}

void check_input_dims(const NetSpec& spec, int height, int width) {
  const int m = 1 << spec.depth;
  if (height < m || width < m || height % m || width % m)
    throw data_error("input " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by " +
                     std::to_string(m) + " (2^depth)");
}

template <class T>
std::size_t BasicParamStore<T>::numel() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

template <class T>
const BasicTensor<T>& BasicParamStore<T>::get(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return tensors[i];
  throw data_error("no parameter named " + name);
}

template <class T>
BasicTensor<T>& BasicParamStore<T>::get(const std::string& name) {
  return const_cast<BasicTensor<T>&>(std::as_const(*this).get(name));
}

template <class To, class From>
BasicParamStore<To> convert_params(const BasicParamStore<From>& p) {
  BasicParamStore<To> out;
  out.spec = p.spec;
  out.names = p.names;
  for (const auto& t : p.tensors) {
    BasicTensor<To> c(t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) c.data[i] = static_cast<To>(t.data[i]);
    out.tensors.push_back(std::move(c));
  }
  return out;
}

template <class T>
BasicParamStore<T> zero_params(const NetSpec& spec) {
  validate(spec);
  BasicParamStore<T> p;
  p.spec = spec;
  for (const auto& L : layers(spec)) {
    p.names.push_back(L.name + ".w");
    p.tensors.emplace_back(std::vector<std::size_t>{std::size_t(L.cout), std::size_t(L.cin), std::size_t(L.k),
                                                    std::size_t(L.k)});
    p.names.push_back(L.name + ".b");
    p.tensors.emplace_back(std::vector<std::size_t>{std::size_t(L.cout)});
  }
  return p;
}

template <class T>
BasicParamStore<T> build_unet(const NetSpec& spec, std::uint64_t seed) {
  auto p = zero_params<T>(spec);
  std::mt19937_64 rng(seed);
  const auto desc = layers(spec);
  for (std::size_t l = 0; l < desc.size(); ++l) {
    const double fan_in = double(desc[l].cin) * desc[l].k * desc[l].k;
    std::normal_distribution<double> g(0.0, std::sqrt(2.0 / fan_in));
    for (auto& w : p.tensors[2 * l].data) w = static_cast<T>(g(rng));
  }
  return p;
}

template <class T>
BasicTensor<T> forward(const BasicParamStore<T>& params, const BasicTensor<T>& input) {
  auto t = run_forward(params, input);
  BasicTensor<T> out({1, std::size_t(t.out.h), std::size_t(t.out.w)});
  out.data = std::move(t.out.v);
  return out;
}

template <class T>
double loss_mse(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape != target.shape) throw data_error("loss: prediction and target shapes differ");
  if (pred.data.empty()) throw data_error("loss: empty tensors");
  double s = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double d = double(pred.data[i]) - double(target.data[i]);
    s += d * d;
  }
  return s / double(pred.data.size());
}

template <class T>
GradResult<T> backward(const BasicParamStore<T>& params, const std::vector<const BasicTensor<T>*>& inputs,
                       const std::vector<const BasicTensor<T>*>& targets) {
  if (inputs.empty()) throw usage_error("backward: empty batch");
  if (inputs.size() != targets.size()) throw usage_error("backward: inputs and targets differ in count");
  const std::size_t n = inputs.size();
  std::vector<BasicParamStore<T>> grads(n);
  std::vector<double> losses(n);
  parallel_for(n, [&](std::size_t s) {
    auto tape = run_forward(params, *inputs[s]);
    const auto& tgt = *targets[s];
    if (tgt.shape != std::vector<std::size_t>{1, std::size_t(tape.out.h), std::size_t(tape.out.w)})
      throw data_error("backward: target shape does not match the output");
    Act<T> g(1, tape.out.h, tape.out.w);
    double sq = 0;
    const T scale = T(2) / T(g.v.size());
    for (std::size_t i = 0; i < g.v.size(); ++i) {
      const T d = tape.out.v[i] - tgt.data[i];
      sq += double(d) * double(d);
      g.v[i] = scale * d;
    }
    losses[s] = sq / double(g.v.size());
    grads[s] = zero_params<T>(params.spec);
    run_backward(params, tape, std::move(g), grads[s]);
  });
  GradResult<T> r;
  r.grad = std::move(grads[0]);
  for (std::size_t s = 1; s < n; ++s)
    for (std::size_t k = 0; k < r.grad.tensors.size(); ++k) {
      auto& acc = r.grad.tensors[k].data;
      const auto& add = grads[s].tensors[k].data;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += add[i];
    }
  const T inv = T(1) / T(n);
  if (n > 1)
    for (auto& t : r.grad.tensors)
      for (auto& v : t.data) v *= inv;
  for (double l : losses) r.loss += l;
  r.loss /= double(n);
  r.sample_loss = std::move(losses);
  return r;
}

void validate(const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0) || !std::isfinite(cfg.learning_rate))
    throw usage_error("learning_rate must be finite and >= 0");
  if (cfg.epochs < 1) throw usage_error("epochs must be >= 1");
  if (cfg.batch_size < 1) throw usage_error("batch_size must be >= 1");
  if (!(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1 && cfg.epsilon > 0))
    throw usage_error("invalid Adam parameters");
}

Tensor slice_window(const SliceStack& volume, int k, int z) {
  validate(volume);
  const int n = static_cast<int>(volume.size());
  if (k < 0 || k >= n) throw usage_error("slice index out of range");
  if (z < 1 || z % 2 == 0) throw usage_error("Z must be odd and >= 1");
  const auto& s0 = volume[0];
  Tensor t({std::size_t(z), std::size_t(s0.height), std::size_t(s0.width)});
  const std::size_t hw = s0.size();
  for (int j = 0; j < z; ++j) {
    const int src = std::clamp(k - z / 2 + j, 0, n - 1);
    const auto& v = volume[src].values;
    for (std::size_t i = 0; i < hw; ++i) t.data[j * hw + i] = static_cast<float>(v[i] / kHuScale);
  }
  return t;
}

SlicePairSet make_pairs(const SliceStack& input, const SliceStack& target, int z, const std::string& volume_id) {
  validate(input);
  validate(target);
  if (input.size() != target.size() || !input[0].same_grid(target[0]))
    throw data_error("volume " + volume_id + ": input and target stacks differ in shape");
  SlicePairSet out;
  for (int k = 0; k < static_cast<int>(input.size()); ++k) {
    SlicePair p;
    p.input = slice_window(input, k, z);
    const auto& t = target[k];
    p.target = Tensor({1, std::size_t(t.height), std::size_t(t.width)});
    for (std::size_t i = 0; i < t.size(); ++i) p.target.data[i] = static_cast<float>(t.values[i] / kHuScale);
    p.id = volume_id + ":" + std::to_string(k);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

template <class T>
BasicTensor<T> cast_tensor(const Tensor& t) {
  BasicTensor<T> out(t.shape);
  for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<T>(t.data[i]);
  return out;
}

template <class T>
BasicTensor<T> dihedral_impl(const BasicTensor<T>& x, int t) {
  if (x.shape.size() != 3 || x.shape[1] != x.shape[2]) throw usage_error("dihedral: expected {C, N, N}");
  if (t < 0 || t > 7) throw usage_error("dihedral: transform index must be in [0, 8)");
  const std::size_t c = x.shape[0], n = x.shape[1];
  BasicTensor<T> out(x.shape);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t xx = 0; xx < n; ++xx) {
        std::size_t sy = y, sx = xx;
        if (t & 4) sy = n - 1 - sy;
        if (t & 2) sx = n - 1 - sx;
        if (t & 1) std::swap(sx, sy);
        out.data[(ch * n + y) * n + xx] = x.data[(ch * n + sy) * n + sx];
      }
  return out;
}

template <class T>
TrainResult train_impl(const SlicePairSet& pairs, BasicParamStore<T> params, const TrainConfig& cfg,
                       const EpochCallback& on_epoch) {
  validate(cfg);
  if (pairs.empty()) throw usage_error("train: no training pairs");
  std::vector<BasicTensor<T>> xs, ys;
  for (const auto& p : pairs) {
    if (p.input.shape.empty() || p.input.shape[0] != std::size_t(params.spec.z_channels))
      throw data_error("train: pair " + p.id + " has the wrong number of input slices");
    xs.push_back(cast_tensor<T>(p.input));
    ys.push_back(cast_tensor<T>(p.target));
  }
  const std::size_t n = pairs.size();
  std::vector<std::vector<double>> m(params.size()), v(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    m[k].assign(params.tensors[k].numel(), 0.0);
    v[k].assign(params.tensors[k].numel(), 0.0);
  }
  if (cfg.augment)
    for (const auto& p : pairs)
      if (p.input.shape.size() != 3 || p.input.shape[1] != p.input.shape[2])
        throw usage_error("train: augmentation needs square slices, pair " + p.id + " is not");
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::mt19937_64 aug_rng(cfg.seed ^ 0xd1b54a32d192ed03ull);
  std::vector<BasicTensor<T>> aug_x, aug_y;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<double> sample_loss(n);
  double first = -1;
  long long step = 0;
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < n; b0 += std::size_t(cfg.batch_size)) {
      const std::size_t b1 = std::min(n, b0 + std::size_t(cfg.batch_size));
      std::vector<const BasicTensor<T>*> bx, by;
      if (cfg.augment) {
        aug_x.clear();
        aug_y.clear();
        for (std::size_t i = b0; i < b1; ++i) {
          const int t = static_cast<int>(aug_rng() % 8);
          aug_x.push_back(dihedral_impl(xs[order[i]], t));
          aug_y.push_back(dihedral_impl(ys[order[i]], t));
        }
        for (std::size_t i = 0; i < aug_x.size(); ++i) {
          bx.push_back(&aug_x[i]);
          by.push_back(&aug_y[i]);
        }
      } else {
        for (std::size_t i = b0; i < b1; ++i) {
          bx.push_back(&xs[order[i]]);
          by.push_back(&ys[order[i]]);
        }
      }
      auto gr = backward(params, bx, by);
      if (!std::isfinite(gr.loss)) throw numerical_error("training loss became non-finite at epoch " + std::to_string(epoch));
      if (first < 0) first = gr.loss;
      if (gr.loss > 1e3 * first && gr.loss > 0)
        throw numerical_error("training diverged at epoch " + std::to_string(epoch) + ": batch loss " +
                              format_double(gr.loss) + " vs initial " + format_double(first));
      for (std::size_t i = b0; i < b1; ++i) sample_loss[order[i]] = gr.sample_loss[i - b0];

      ++step;
      const double lr = cfg.learning_rate;
      const double c1 = 1.0 - std::pow(cfg.beta1, double(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, double(step));
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto& w = params.tensors[k].data;
        const auto& g = gr.grad.tensors[k].data;
        if (cfg.optimizer == Optimizer::sgd) {
          for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(w[i] - lr * g[i]);
          continue;
        }
        auto& mk = m[k];
        auto& vk = v[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = g[i];
          mk[i] = cfg.beta1 * mk[i] + (1 - cfg.beta1) * gi;
          vk[i] = cfg.beta2 * vk[i] + (1 - cfg.beta2) * gi * gi;
          const double mh = mk[i] / c1, vh = vk[i] / c2;
          w[i] = static_cast<T>(w[i] - lr * mh / (std::sqrt(vh) + cfg.epsilon));
        }
      }
    }
    // Summed in sample order so a frozen network reports an exactly flat curve.
    double sum = 0;
    for (double l : sample_loss) sum += l;
    result.loss_curve.push_back(sum / double(n));
    if (on_epoch) on_epoch(epoch, result.loss_curve.back());
  }
  if constexpr (std::is_same_v<T, float>)
    result.params = std::move(params);
  else
    result.params = convert_params<float>(params);
  return result;
}

}  // namespace

template <class T>
BasicTensor<T> dihedral(const BasicTensor<T>& x, int t) {
  return dihedral_impl(x, t);
}
template Tensor dihedral(const Tensor&, int);
template Tensor64 dihedral(const Tensor64&, int);

TrainResult train(const SlicePairSet& pairs, const ParamStore& init, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  validate(init.spec);
  if (cfg.f64_mode) return train_impl(pairs, convert_params<double>(init), cfg, on_epoch);
  return train_impl(pairs, init, cfg, on_epoch);
}

TrainResult train(const SlicePairSet& pairs, const NetSpec& spec, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  validate(spec);
  if (cfg.f64_mode) return train_impl(pairs, build_unet<double>(spec, cfg.seed), cfg, on_epoch);
  return train_impl(pairs, build_unet<float>(spec, cfg.seed), cfg, on_epoch);
}

SliceStack infer_volume(const ParamStore& params, const SliceStack& fbp_volume) {
  validate(params.spec);
  validate(fbp_volume);
  const auto& s0 = fbp_volume[0];
  check_input_dims(params.spec, s0.height, s0.width);
  SliceStack out;
  out.slice_spacing = fbp_volume.slice_spacing;
  out.slices.resize(fbp_volume.size());
  parallel_for(fbp_volume.size(), [&](std::size_t k) {
    const auto y = forward(params, slice_window(fbp_volume, static_cast<int>(k), params.spec.z_channels));
    Image2D img(s0.width, s0.height, s0.pixel_size);
    for (std::size_t i = 0; i < img.size(); ++i) img.values[i] = static_cast<float>(y.data[i] * kHuScale);
    out.slices[k] = std::move(img);
  });
  return out;
}

void write_weights(const std::filesystem::path& path, const ParamStore& params) {
  validate(params.spec);
  std::ostringstream head;
  const auto& s = params.spec;
  head << "ctk-weights 1\n"
       << "netspec z=" << s.z_channels << " depth=" << s.depth << " base=" << s.base_channels
       << " kernel=" << s.kernel << " residual=" << (s.residual ? 1 : 0) << "\n";
  std::vector<std::uint8_t> payload;
  for (std::size_t k = 0; k < params.size(); ++k) {
    validate(params.tensors[k]);
    head << "tensor " << params.names[k] << " " << payload.size() << " ";
    for (std::size_t d = 0; d < params.tensors[k].shape.size(); ++d)
      head << (d ? "x" : "") << params.tensors[k].shape[d];
    head << "\n";
    const auto bytes = encode_container(tensor_container(params.tensors[k]));
    payload.insert(payload.end(), bytes.begin(), bytes.end());
  }
  head << "end\n";
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw data_error("cannot write " + path.string());
  const std::string h = head.str();
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!f) throw data_error("write failed: " + path.string());
}

ParamStore read_weights(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open weights file " + path.string());
  const std::vector<std::uint8_t> all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = "weights file " + path.string() + ": ";

  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto it = std::find(all.begin() + static_cast<std::ptrdiff_t>(pos), all.end(), std::uint8_t('\n'));
    if (it == all.end()) throw data_error(where + "truncated header");
    std::string line(all.begin() + static_cast<std::ptrdiff_t>(pos), it);
    pos = static_cast<std::size_t>(it - all.begin()) + 1;
    return line;
  };
  if (next_line() != "ctk-weights 1") throw data_error(where + "bad header");

  NetSpec spec;
  const auto ns = split(next_line(), ' ');
  if (ns.empty() || ns[0] != "netspec") throw data_error(where + "missing netspec line");
  for (std::size_t i = 1; i < ns.size(); ++i) {
    const auto [k, v] = split_key_value(ns[i]);
    if (k == "z") spec.z_channels = parse_int(v);
    else if (k == "depth") spec.depth = parse_int(v);
    else if (k == "base") spec.base_channels = parse_int(v);
    else if (k == "kernel") spec.kernel = parse_int(v);
    else if (k == "residual") spec.residual = parse_bool(v);
    else throw data_error(where + "unknown netspec key " + k);
  }
  auto params = zero_params<float>(spec);

  struct Entry {
    std::string name;
    std::size_t offset;
    std::vector<std::size_t> shape;
  };
  std::vector<Entry> entries;
  for (std::string line = next_line(); line != "end"; line = next_line()) {
    const auto parts = split(line, ' ');
    if (parts.size() != 4 || parts[0] != "tensor") throw data_error(where + "bad index line: " + line);
    Entry e{parts[1], parse_u64(parts[2]), {}};
    for (const auto& d : split(parts[3], 'x')) e.shape.push_back(parse_u64(d));
    entries.push_back(std::move(e));
  }
  if (entries.size() != params.size())
    throw data_error(where + "expected " + std::to_string(params.size()) + " tensors, found " +
                     std::to_string(entries.size()));
  const std::span<const std::uint8_t> payload(all.data() + pos, all.size() - pos);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& e = entries[k];
    if (e.name != params.names[k]) throw data_error(where + "expected tensor " + params.names[k] + ", found " + e.name);
    const std::size_t end = k + 1 < entries.size() ? entries[k + 1].offset : payload.size();
    if (e.offset > end || end > payload.size()) throw data_error(where + "bad offset for " + e.name);
    auto t = tensor_from_container<float>(decode_container(payload.subspan(e.offset, end - e.offset)));
    if (t.shape != params.tensors[k].shape || e.shape != t.shape)
      throw data_error(where + "shape mismatch for " + e.name);
    validate(t);
    params.tensors[k] = std::move(t);
  }
  return params;
}

template struct BasicParamStore<float>;
template struct BasicParamStore<double>;
template BasicParamStore<float> convert_params<float, double>(const BasicParamStore<double>&);
template BasicParamStore<double> convert_params<double, float>(const BasicParamStore<float>&);
template BasicParamStore<float> zero_params<float>(const NetSpec&);
template BasicParamStore<double> zero_params<double>(const NetSpec&);
template BasicParamStore<float> build_unet<float>(const NetSpec&, std::uint64_t);
template BasicParamStore<double> build_unet<double>(const NetSpec&, std::uint64_t);
template Tensor forward<float>(const ParamStore&, const Tensor&);
template Tensor64 forward<double>(const ParamStore64&, const Tensor64&);
template double loss_mse<float>(const Tensor&, const Tensor&);
template double loss_mse<double>(const Tensor64&, const Tensor64&);
template GradResult<float> backward<float>(const ParamStore&, const std::vector<const Tensor*>&,
                                           const std::vector<const Tensor*>&);
template GradResult<double> backward<double>(const ParamStore64&, const std::vector<const Tensor64*>&,
                                             const std::vector<const Tensor64*>&);

}  // namespace ctk
