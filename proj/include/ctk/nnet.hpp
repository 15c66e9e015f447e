#pragma once

// 2.5D encoder-decoder network (a small U-Net) with hand-written reverse-mode
// gradients, plus the trainer and volume inference.
//
// Layout of one sample: channels x height x width, row-major. The network
// works on HU / kHuScale; infer_volume and make_pairs handle the scaling.
//
// Layers, for depth D and base channels B (C_l = B * 2^l):
//   enc{l}_a, enc{l}_b   conv + ReLU, then 2x2 max-pool       l = 0..D-1
//   mid_a, mid_b         conv + ReLU at C_D
//   up{l}                nearest x2 upsample, conv + ReLU to C_l
//   dec{l}_a, dec{l}_b   conv + ReLU on concat(skip_l, up_l)   l = D-1..0
//   out                  1x1 conv to one channel
// Weights are stored as {out, in, k, k}, biases as {out}.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ctk/core.hpp"

namespace ctk {

inline constexpr double kHuScale = 1000.0;

struct NetSpec {
  int z_channels = 1;
  int depth = 3;
  int base_channels = 16;
  int kernel = 3;
  bool residual = true;

  friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

void validate(const NetSpec& spec);
/// Throws unless height and width are divisible by 2^depth.
void check_input_dims(const NetSpec& spec, int height, int width);

template <class T>
struct BasicParamStore {
  NetSpec spec;
  std::vector<std::string> names;
  std::vector<BasicTensor<T>> tensors;

  std::size_t size() const { return tensors.size(); }
  std::size_t numel() const;
  const BasicTensor<T>& get(const std::string& name) const;
  BasicTensor<T>& get(const std::string& name);
  friend bool operator==(const BasicParamStore&, const BasicParamStore&) = default;
};

using ParamStore = BasicParamStore<float>;
using ParamStore64 = BasicParamStore<double>;

template <class To, class From>
BasicParamStore<To> convert_params(const BasicParamStore<From>& p);

/// Same layout as build_unet, all tensors zero.
template <class T>
BasicParamStore<T> zero_params(const NetSpec& spec);

/// He-normal weights (std sqrt(2 / fan_in)), zero biases.
template <class T>
BasicParamStore<T> build_unet(const NetSpec& spec, std::uint64_t seed);

/// input {Z, H, W} -> output {1, H, W}.
template <class T>
BasicTensor<T> forward(const BasicParamStore<T>& params, const BasicTensor<T>& input);

/// Mean of squared differences.
template <class T>
double loss_mse(const BasicTensor<T>& pred, const BasicTensor<T>& target);

template <class T>
struct GradResult {
  double loss = 0;  // mean over the batch of loss_mse
  std::vector<double> sample_loss;
  BasicParamStore<T> grad;
};

/// Exact gradient of the mean batch loss. Samples are evaluated in parallel
/// and reduced in batch order, so the result does not depend on threads().
template <class T>
GradResult<T> backward(const BasicParamStore<T>& params, const std::vector<const BasicTensor<T>*>& inputs,
                       const std::vector<const BasicTensor<T>*>& targets);

enum class Optimizer { adam, sgd };

struct TrainConfig {
  double learning_rate = 1e-4;
  int epochs = 40;
  int batch_size = 4;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool f64_mode = false;
  // Random flip/transpose (one of the 8 symmetries of the square) per sample
  // and step, drawn from its own seeded stream. Needs square slices.
  bool augment = false;
};

/// Applies symmetry t in [0, 8) to every channel of a {C, N, N} tensor:
/// bit 0 transposes, bit 1 flips x, bit 2 flips y (in that order).
template <class T>
BasicTensor<T> dihedral(const BasicTensor<T>& x, int t);

void validate(const TrainConfig& cfg);

struct SlicePair {
  Tensor input;   // {Z, H, W}, scaled
  Tensor target;  // {1, H, W}, scaled
  std::string id;
};

using SlicePairSet = std::vector<SlicePair>;

/// Z-slice window around slice k with edge replication, as {Z, H, W} / kHuScale.
Tensor slice_window(const SliceStack& volume, int k, int z);

/// One pair per slice: window from `input`, matching slice of `target`.
SlicePairSet make_pairs(const SliceStack& input, const SliceStack& target, int z, const std::string& volume_id);

struct TrainResult {
  ParamStore params;
  std::vector<double> loss_curve;  // per-epoch mean training loss
};

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Starts from build_unet(spec, cfg.seed). Batches are drawn from a seeded
/// shuffle each epoch. Aborts if a batch loss exceeds 1e3 x the first one.
TrainResult train(const SlicePairSet& pairs, const NetSpec& spec, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Same, but continues from `init` (whose spec is used).
TrainResult train(const SlicePairSet& pairs, const ParamStore& init, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// HU in, HU out; one output slice per input slice.
SliceStack infer_volume(const ParamStore& params, const SliceStack& fbp_volume);

// Weight file: a text index followed by the CTK1 tensor containers.
//   ctk-weights 1
//   netspec z=<Z> depth=<D> base=<B> kernel=<k> residual=<0|1>
//   tensor <name> <offset> <d0>x<d1>...
//   end
// Offsets count from the first byte after the "end" line.
void write_weights(const std::filesystem::path& path, const ParamStore& params);
ParamStore read_weights(const std::filesystem::path& path);

}  // namespace ctk
