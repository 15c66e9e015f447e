#pragma once

// End-to-end experiment pipeline behind the ctk command-line tool:
// dataset synthesis, training, inference, evaluation and the HTML report.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctk/fbp.hpp"
#include "ctk/mbir.hpp"
#include "ctk/metrics.hpp"
#include "ctk/nnet.hpp"
#include "ctk/phantom.hpp"

namespace ctk {

namespace fs = std::filesystem;

struct DatasetConfig {
  int volumes = 6;
  int train_volumes = 4;
  int slices = 9;
  int width = 64;
  int height = 64;
  double pixel_size = 1.0;  // mm
  Difficulty difficulty = Difficulty::standard;
  double i0 = 1e4;
  int views = 90;
  double det_spacing = 0;  // 0: pixel size
  double mu_water = kDefaultMuWater;
};

struct EvalConfig {
  std::optional<RoiSpec> roi;  // unset: centered square, 3/8 of the smaller side
  int nps_patch = 16;
  int nps_stride = 4;
  Detrend nps_detrend = Detrend::mean;
  int nps_bins = 8;
  double data_range = kDefaultDataRange;
  int profile_row = -1;  // -1: center row
};

/// Training defaults for the desk corpus (36 training slices). The library
/// default learning rate of 1e-4 needs roughly ten times the epochs to reach
/// the same loss; batch size 1 gives four times the updates per epoch at the
/// same cost.
inline TrainConfig desk_train_config() {
  TrainConfig t;
  t.learning_rate = 1e-3;
  t.epochs = 60;
  t.batch_size = 1;
  return t;
}

struct PipelineConfig {
  std::uint64_t seed = 1;
  DatasetConfig dataset;
  FbpParams fbp;
  MbirParams mbir;
  NetSpec net;
  TrainConfig train = desk_train_config();
  std::vector<int> z_values{1, 3, 5};
  EvalConfig eval;
};

/// Plain text, "[section]" headers and "key = value" lines, '#' comments.
/// Unknown sections or keys are usage errors.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const fs::path& path);
/// Applies one "section.key=value" override.
void set_config_value(PipelineConfig& cfg, const std::string& section, const std::string& key,
                      const std::string& value);
/// Every key with its current value; parse_config reads it back unchanged.
std::string config_text(const PipelineConfig& cfg);
void validate(const PipelineConfig& cfg);

Geometry scan_geometry(const PipelineConfig& cfg);
RoiSpec eval_roi(const PipelineConfig& cfg);
NpsParams nps_params(const PipelineConfig& cfg);

enum class Split { train, test };

struct VolumeEntry {
  std::string id;
  Split split = Split::train;
  PhantomSpec phantom;
  std::uint64_t counts_seed = 0;
  // File names relative to the manifest directory.
  std::string truth, counts, fbp, mbir;
};

struct DatasetManifest {
  fs::path root;
  PipelineConfig config;
  std::vector<VolumeEntry> volumes;

  std::vector<const VolumeEntry*> split(Split s) const;
};

inline constexpr const char* kManifestName = "manifest.txt";

std::string manifest_text(const DatasetManifest& m);
void write_manifest(const DatasetManifest& m);
/// Parses and validates: splits, and that every file decodes with the
/// expected shape.
DatasetManifest read_manifest(const fs::path& path);

using Progress = std::function<void(const std::string&)>;

/// Renders, projects, simulates counts, and reconstructs every volume with
/// FBP (network input) and MBIR (target) from the same counts. Removes its
/// partial outputs on failure.
DatasetManifest generate_dataset(const PipelineConfig& cfg, const fs::path& out_dir, const Progress& log = {});

/// Training pairs from the train split with Z-slice windows.
SlicePairSet training_pairs(const DatasetManifest& m, int z);

struct TrainOutput {
  TrainResult result;
  fs::path weights;
  fs::path loss_csv;
};

/// Trains one network for Z and writes weights_z<Z>.ctkw and loss_z<Z>.csv.
TrainOutput train_model(const DatasetManifest& m, int z, const fs::path& out_dir, const Progress& log = {});

std::string loss_csv(const std::vector<double>& curve);

void infer_file(const fs::path& weights, const fs::path& fbp_stack, const fs::path& out_stack);

struct EvaluationResult {
  MetricsReport report;
  std::vector<LabeledProfile> nps;
  std::vector<ProfileDistance> nps_distances;
  std::vector<std::pair<std::string, double>> parseval_errors;
  std::vector<std::pair<std::string, double>> mean_abs_diff;  // vs MBIR
};

/// Method labels in evaluation order: MBIR, FBP, DL-MBIR_<Z>...
std::string dl_label(int z);

/// Evaluates MBIR, FBP and one network per weights file on the test split;
/// writes CSV tables, difference-image stacks and SVG plots into out_dir.
EvaluationResult evaluate(const DatasetManifest& m, const std::vector<fs::path>& weights, const fs::path& out_dir,
                          const Progress& log = {});

/// report.html in out_dir from the evaluate outputs. Lists missing inputs.
fs::path write_report(const fs::path& out_dir);

}  // namespace ctk
