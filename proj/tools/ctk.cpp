// ctk: dataset synthesis, training, inference, evaluation and reporting.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctk/error.hpp"
#include "ctk/parallel.hpp"
#include "ctk/pipeline.hpp"

namespace {

using namespace ctk;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out;
  std::vector<std::string> overrides;  // section.key=value
  bool quiet = false;
};

// Returns the --out option so commands can make it required.
CLI::Option* add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "Config file (sections and key = value lines)");
  cmd->add_option("--seed", c.seed, "Master seed, overrides [run] seed");
  cmd->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
  auto* out = cmd->add_option("--out", c.out, out_help);
  cmd->add_option("--set", c.overrides, "Override one config value, section.key=value")->take_all();
  cmd->add_flag("-q,--quiet", c.quiet, "No progress output");
  return out;
}

void apply_overrides(PipelineConfig& cfg, const Common& c) {
  for (const auto& o : c.overrides) {
    const auto dot = o.find('.'), eq = o.find('=');
    if (dot == std::string::npos || eq == std::string::npos || eq < dot)
      throw usage_error("--set expects section.key=value, got '" + o + "'");
    set_config_value(cfg, o.substr(0, dot), o.substr(dot + 1, eq - dot - 1), o.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
}

PipelineConfig config_from(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : load_config(c.config);
  apply_overrides(cfg, c);
  validate(cfg);
  return cfg;
}

// Training and evaluation start from the configuration echoed in the
// manifest; --config and --set may change the network, training and
// evaluation sections but not the dataset that was already generated.
DatasetManifest manifest_with_overrides(const std::string& path, const Common& c) {
  auto m = read_manifest(path);
  if (!c.config.empty()) {
    const auto file = load_config(c.config);
    m.config.net = file.net;
    m.config.train = file.train;
    m.config.z_values = file.z_values;
    m.config.eval = file.eval;
  }
  const auto dataset = m.config.dataset;
  const auto fbp = m.config.fbp;
  const auto mbir = m.config.mbir;
  apply_overrides(m.config, c);
  if (m.config.dataset.width != dataset.width || m.config.dataset.slices != dataset.slices ||
      m.config.dataset.height != dataset.height)
    throw usage_error("dataset settings cannot change after gen-dataset");
  m.config.fbp = fbp;
  m.config.mbir = mbir;
  validate(m.config);
  return m;
}

Progress progress(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

std::vector<fs::path> default_weights(const DatasetManifest& m, const fs::path& dir) {
  std::vector<fs::path> out;
  for (int z : m.config.z_values) out.push_back(dir / ("weights_z" + std::to_string(z) + ".ctkw"));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctk: CT reconstruction workbench"};
  app.require_subcommand(1);

  Common gen_c, train_c, infer_c, eval_c, report_c, run_c;
  std::string manifest, input, weights_one;
  std::vector<int> z_list;
  std::vector<std::string> weights;

  auto* gen = app.add_subcommand("gen-dataset", "Synthesize phantoms, counts, FBP and MBIR volumes");
  add_common(gen, gen_c, "Dataset directory (default: dataset)");

  auto* tr = app.add_subcommand("train", "Train one network per Z");
  add_common(tr, train_c, "Directory for weights and loss curves (default: manifest directory)");
  tr->add_option("--manifest", manifest, "Dataset manifest or its directory")->required();
  tr->add_option("--z", z_list, "Input slice counts (default: [network] z)");

  auto* inf = app.add_subcommand("infer", "Apply a trained network to an FBP stack");
  add_common(inf, infer_c, "Output stack path")->required();
  inf->add_option("--weights", weights_one, "Weights file")->required();
  inf->add_option("--input", input, "FBP stack (CTK1)")->required();

  auto* ev = app.add_subcommand("evaluate", "Metrics, NPS, difference images and plots on the test split");
  add_common(ev, eval_c, "Output directory (default: manifest directory)");
  ev->add_option("--manifest", manifest, "Dataset manifest or its directory")->required();
  ev->add_option("--weights", weights, "Weights files (default: weights_z<Z>.ctkw in --out)");

  auto* rep = app.add_subcommand("report", "Write report.html from evaluate outputs");
  add_common(rep, report_c, "Evaluation directory")->required();

  auto* run = app.add_subcommand("run", "gen-dataset, train, evaluate and report in one go");
  add_common(run, run_c, "Output directory (default: results)");

  Common config_c;
  auto* show = app.add_subcommand("config", "Print the effective configuration with every default filled in");
  add_common(show, config_c, "Unused");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : int(ErrorKind::usage);
  }

  try {
    const auto t0 = std::chrono::steady_clock::now();
    if (gen->parsed()) {
      set_threads(gen_c.threads);
      const auto cfg = config_from(gen_c);
      const fs::path out = gen_c.out.empty() ? "dataset" : gen_c.out;
      generate_dataset(cfg, out, progress(gen_c));
      std::cout << (out / kManifestName).string() << '\n';
    } else if (tr->parsed()) {
      set_threads(train_c.threads);
      const auto m = manifest_with_overrides(manifest, train_c);
      const fs::path out = train_c.out.empty() ? m.root : fs::path(train_c.out);
      for (int z : z_list.empty() ? m.config.z_values : z_list) {
        const auto r = train_model(m, z, out, progress(train_c));
        std::cout << r.weights.string() << '\n';
      }
    } else if (inf->parsed()) {
      set_threads(infer_c.threads);
      infer_file(weights_one, input, infer_c.out);
    } else if (ev->parsed()) {
      set_threads(eval_c.threads);
      const auto m = manifest_with_overrides(manifest, eval_c);
      const fs::path out = eval_c.out.empty() ? m.root : fs::path(eval_c.out);
      std::vector<fs::path> w(weights.begin(), weights.end());
      if (w.empty()) w = default_weights(m, out);
      const auto res = evaluate(m, w, out, progress(eval_c));
      std::cout << aggregates_csv(res.report);
    } else if (rep->parsed()) {
      std::cout << write_report(report_c.out).string() << '\n';
    } else if (show->parsed()) {
      std::cout << config_text(config_from(config_c));
      return 0;
    } else if (run->parsed()) {
      set_threads(run_c.threads);
      const auto cfg = config_from(run_c);
      const fs::path out = run_c.out.empty() ? "results" : run_c.out;
      const auto log = progress(run_c);
      const auto m = generate_dataset(cfg, out / "dataset", log);
      std::vector<fs::path> w;
      for (int z : cfg.z_values) w.push_back(train_model(m, z, out, log).weights);
      const auto res = evaluate(m, w, out, log);
      write_report(out);
      std::cout << aggregates_csv(res.report);
    }
    if (!gen_c.quiet && !train_c.quiet && !eval_c.quiet && !run_c.quiet) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "done in %.1f s\n", s);
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return int(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return int(ErrorKind::data);
  }
}
