#include "ctk/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>

#include "ctk/container.hpp"
#include "ctk/error.hpp"
#include "ctk/parallel.hpp"
#include "ctk/projector.hpp"
#include "ctk/text.hpp"
#include "svg.hpp"

namespace ctk {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return splitmix(splitmix(master ^ splitmix(stream)) + index);
}

// Seed streams.
constexpr std::uint64_t kPhantomStream = 1, kCountsStream = 2, kTrainStream = 3;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write " + path.string());
  f << text;
  if (!f) throw data_error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot read " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

const char* to_string(Difficulty d) { return d == Difficulty::easy ? "easy" : "standard"; }
const char* to_string(FilterWindow w) { return w == FilterWindow::hann ? "hann" : "ramlak"; }
const char* to_string(MbirInit i) { return i == MbirInit::fbp ? "fbp" : "zero"; }
const char* to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd"; }
const char* to_string(Detrend d) { return d == Detrend::mean ? "mean" : "plane"; }

std::string roi_text(const std::optional<RoiSpec>& roi) {
  if (!roi) return "auto";
  if (roi->shape == RoiSpec::Shape::rect)
    return "rect " + format_double(roi->a) + "," + format_double(roi->b) + "," + format_double(roi->c) + "," +
           format_double(roi->d);
  return "circle " + format_double(roi->a) + "," + format_double(roi->b) + "," + format_double(roi->c);
}

std::optional<RoiSpec> parse_roi(const std::string& v) {
  if (v == "auto") return std::nullopt;
  const auto sp = v.find(' ');
  if (sp == std::string::npos) throw usage_error("roi must be 'auto', 'rect x0,y0,w,h' or 'circle cx,cy,r'");
  const std::string kind = v.substr(0, sp);
  const auto nums = parse_doubles(trim(v.substr(sp + 1)));
  if (kind == "rect" && nums.size() == 4) return RoiSpec{RoiSpec::Shape::rect, nums[0], nums[1], nums[2], nums[3]};
  if (kind == "circle" && nums.size() == 3) return RoiSpec::circle(nums[0], nums[1], nums[2]);
  throw usage_error("bad roi '" + v + "'");
}

std::vector<int> parse_ints(const std::string& v) {
  std::vector<int> out;
  for (const auto& s : split(v, ',')) out.push_back(parse_int(s));
  return out;
}

template <class E>
E parse_enum(const std::string& v, std::initializer_list<std::pair<const char*, E>> options) {
  std::string names;
  for (const auto& [name, value] : options) {
    if (v == name) return value;
    names += names.empty() ? name : std::string("|") + name;
  }
  throw usage_error("expected " + names + ", got '" + v + "'");
}

void apply(PipelineConfig& cfg, const std::string& section, const std::string& key, const std::string& v) {
  auto& d = cfg.dataset;
  auto& e = cfg.eval;
  auto& mb = cfg.mbir;
  auto& t = cfg.train;
  auto& n = cfg.net;
  if (section == "run") {
    if (key == "seed") return void(cfg.seed = parse_u64(v));
  } else if (section == "dataset") {
    if (key == "volumes") return void(d.volumes = parse_int(v));
    if (key == "train_volumes") return void(d.train_volumes = parse_int(v));
    if (key == "slices") return void(d.slices = parse_int(v));
    if (key == "width") return void(d.width = parse_int(v));
    if (key == "height") return void(d.height = parse_int(v));
    if (key == "pixel_size") return void(d.pixel_size = parse_double(v));
    if (key == "difficulty")
      return void(d.difficulty = parse_enum(v, {std::pair{"easy", Difficulty::easy}, {"standard", Difficulty::standard}}));
    if (key == "i0") return void(d.i0 = parse_double(v));
    if (key == "views") return void(d.views = parse_int(v));
    if (key == "det_spacing") return void(d.det_spacing = parse_double(v));
    if (key == "mu_water") return void(d.mu_water = parse_double(v));
  } else if (section == "fbp") {
    if (key == "window")
      return void(cfg.fbp.window =
                      parse_enum(v, {std::pair{"hann", FilterWindow::hann}, {"ramlak", FilterWindow::ramlak}}));
    if (key == "pad_factor") return void(cfg.fbp.pad_factor = parse_int(v));
  } else if (section == "mbir") {
    if (key == "p") return void(mb.p = parse_double(v));
    if (key == "q") return void(mb.q = parse_double(v));
    if (key == "c") return void(mb.c = parse_double(v));
    if (key == "beta") return void(mb.beta = parse_double(v));
    if (key == "max_iters") return void(mb.max_iters = parse_int(v));
    if (key == "tol") return void(mb.tol = parse_double(v));
    if (key == "init") return void(mb.init = parse_enum(v, {std::pair{"fbp", MbirInit::fbp}, {"zero", MbirInit::zero}}));
    if (key == "order_seed") return void(mb.order_seed = parse_u64(v));
  } else if (section == "network") {
    if (key == "z") return void(cfg.z_values = parse_ints(v));
    if (key == "depth") return void(n.depth = parse_int(v));
    if (key == "base_channels") return void(n.base_channels = parse_int(v));
    if (key == "kernel") return void(n.kernel = parse_int(v));
    if (key == "residual") return void(n.residual = parse_bool(v));
  } else if (section == "train") {
    if (key == "learning_rate") return void(t.learning_rate = parse_double(v));
    if (key == "epochs") return void(t.epochs = parse_int(v));
    if (key == "batch_size") return void(t.batch_size = parse_int(v));
    if (key == "optimizer")
      return void(t.optimizer = parse_enum(v, {std::pair{"adam", Optimizer::adam}, {"sgd", Optimizer::sgd}}));
    if (key == "beta1") return void(t.beta1 = parse_double(v));
    if (key == "beta2") return void(t.beta2 = parse_double(v));
    if (key == "epsilon") return void(t.epsilon = parse_double(v));
    if (key == "f64_mode") return void(t.f64_mode = parse_bool(v));
    if (key == "augment") return void(t.augment = parse_bool(v));
  } else if (section == "evaluate") {
    if (key == "roi") return void(e.roi = parse_roi(v));
    if (key == "nps_patch") return void(e.nps_patch = parse_int(v));
    if (key == "nps_stride") return void(e.nps_stride = parse_int(v));
    if (key == "nps_detrend")
      return void(e.nps_detrend = parse_enum(v, {std::pair{"mean", Detrend::mean}, {"plane", Detrend::plane}}));
    if (key == "nps_bins") return void(e.nps_bins = parse_int(v));
    if (key == "data_range") return void(e.data_range = parse_double(v));
    if (key == "profile_row") return void(e.profile_row = parse_int(v));
  } else {
    throw usage_error("unknown config section [" + section + "]");
  }
  throw usage_error("unknown config key " + section + "." + key);
}

fs::path stage_path(const fs::path& dir, const std::string& id, const char* what) {
  return dir / (id + "_" + what + ".ctk");
}

void check_stack(const SliceStack& s, const DatasetConfig& d, const std::string& what) {
  if (s.size() != std::size_t(d.slices)) throw data_error(what + ": expected " + std::to_string(d.slices) +
                                                          " slices, found " + std::to_string(s.size()));
  for (const auto& img : s.slices)
    if (img.width != d.width || img.height != d.height)
      throw data_error(what + ": expected " + std::to_string(d.width) + "x" + std::to_string(d.height) +
                       " slices, found " + std::to_string(img.width) + "x" + std::to_string(img.height));
}

std::string fmt(double v, const char* f = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- config

void set_config_value(PipelineConfig& cfg, const std::string& section, const std::string& key,
                      const std::string& value) {
  try {
    apply(cfg, section, key, value);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::usage) throw;
    throw usage_error(section + "." + key + ": " + e.what());
  }
}

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw usage_error("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    if (section.empty()) throw usage_error("config line " + std::to_string(lineno) + ": key outside a section");
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw usage_error("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(cfg, section, trim(std::string_view(line).substr(0, eq)),
                     trim(std::string_view(line).substr(eq + 1)));
  }
  return cfg;
}

PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw usage_error("config file not found: " + path.string());
  return parse_config(read_text(path));
}

std::string config_text(const PipelineConfig& cfg) {
  const auto& d = cfg.dataset;
  const auto& e = cfg.eval;
  const auto& mb = cfg.mbir;
  const auto& t = cfg.train;
  const auto& n = cfg.net;
  std::string z;
  for (int v : cfg.z_values) z += (z.empty() ? "" : ",") + std::to_string(v);
  std::ostringstream o;
  o << "[run]\nseed = " << cfg.seed << "\n\n";
  o << "[dataset]\nvolumes = " << d.volumes << "\ntrain_volumes = " << d.train_volumes << "\nslices = " << d.slices
    << "\nwidth = " << d.width << "\nheight = " << d.height << "\npixel_size = " << format_double(d.pixel_size)
    << "\ndifficulty = " << to_string(d.difficulty) << "\ni0 = " << format_double(d.i0) << "\nviews = " << d.views
    << "\ndet_spacing = " << format_double(d.det_spacing) << "\nmu_water = " << format_double(d.mu_water) << "\n\n";
  o << "[fbp]\nwindow = " << to_string(cfg.fbp.window) << "\npad_factor = " << cfg.fbp.pad_factor << "\n\n";
  o << "[mbir]\np = " << format_double(mb.p) << "\nq = " << format_double(mb.q) << "\nc = " << format_double(mb.c)
    << "\nbeta = " << format_double(mb.beta) << "\nmax_iters = " << mb.max_iters << "\ntol = " << format_double(mb.tol)
    << "\ninit = " << to_string(mb.init) << "\norder_seed = " << mb.order_seed << "\n\n";
  o << "[network]\nz = " << z << "\ndepth = " << n.depth << "\nbase_channels = " << n.base_channels
    << "\nkernel = " << n.kernel << "\nresidual = " << (n.residual ? "true" : "false") << "\n\n";
  o << "[train]\nlearning_rate = " << format_double(t.learning_rate) << "\nepochs = " << t.epochs
    << "\nbatch_size = " << t.batch_size << "\noptimizer = " << to_string(t.optimizer)
    << "\nbeta1 = " << format_double(t.beta1) << "\nbeta2 = " << format_double(t.beta2)
    << "\nepsilon = " << format_double(t.epsilon) << "\nf64_mode = " << (t.f64_mode ? "true" : "false")
    << "\naugment = " << (t.augment ? "true" : "false") << "\n\n";
  o << "[evaluate]\nroi = " << roi_text(e.roi) << "\nnps_patch = " << e.nps_patch << "\nnps_stride = " << e.nps_stride
    << "\nnps_detrend = " << to_string(e.nps_detrend) << "\nnps_bins = " << e.nps_bins
    << "\ndata_range = " << format_double(e.data_range) << "\nprofile_row = " << e.profile_row << "\n";
  return o.str();
}

void validate(const PipelineConfig& cfg) {
  const auto& d = cfg.dataset;
  auto bad = [](const std::string& what) { throw usage_error("config: " + what); };
  if (d.volumes < 2) bad("dataset.volumes must be >= 2");
  if (d.train_volumes < 1 || d.train_volumes >= d.volumes) bad("dataset.train_volumes must leave >= 1 test volume");
  if (d.slices < 1) bad("dataset.slices must be >= 1");
  if (d.width < 8 || d.height < 8) bad("dataset width/height must be >= 8");
  if (!(d.pixel_size > 0)) bad("dataset.pixel_size must be > 0");
  if (!(d.i0 > 0)) bad("dataset.i0 must be > 0");
  if (d.views < 1) bad("dataset.views must be >= 1");
  if (!(d.det_spacing >= 0)) bad("dataset.det_spacing must be >= 0");
  if (!(d.mu_water > 0)) bad("dataset.mu_water must be > 0");
  if (cfg.z_values.empty()) bad("network.z is empty");
  std::set<int> seen;
  for (int z : cfg.z_values) {
    if (z < 1 || z % 2 == 0) bad("network.z values must be odd and >= 1");
    if (!seen.insert(z).second) bad("network.z lists " + std::to_string(z) + " twice");
  }
  const auto& e = cfg.eval;
  if (!(e.data_range > 0)) bad("evaluate.data_range must be > 0");
  if (e.nps_bins < 4) bad("evaluate.nps_bins must be >= 4");
  if (e.profile_row < -1 || e.profile_row >= d.height) bad("evaluate.profile_row out of range");
  try {
    validate(cfg.fbp);
    validate(cfg.mbir);
    validate(cfg.net);
    check_input_dims(cfg.net, d.height, d.width);
    validate(cfg.train);
    validate(scan_geometry(cfg));
    validate(nps_params(cfg), d.width, d.height);
  } catch (const Error& err) {
    bad(err.what());
  }
}

Geometry scan_geometry(const PipelineConfig& cfg) {
  const auto& d = cfg.dataset;
  return Geometry::for_grid(d.width, d.height, d.pixel_size, d.views, d.det_spacing);
}

RoiSpec eval_roi(const PipelineConfig& cfg) {
  if (cfg.eval.roi) return *cfg.eval.roi;
  const auto& d = cfg.dataset;
  const int side = std::min(d.width, d.height) * 3 / 8;
  return RoiSpec::rect((d.width - side) / 2, (d.height - side) / 2, side, side);
}

NpsParams nps_params(const PipelineConfig& cfg) {
  NpsParams p;
  p.patch_size = cfg.eval.nps_patch;
  p.stride = cfg.eval.nps_stride;
  p.detrend = cfg.eval.nps_detrend;
  p.roi = eval_roi(cfg);
  return p;
}

// ---------------------------------------------------------------- manifest

std::vector<const VolumeEntry*> DatasetManifest::split(Split s) const {
  std::vector<const VolumeEntry*> out;
  for (const auto& v : volumes)
    if (v.split == s) out.push_back(&v);
  return out;
}

std::string manifest_text(const DatasetManifest& m) {
  std::ostringstream o;
  o << "ctk-manifest 1\nbegin config\n" << config_text(m.config) << "end config\n";
  for (const auto& v : m.volumes) {
    o << "begin volume " << v.id << "\n";
    o << "split=" << (v.split == Split::train ? "train" : "test") << "\n";
    o << "counts_seed=" << v.counts_seed << "\n";
    o << "truth=" << v.truth << "\ncounts=" << v.counts << "\nfbp=" << v.fbp << "\nmbir=" << v.mbir << "\n";
    o << "begin phantom\n" << to_text(v.phantom) << "end phantom\nend volume\n";
  }
  return o.str();
}

void write_manifest(const DatasetManifest& m) { write_text(m.root / kManifestName, manifest_text(m)); }

DatasetManifest read_manifest(const fs::path& path_in) {
  fs::path path = path_in;
  if (fs::is_directory(path)) path /= kManifestName;
  if (!fs::exists(path)) throw data_error("manifest not found: " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::istringstream is(read_text(path));
  std::string line;
  auto next = [&](bool required) {
    while (std::getline(is, line)) {
      line = trim(line);
      if (!line.empty()) return true;
    }
    if (required) throw data_error("manifest truncated");
    return false;
  };
  next(true);
  if (line != "ctk-manifest 1") throw data_error("not a ctk manifest: " + path.string());
  next(true);
  if (line != "begin config") throw data_error("manifest: expected 'begin config'");
  std::string cfg_text;
  while (next(true) && line != "end config") cfg_text += line + "\n";
  try {
    m.config = parse_config(cfg_text);
  } catch (const Error& e) {
    throw data_error(std::string("manifest config: ") + e.what());
  }

  while (next(false)) {
    if (line.rfind("begin volume ", 0) != 0) throw data_error("manifest: unexpected line '" + line + "'");
    VolumeEntry v;
    v.id = trim(std::string_view(line).substr(13));
    bool have_split = false, have_phantom = false;
    while (next(true) && line != "end volume") {
      if (line == "begin phantom") {
        std::string ptext;
        while (next(true) && line != "end phantom") ptext += line + "\n";
        v.phantom = phantom_from_text(ptext);
        have_phantom = true;
        continue;
      }
      const auto [key, value] = split_key_value(line);
      if (key == "split") {
        if (value != "train" && value != "test") throw data_error("manifest " + v.id + ": bad split '" + value + "'");
        v.split = value == "train" ? Split::train : Split::test;
        have_split = true;
      } else if (key == "counts_seed") v.counts_seed = parse_u64(value);
      else if (key == "truth") v.truth = value;
      else if (key == "counts") v.counts = value;
      else if (key == "fbp") v.fbp = value;
      else if (key == "mbir") v.mbir = value;
      else throw data_error("manifest " + v.id + ": unknown key '" + key + "'");
    }
    if (!have_split || !have_phantom || v.truth.empty() || v.counts.empty() || v.fbp.empty() || v.mbir.empty())
      throw data_error("manifest " + v.id + ": incomplete volume entry");
    m.volumes.push_back(std::move(v));
  }

  std::set<std::string> ids;
  for (const auto& v : m.volumes)
    if (!ids.insert(v.id).second) throw data_error("manifest: volume " + v.id + " listed twice");
  if (m.split(Split::train).empty() || m.split(Split::test).empty())
    throw data_error("manifest needs at least one train and one test volume");

  const auto& d = m.config.dataset;
  const Geometry g = scan_geometry(m.config);
  for (const auto& v : m.volumes) {
    for (const auto* f : {&v.truth, &v.counts, &v.fbp, &v.mbir})
      if (!fs::exists(m.root / *f)) throw data_error("manifest " + v.id + ": missing file " + *f);
    check_stack(read_stack(m.root / v.truth), d, v.truth);
    check_stack(read_stack(m.root / v.fbp), d, v.fbp);
    check_stack(read_stack(m.root / v.mbir), d, v.mbir);
    const auto counts = read_counts_volume(m.root / v.counts);
    if (counts.size() != std::size_t(d.slices) || counts.front().geometry != g)
      throw data_error(v.counts + ": counts do not match the configured scan");
  }
  return m;
}

// ---------------------------------------------------------------- dataset

DatasetManifest generate_dataset(const PipelineConfig& cfg, const fs::path& out_dir, const Progress& log) {
  validate(cfg);
  const bool created_dir = !fs::exists(out_dir);
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  auto cleanup = [&] {
    std::error_code ec;
    for (const auto& p : written) fs::remove(p, ec);
    if (created_dir && fs::is_empty(out_dir, ec)) fs::remove(out_dir, ec);
  };

  const auto& d = cfg.dataset;
  DatasetManifest m;
  m.root = out_dir;
  m.config = cfg;
  std::string stage = "geometry";
  try {
    const Geometry g = scan_geometry(cfg);
    const SystemMatrix system(g);
    std::string trace_csv = "volume,slice,pass,objective\n";

    for (int i = 0; i < d.volumes; ++i) {
      char idbuf[32];
      std::snprintf(idbuf, sizeof idbuf, "vol%03d", i);
      VolumeEntry v;
      v.id = idbuf;
      v.split = i < d.train_volumes ? Split::train : Split::test;
      v.counts_seed = derive_seed(cfg.seed, kCountsStream, i);

      stage = "phantom " + v.id;
      v.phantom = random_spec(derive_seed(cfg.seed, kPhantomStream, i), d.difficulty, d.slices, d.width, d.height,
                              d.pixel_size);
      const SliceStack truth = render_volume(v.phantom);

      std::vector<CountsSinogram> counts(d.slices);
      SliceStack fbp, mbir;
      fbp.slices.resize(d.slices);
      mbir.slices.resize(d.slices);
      fbp.slice_spacing = mbir.slice_spacing = truth.slice_spacing;
      std::vector<std::vector<double>> traces(d.slices);
      std::vector<std::string> failed_stage(d.slices);
      std::vector<std::exception_ptr> errors(d.slices);

      parallel_for(d.slices, [&](std::size_t k) {
        const std::string at = v.id + " slice " + std::to_string(k);
        const char* step = "project";
        try {
          const Sinogram sino = forward_project(hu_to_mu(truth[k], d.mu_water), g);
          step = "counts";
          counts[k] = simulate_counts(sino, d.i0, splitmix(v.counts_seed + k));
          const auto data = counts_to_line_integrals(counts[k]);
          step = "fbp";
          fbp[k] = mu_to_hu(fbp_reconstruct(data.sinogram, g, cfg.fbp), d.mu_water);
          step = "mbir";
          MbirParams mp = cfg.mbir;
          mp.init_fbp = cfg.fbp;
          mp.order_seed = derive_seed(cfg.mbir.order_seed, i, k);
          auto res = mbir_reconstruct(data, g, mp, &system);
          for (std::size_t t = 1; t < res.objective_trace.size(); ++t)
            if (res.objective_trace[t] > res.objective_trace[t - 1] + 1e-9 * std::abs(res.objective_trace[0]))
              throw numerical_error("objective increased at pass " + std::to_string(t));
          mbir[k] = mu_to_hu(res.image(g), d.mu_water);
          traces[k] = std::move(res.objective_trace);
        } catch (...) {
          failed_stage[k] = std::string(step) + " " + at;
          errors[k] = std::current_exception();
        }
      });
      for (int k = 0; k < d.slices; ++k)
        if (errors[k]) {
          stage = failed_stage[k];
          std::rethrow_exception(errors[k]);
        }
      for (int k = 0; k < d.slices; ++k)
        for (std::size_t t = 0; t < traces[k].size(); ++t)
          trace_csv += v.id + "," + std::to_string(k) + "," + std::to_string(t) + "," + format_double(traces[k][t]) + "\n";

      stage = "write " + v.id;
      auto put = [&](const char* what, std::string& field) {
        const fs::path p = stage_path(out_dir, v.id, what);
        field = p.filename().string();
        if (!fs::exists(p)) written.push_back(p);
        return p;
      };
      write_stack(put("truth", v.truth), truth);
      write_counts_volume(put("counts", v.counts), counts, truth.slice_spacing);
      write_stack(put("fbp", v.fbp), fbp);
      write_stack(put("mbir", v.mbir), mbir);
      m.volumes.push_back(std::move(v));
      if (log) log("generated " + m.volumes.back().id + " (" + (i < d.train_volumes ? "train" : "test") + ")");
    }

    stage = "write manifest";
    for (const char* name : {"mbir_trace.csv", kManifestName})
      if (!fs::exists(out_dir / name)) written.push_back(out_dir / name);
    write_text(out_dir / "mbir_trace.csv", trace_csv);
    write_manifest(m);
  } catch (const Error& e) {
    cleanup();
    throw Error(e.kind(), "gen-dataset failed at " + stage + ": " + e.what());
  } catch (const std::exception& e) {
    cleanup();
    throw data_error("gen-dataset failed at " + stage + ": " + e.what());
  }
  return m;
}

SlicePairSet training_pairs(const DatasetManifest& m, int z) {
  SlicePairSet pairs;
  std::set<std::string> test_ids;
  for (const auto* v : m.split(Split::test)) test_ids.insert(v->id);
  for (const auto* v : m.split(Split::train)) {
    if (test_ids.count(v->id)) throw data_error("volume " + v->id + " is in both splits");
    auto p = make_pairs(read_stack(m.root / v->fbp), read_stack(m.root / v->mbir), z, v->id);
    for (auto& pair : p) pairs.push_back(std::move(pair));
  }
  if (pairs.empty()) throw data_error("train split is empty");
  return pairs;
}

// ---------------------------------------------------------------- training / inference

std::string loss_csv(const std::vector<double>& curve) {
  std::string s = "epoch,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) s += std::to_string(i + 1) + "," + format_double(curve[i]) + "\n";
  return s;
}

TrainOutput train_model(const DatasetManifest& m, int z, const fs::path& out_dir, const Progress& log) {
  if (z < 1 || z % 2 == 0) throw usage_error("Z must be odd and >= 1, got " + std::to_string(z));
  NetSpec spec = m.config.net;
  spec.z_channels = z;
  TrainConfig tc = m.config.train;
  tc.seed = derive_seed(m.config.seed, kTrainStream, z);
  const auto pairs = training_pairs(m, z);
  if (log) log("training Z=" + std::to_string(z) + " on " + std::to_string(pairs.size()) + " slice pairs");
  TrainOutput out;
  out.result = train(pairs, spec, tc, [&](int epoch, double loss) {
    if (log) log("  Z=" + std::to_string(z) + " epoch " + std::to_string(epoch + 1) + " loss " + fmt(loss));
  });
  fs::create_directories(out_dir);
  out.weights = out_dir / ("weights_z" + std::to_string(z) + ".ctkw");
  out.loss_csv = out_dir / ("loss_z" + std::to_string(z) + ".csv");
  write_weights(out.weights, out.result.params);
  write_text(out.loss_csv, loss_csv(out.result.loss_curve));
  return out;
}

void infer_file(const fs::path& weights, const fs::path& fbp_stack, const fs::path& out_stack) {
  const auto params = read_weights(weights);
  const auto fbp = read_stack(fbp_stack);
  if (fbp.size() == 0) throw data_error(fbp_stack.string() + ": empty stack");
  const int scale = 1 << params.spec.depth;
  const auto& s0 = fbp[0];
  if (s0.width % scale || s0.height % scale)
    throw data_error("weights need slice dims divisible by " + std::to_string(scale) + ", got " +
                     std::to_string(s0.width) + "x" + std::to_string(s0.height));
  write_stack(out_stack, infer_volume(params, fbp));
}

// ---------------------------------------------------------------- evaluation

std::string dl_label(int z) { return "DL-MBIR_" + std::to_string(z); }

EvaluationResult evaluate(const DatasetManifest& m, const std::vector<fs::path>& weights, const fs::path& out_dir,
                          const Progress& log) {
  const auto& cfg = m.config;
  const auto test = m.split(Split::test);
  if (test.empty()) throw data_error("test split is empty");

  std::vector<std::string> missing;
  for (const auto& w : weights)
    if (!fs::exists(w)) missing.push_back(w.string());
  for (const auto* v : test)
    for (const auto* f : {&v->truth, &v->fbp, &v->mbir})
      if (!fs::exists(m.root / *f)) missing.push_back((m.root / *f).string());
  if (!missing.empty()) {
    std::string list;
    for (const auto& s : missing) list += "\n  " + s;
    throw data_error("missing evaluation inputs:" + list);
  }

  std::vector<std::string> labels{"MBIR", "FBP"};
  std::vector<ParamStore> nets;
  for (const auto& w : weights) {
    nets.push_back(read_weights(w));
    const auto label = dl_label(nets.back().spec.z_channels);
    if (std::find(labels.begin(), labels.end(), label) != labels.end())
      throw usage_error("two weight files for " + label);
    labels.push_back(label);
  }
  const std::size_t n_methods = labels.size();

  const RoiSpec roi = eval_roi(cfg);
  const NpsParams nps = nps_params(cfg);
  validate(roi, cfg.dataset.width, cfg.dataset.height);
  fs::create_directories(out_dir);

  EvaluationResult res;
  std::vector<std::vector<Image2D>> pooled(n_methods);
  std::vector<double> abs_diff(n_methods, 0.0);
  std::size_t diff_pixels = 0;
  std::vector<svg::Series> psnr_series(n_methods);
  std::vector<svg::Series> profile_series;
  std::string profile_csv = "method,position_mm,value_hu\n";
  int global_slice = 0;

  for (std::size_t vi = 0; vi < test.size(); ++vi) {
    const auto& v = *test[vi];
    const SliceStack truth = read_stack(m.root / v.truth);
    std::vector<SliceStack> stacks(n_methods);
    stacks[0] = read_stack(m.root / v.mbir);
    stacks[1] = read_stack(m.root / v.fbp);
    check_stack(stacks[0], cfg.dataset, v.mbir);
    check_stack(stacks[1], cfg.dataset, v.fbp);
    for (std::size_t n = 0; n < nets.size(); ++n) {
      if (log) log("inferring " + labels[n + 2] + " on " + v.id);
      stacks[n + 2] = infer_volume(nets[n], stacks[1]);
    }
    const auto& ref = stacks[0];

    for (std::size_t mi = 0; mi < n_methods; ++mi) {
      SliceStack diff;
      diff.slice_spacing = ref.slice_spacing;
      for (std::size_t k = 0; k < ref.size(); ++k) {
        const auto& img = stacks[mi][k];
        const auto st = roi_stats(img, roi);
        const double p = psnr(img, ref[k], cfg.eval.data_range);
        res.report.rows.push_back({v.id, labels[mi], int(k), p, st.mean, st.std});
        psnr_series[mi].x.push_back(global_slice + double(k));
        psnr_series[mi].y.push_back(p);
        pooled[mi].push_back(img);
        diff.slices.push_back(difference_image(img, ref[k]));
        for (float dv : diff.slices.back().values) abs_diff[mi] += std::abs(double(dv));
        if (mi == 0) diff_pixels += img.size();
      }
      if (mi > 0) write_stack(out_dir / ("diff_" + labels[mi] + "_" + v.id + ".ctk"), diff);
    }

    if (vi == 0) {
      const int k = int(ref.size()) / 2;
      const int row = cfg.eval.profile_row >= 0 ? cfg.eval.profile_row : cfg.dataset.height / 2;
      auto add = [&](const std::string& label, const Image2D& img) {
        svg::Series s{label, {}, {}};
        for (const auto& pt : line_profile(img, row, 0, img.width - 1)) {
          s.x.push_back(pt.position);
          s.y.push_back(pt.value);
          profile_csv += label + "," + format_double(pt.position) + "," + format_double(pt.value) + "\n";
        }
        profile_series.push_back(std::move(s));
      };
      add("Phantom", truth[k]);
      for (std::size_t mi = 0; mi < n_methods; ++mi) add(labels[mi], stacks[mi][k]);
    }
    global_slice += int(ref.size());
  }
  aggregate(res.report);

  std::string parseval_csv = "method,relative_error\n", diff_csv = "method,mean_abs_diff_hu\n";
  for (std::size_t mi = 0; mi < n_methods; ++mi) {
    const auto map = nps2d(std::span<const Image2D>(pooled[mi]), nps);
    res.nps.push_back({labels[mi], nps_radial(map, cfg.eval.nps_bins)});
    res.parseval_errors.emplace_back(labels[mi], map.parseval_error());
    res.mean_abs_diff.emplace_back(labels[mi], abs_diff[mi] / double(diff_pixels));
    parseval_csv += labels[mi] + "," + format_double(map.parseval_error()) + "\n";
    diff_csv += labels[mi] + "," + format_double(res.mean_abs_diff.back().second) + "\n";
  }
  res.nps_distances = nps_compare(res.nps, "MBIR");

  write_text(out_dir / "config.txt", config_text(cfg));
  write_text(out_dir / "metrics.csv", metrics_csv(res.report));
  write_text(out_dir / "aggregates.csv", aggregates_csv(res.report));
  write_text(out_dir / "nps.csv", nps_csv(res.nps));
  write_text(out_dir / "nps_distances.csv", distances_csv(res.nps_distances, "MBIR"));
  write_text(out_dir / "nps_parseval.csv", parseval_csv);
  write_text(out_dir / "difference.csv", diff_csv);
  write_text(out_dir / "profile.csv", profile_csv);

  // MBIR is the PSNR reference and sits at the cap; leave it off the curve.
  psnr_series.erase(psnr_series.begin());
  for (std::size_t i = 0; i < psnr_series.size(); ++i) psnr_series[i].label = labels[i + 1];
  write_text(out_dir / "psnr_slices.svg",
             svg::line_chart("PSNR vs MBIR per test slice", "test slice", "PSNR (dB)", psnr_series));
  std::vector<svg::Series> nps_series;
  for (const auto& p : res.nps) nps_series.push_back({p.label, p.profile.bin_centers, p.profile.power});
  write_text(out_dir / "nps.svg",
             svg::line_chart("Radial noise power spectrum", "frequency (1/mm)", "NPS (HU^2 mm^2)", nps_series));
  write_text(out_dir / "profile.svg",
             svg::line_chart("Line profile, first test volume, middle slice", "x (mm)", "HU", profile_series));
  if (log) log("wrote evaluation outputs to " + out_dir.string());
  return res;
}

// ---------------------------------------------------------------- report

namespace {

std::string csv_table(const std::string& csv) {
  std::istringstream is(csv);
  std::string line, out = "<table>\n";
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out += "<tr>";
    for (const auto& cell : split(line, ',')) {
      const char* tag = header ? "th" : "td";
      out += std::string("<") + tag + ">" + svg::escape(cell) + "</" + tag + ">";
    }
    out += "</tr>\n";
    header = false;
  }
  return out + "</table>\n";
}

}  // namespace

fs::path write_report(const fs::path& out_dir) {
  const std::vector<std::string> required{"aggregates.csv", "nps_distances.csv", "nps_parseval.csv", "difference.csv",
                                          "config.txt",     "psnr_slices.svg",   "nps.svg",          "profile.svg"};
  std::string missing;
  for (const auto& f : required)
    if (!fs::exists(out_dir / f)) missing += "\n  " + (out_dir / f).string();
  if (!missing.empty()) throw data_error("report inputs missing:" + missing);

  std::ostringstream h;
  h << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>ctk evaluation report</title>\n"
    << "<style>body{font-family:sans-serif;max-width:960px;margin:2em auto}"
    << "table{border-collapse:collapse;margin:1em 0}td,th{border:1px solid #999;padding:3px 8px;text-align:right}"
    << "pre{background:#f4f4f4;padding:1em}</style>\n</head>\n<body>\n";
  h << "<h1>Evaluation report</h1>\n";
  h << "<p>PSNR and difference images use the MBIR reconstruction as reference. ROI statistics come from a fixed "
       "uniform water region.</p>\n";
  h << "<h2>Summary (test split means)</h2>\n" << csv_table(read_text(out_dir / "aggregates.csv"));
  h << "<h2>PSNR per slice</h2>\n" << read_text(out_dir / "psnr_slices.svg");
  h << "<h2>Noise power spectrum</h2>\n" << read_text(out_dir / "nps.svg");
  h << "<h3>Distance to the MBIR profile</h3>\n" << csv_table(read_text(out_dir / "nps_distances.csv"));
  h << "<h3>Parseval check</h3>\n" << csv_table(read_text(out_dir / "nps_parseval.csv"));
  h << "<h2>Line profile</h2>\n" << read_text(out_dir / "profile.svg");
  h << "<h2>Mean absolute difference to MBIR</h2>\n" << csv_table(read_text(out_dir / "difference.csv"));
  std::vector<svg::Series> losses;
  for (int z = 1; z <= 15; z += 2) {
    const auto path = out_dir / ("loss_z" + std::to_string(z) + ".csv");
    if (!fs::exists(path)) continue;
    svg::Series s{"Z=" + std::to_string(z), {}, {}};
    std::istringstream is(read_text(path));
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      const auto cells = split(line, ',');
      if (cells.size() != 2) throw data_error(path.string() + ": bad row '" + line + "'");
      s.x.push_back(parse_double(cells[0]));
      s.y.push_back(parse_double(cells[1]));
    }
    losses.push_back(std::move(s));
  }
  if (!losses.empty())
    h << "<h2>Training loss</h2>\n" << svg::line_chart("Training loss", "epoch", "MSE (scaled)", losses, true);
  h << "<h2>Configuration</h2>\n<pre>" << svg::escape(read_text(out_dir / "config.txt")) << "</pre>\n";
  h << "</body>\n</html>\n";
  const auto path = out_dir / "report.html";
  write_text(path, h.str());
  return path;
}

}  // namespace ctk
