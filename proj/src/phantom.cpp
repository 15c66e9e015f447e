#include "ctk/phantom.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "ctk/error.hpp"
#include "ctk/text.hpp"

namespace ctk {

namespace {

bool inside(const EllipseSpec& e, double x, double y) {
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  const double dx = x - e.cx, dy = y - e.cy;
  const double u = (dx * c + dy * s) / e.ax;
  const double v = (-dx * s + dy * c) / e.ay;
  return u * u + v * v <= 1.0;
}

// Boundary points, used for containment checks between convex shapes.
std::vector<std::pair<double, double>> boundary(const EllipseSpec& e, int n = 72) {
  std::vector<std::pair<double, double>> pts;
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  for (int k = 0; k < n; ++k) {
    const double t = 2.0 * std::numbers::pi * k / n;
    const double u = e.ax * std::cos(t), v = e.ay * std::sin(t);
    pts.emplace_back(e.cx + u * c - v * s, e.cy + u * s + v * c);
  }
  return pts;
}

bool contains(const EllipseSpec& outer, const EllipseSpec& inner) {
  if (!inside(outer, inner.cx, inner.cy)) return false;
  for (auto [x, y] : boundary(inner))
    if (!inside(outer, x, y)) return false;
  return true;
}

void validate_ellipse(const EllipseSpec& e, const char* what) {
  if (!(e.ax > 0) || !(e.ay > 0) || !std::isfinite(e.ax) || !std::isfinite(e.ay))
    throw data_error(std::string(what) + ": semi-axes must be positive");
  if (!(std::abs(e.delta_hu) <= 3000)) throw data_error(std::string(what) + ": |delta_hu| exceeds 3000");
  if (!std::isfinite(e.cx) || !std::isfinite(e.cy) || !std::isfinite(e.angle))
    throw data_error(std::string(what) + ": non-finite geometry");
}

double slice_offset(const PhantomSpec& spec, int k) { return k - 0.5 * (spec.n_slices - 1); }

}  // namespace

EllipseSpec drifted(const EllipseSpec& insert, const PhantomSpec& spec, int slice_index) {
  const double f = 1.0 + spec.z_drift * slice_offset(spec, slice_index);
  EllipseSpec e = insert;
  e.cx *= f;
  e.cy *= f;
  e.ax *= f;
  e.ay *= f;
  return e;
}

void validate(const PhantomSpec& spec) {
  if (spec.n_slices < 1) throw data_error("phantom n_slices must be >= 1");
  if (spec.width < 1 || spec.height < 1 || !(spec.pixel_size > 0))
    throw data_error("phantom grid is degenerate");
  validate_ellipse(spec.body, "body");
  if (!(std::abs(spec.z_drift) * 0.5 * (spec.n_slices - 1) < 0.5))
    throw data_error("z_drift too large: insert axes would collapse");
  for (std::size_t i = 0; i < spec.inserts.size(); ++i) {
    const std::string name = "insert " + std::to_string(i);
    validate_ellipse(spec.inserts[i], name.c_str());
    for (int k = 0; k < spec.n_slices; ++k)
      if (!contains(spec.body, drifted(spec.inserts[i], spec, k)))
        throw data_error(name + " leaves the body at slice " + std::to_string(k));
  }
}

std::vector<float> coverage(const EllipseSpec& e, int width, int height, double pixel_size) {
  std::vector<float> out(static_cast<std::size_t>(width) * height);
  const double x0 = -0.5 * (width - 1) * pixel_size;
  const double y0 = -0.5 * (height - 1) * pixel_size;
  for (int iy = 0; iy < height; ++iy)
    for (int ix = 0; ix < width; ++ix) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
          const double x = x0 + (ix + (sx + 0.5) / 4.0 - 0.5) * pixel_size;
          const double y = y0 + (iy + (sy + 0.5) / 4.0 - 0.5) * pixel_size;
          hits += inside(e, x, y);
        }
      out[static_cast<std::size_t>(iy) * width + ix] = static_cast<float>(hits / 16.0);
    }
  return out;
}

Image2D render_slice(const PhantomSpec& spec, int slice_index) {
  validate(spec);
  if (slice_index < 0 || slice_index >= spec.n_slices)
    throw data_error("slice index " + std::to_string(slice_index) + " out of range");
  const std::size_t n = static_cast<std::size_t>(spec.width) * spec.height;
  std::vector<double> hu(n);
  const auto body = coverage(spec.body, spec.width, spec.height, spec.pixel_size);
  for (std::size_t i = 0; i < n; ++i) hu[i] = -1000.0 + body[i] * (1000.0 + spec.body.delta_hu);
  for (const auto& ins : spec.inserts) {
    const auto cov = coverage(drifted(ins, spec, slice_index), spec.width, spec.height, spec.pixel_size);
    for (std::size_t i = 0; i < n; ++i) hu[i] += cov[i] * ins.delta_hu;
  }
  Image2D img(spec.width, spec.height, spec.pixel_size);
  for (std::size_t i = 0; i < n; ++i) img.values[i] = static_cast<float>(hu[i]);
  return img;
}

SliceStack render_volume(const PhantomSpec& spec) {
  validate(spec);
  SliceStack stack;
  stack.slice_spacing = spec.pixel_size;
  for (int k = 0; k < spec.n_slices; ++k) stack.slices.push_back(render_slice(spec, k));
  return stack;
}

PhantomSpec random_spec(std::uint64_t seed, Difficulty difficulty, int n_slices, int width, int height,
                        double pixel_size) {
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double fov = std::min(width, height) * pixel_size;
  const double scale = fov / 64.0;

  PhantomSpec spec;
  spec.seed = seed;
  spec.n_slices = n_slices;
  spec.width = width;
  spec.height = height;
  spec.pixel_size = pixel_size;
  spec.body = {0, 0, fov * uniform(0.40, 0.45), fov * uniform(0.34, 0.39), uniform(-0.15, 0.15), 0};
  spec.z_drift = uniform(0.01, 0.03);

  const bool easy = difficulty == Difficulty::easy;
  const int count = easy ? std::uniform_int_distribution<int>(2, 4)(rng)
                         : std::uniform_int_distribution<int>(4, 7)(rng);
  const double keep_out = kKeepOutFraction * fov;

  auto clear_of_center = [&](const EllipseSpec& e) {
    const double r = std::max(e.ax, e.ay);
    const double dx = std::max(0.0, std::abs(e.cx) - keep_out);
    const double dy = std::max(0.0, std::abs(e.cy) - keep_out);
    return dx * dx + dy * dy >= r * r;
  };

  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      EllipseSpec e;
      const double theta = uniform(0, 2 * std::numbers::pi);
      const double radius = uniform(0.2, 0.4) * fov;
      e.cx = radius * std::cos(theta);
      e.cy = radius * std::sin(theta);
      e.ax = scale * uniform(1.5, 4.5);
      e.ay = scale * uniform(1.5, 4.5);
      e.angle = uniform(0, std::numbers::pi);
      double mag = easy ? uniform(60, 250) : uniform(20, 400);
      const bool bone = !easy && uniform(0, 1) < 0.25;
      if (bone) mag = uniform(600, 1000);
      e.delta_hu = (bone || uniform(0, 1) < 0.5) ? mag : -mag;

      bool ok = true;
      for (int k = 0; k < n_slices && ok; ++k) {
        const auto d = drifted(e, spec, k);
        ok = clear_of_center(d) && contains(spec.body, d);
      }
      if (ok) {
        spec.inserts.push_back(e);
        break;
      }
    }
  }
  validate(spec);
  return spec;
}

std::string to_text(const PhantomSpec& spec) {
  auto ell = [](const EllipseSpec& e) {
    return format_double(e.cx) + "," + format_double(e.cy) + "," + format_double(e.ax) + "," +
           format_double(e.ay) + "," + format_double(e.angle) + "," + format_double(e.delta_hu);
  };
  std::ostringstream os;
  os << "n_slices=" << spec.n_slices << "\n";
  os << "seed=" << spec.seed << "\n";
  os << "z_drift=" << format_double(spec.z_drift) << "\n";
  os << "width=" << spec.width << "\n";
  os << "height=" << spec.height << "\n";
  os << "pixel_size=" << format_double(spec.pixel_size) << "\n";
  os << "body=" << ell(spec.body) << "\n";
  for (const auto& e : spec.inserts) os << "insert=" << ell(e) << "\n";
  return os.str();
}

PhantomSpec phantom_from_text(const std::string& text) {
  PhantomSpec spec;
  spec.inserts.clear();
  auto ell = [](const std::string& v) {
    const auto f = parse_doubles(v);
    if (f.size() != 6) throw data_error("ellipse needs 6 comma-separated values: " + v);
    return EllipseSpec{f[0], f[1], f[2], f[3], f[4], f[5]};
  };
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty()) continue;
    const auto [key, value] = split_key_value(line);
    if (key == "n_slices") spec.n_slices = parse_int(value);
    else if (key == "seed") spec.seed = parse_u64(value);
    else if (key == "z_drift") spec.z_drift = parse_double(value);
    else if (key == "width") spec.width = parse_int(value);
    else if (key == "height") spec.height = parse_int(value);
    else if (key == "pixel_size") spec.pixel_size = parse_double(value);
    else if (key == "body") spec.body = ell(value);
    else if (key == "insert") spec.inserts.push_back(ell(value));
    else throw data_error("unknown phantom key '" + key + "'");
  }
  validate(spec);
  return spec;
}

}  // namespace ctk
