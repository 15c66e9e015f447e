#include "ctk/text.hpp"

#include <charconv>
#include <cmath>

#include "ctk/error.hpp"

namespace ctk {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw data_error("cannot format number");
  return std::string(buf, end);
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::pair<std::string, std::string> split_key_value(std::string_view line) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) throw data_error("expected key=value, got '" + std::string(line) + "'");
  return {trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

namespace {
template <class T>
T parse_number(std::string_view s, const char* what) {
  const std::string t = trim(s);
  T v{};
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw data_error(std::string("invalid ") + what + " '" + t + "'");
  return v;
}
}  // namespace

double parse_double(std::string_view s) {
  const double v = parse_number<double>(s, "number");
  if (!std::isfinite(v)) throw data_error("non-finite number '" + std::string(s) + "'");
  return v;
}
int parse_int(std::string_view s) { return parse_number<int>(s, "integer"); }
std::uint64_t parse_u64(std::string_view s) { return parse_number<std::uint64_t>(s, "unsigned integer"); }

bool parse_bool(std::string_view s) {
  const std::string t = trim(s);
  if (t == "1" || t == "true" || t == "on" || t == "yes") return true;
  if (t == "0" || t == "false" || t == "off" || t == "no") return false;
  throw data_error("invalid boolean '" + t + "'");
}

std::vector<double> parse_doubles(std::string_view s) {
  std::vector<double> out;
  for (const auto& part : split(s, ',')) out.push_back(parse_double(part));
  return out;
}

}  // namespace ctk
