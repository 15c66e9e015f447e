#pragma once

// Small helpers for the key=value text formats (config, manifest, phantom
// blocks, weight index).

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ctk {

/// Shortest representation that round-trips exactly.
std::string format_double(double v);

std::string trim(std::string_view s);
std::pair<std::string, std::string> split_key_value(std::string_view line);
std::vector<std::string> split(std::string_view s, char sep);

double parse_double(std::string_view s);
int parse_int(std::string_view s);
std::uint64_t parse_u64(std::string_view s);
bool parse_bool(std::string_view s);
std::vector<double> parse_doubles(std::string_view s);

}  // namespace ctk
