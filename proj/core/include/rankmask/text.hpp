#pragma once

// Exact text encodings shared by the dataset, checkpoint and config formats.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace rankmask::text {

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

/// Throws ConfigError(field, ...) on malformed input.
double parse_double(std::string_view s, std::string_view field);
std::uint64_t parse_u64(std::string_view s, std::string_view field);
bool parse_bool(std::string_view s, std::string_view field);

std::vector<std::string_view> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);

}  // namespace rankmask::text
