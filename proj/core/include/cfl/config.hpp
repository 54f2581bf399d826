#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace cfl {

/// Flat key = value file. Keys before any section header (or under [run])
/// are scalar settings; keys under [sweep] hold comma-separated grids.
/// '#' and ';' start comments.
///
///   method = closed_form_proximal_simple
///   epochs = 20
///   [sweep]
///   lr = 0.01, 0.1
///   lambda = 0.1, 1, 10
struct ConfigFile {
  std::map<std::string, std::string> settings;
  std::map<std::string, std::vector<std::string>> sweep;
};

ConfigFile parse_config(std::istream& is);
ConfigFile load_config(const std::filesystem::path& path);

/// Splits on commas and trims whitespace; empty items are dropped.
std::vector<std::string> split_list(std::string_view text);
std::string trim(std::string_view s);

double parse_double(std::string_view key, std::string_view value);
std::size_t parse_size(std::string_view key, std::string_view value);
std::uint64_t parse_u64(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);

}  // namespace cfl
