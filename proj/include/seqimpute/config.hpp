#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace seqimpute::config {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Ordered list of key=value pairs. Later entries override earlier ones.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

// One `key=value` per line; blank lines and lines starting with '#' are
// skipped; whitespace around keys and values is trimmed.
KeyValues parse(const std::string& text);
KeyValues read_file(const std::filesystem::path& path);
// Parses a single "key=value" token (CLI override).
std::pair<std::string, std::string> parse_override(const std::string& token);
std::string to_text(const KeyValues& kv);

// Strict scalar conversions; the key is only used in error messages.
std::size_t to_size(const std::string& key, const std::string& value);
std::uint64_t to_u64(const std::string& key, const std::string& value);
double to_double(const std::string& key, const std::string& value);
bool to_bool(const std::string& key, const std::string& value);

// Shortest decimal string that reads back as exactly `v`.
std::string format_double(double v);

}  // namespace seqimpute::config
