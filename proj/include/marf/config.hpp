#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace marf {

// Flat key=value configuration with optional [section] headers. Keys are
// stored as "section.key"; '#' starts a comment line. Example:
//
//   [train]
//   learning_rate = 0.01
//   max_seconds = 300
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, const std::string& origin = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  /// Sections in sorted order, keys sorted within each section.
  std::string to_text() const;

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void erase(const std::string& key) { values_.erase(key); }

  // Typed lookups; a present but malformed value throws ConfigError.
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::optional<double> get_optional_double(const std::string& key) const;
  std::optional<std::uint64_t> get_optional_u64(const std::string& key) const;

  /// Throws ConfigError for any key in `section` that is not in `allowed`.
  void require_known(const std::string& section, const std::vector<std::string>& allowed) const;

  /// Entries under `section`, with the "section." prefix removed.
  std::map<std::string, std::string> section(const std::string& section) const;
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Overlays every entry of `other` onto this config.
  void merge(const KeyValueConfig& other);

 private:
  std::map<std::string, std::string> values_;
};

/// Parses "r,g,b" into three doubles.
std::array<double, 3> parse_triplet(const std::string& text);
std::string format_triplet(const std::array<double, 3>& v);

/// Shortest round-tripping decimal text for a double.
std::string format_double(double v);

/// 64-bit FNV-1a over bytes.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 14695981039346656037ull);
std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

}  // namespace marf
