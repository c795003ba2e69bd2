#include "marf/config.hpp"

#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "marf/error.hpp"

namespace marf {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("config key '" + key + "': expected " + what + ", got '" + value + "'");
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::string& origin) {
  KeyValueConfig out;
  std::string section;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(line_no) + ": unterminated section");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    out.values_[section.empty() ? key : section + "." + key] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string KeyValueConfig::to_text() const {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> grouped;
  for (const auto& [key, value] : values_) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      grouped[""].emplace_back(key, value);
    } else {
      grouped[key.substr(0, dot)].emplace_back(key.substr(dot + 1), value);
    }
  }
  std::string out;
  for (const auto& [section, entries] : grouped) {
    if (!section.empty()) {
      if (!out.empty()) out += '\n';
      out += "[" + section + "]\n";
    }
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
  }
  return out;
}

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  return get_optional_double(key).value_or(fallback);
}

std::optional<double> KeyValueConfig::get_optional_double(const std::string& key) const {
  const auto v = get(key);
  if (!v) return std::nullopt;
  try {
    std::size_t used = 0;
    const double d = std::stod(*v, &used);
    if (used != v->size()) bad_value(key, *v, "a number");
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, *v, "a number");
  }
}

std::int64_t KeyValueConfig::get_int(const std::string& key, std::int64_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) bad_value(key, *v, "an integer");
  return out;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  return get_optional_u64(key).value_or(fallback);
}

std::optional<std::uint64_t> KeyValueConfig::get_optional_u64(const std::string& key) const {
  const auto v = get(key);
  if (!v) return std::nullopt;
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) bad_value(key, *v, "a non-negative integer");
  return out;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  bad_value(key, *v, "a boolean");
}

void KeyValueConfig::require_known(const std::string& section, const std::vector<std::string>& allowed) const {
  for (const auto& [key, value] : this->section(section)) {
    bool ok = false;
    for (const auto& a : allowed) ok = ok || a == key;
    if (!ok) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }
}

std::map<std::string, std::string> KeyValueConfig::section(const std::string& section) const {
  std::map<std::string, std::string> out;
  const std::string prefix = section + ".";
  for (auto it = values_.lower_bound(prefix); it != values_.end() && it->first.rfind(prefix, 0) == 0; ++it) {
    out[it->first.substr(prefix.size())] = it->second;
  }
  return out;
}

void KeyValueConfig::merge(const KeyValueConfig& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

std::array<double, 3> parse_triplet(const std::string& text) {
  std::array<double, 3> out{};
  std::stringstream ss(text);
  std::string part;
  int i = 0;
  while (std::getline(ss, part, ',')) {
    if (i >= 3) throw ArgumentError("expected three comma-separated values, got '" + text + "'");
    try {
      std::size_t used = 0;
      const std::string p(trim(part));
      out[i++] = std::stod(p, &used);
      if (used != p.size()) throw std::invalid_argument(p);
    } catch (const std::logic_error&) {
      throw ArgumentError("expected three comma-separated values, got '" + text + "'");
    }
  }
  if (i != 3) throw ArgumentError("expected three comma-separated values, got '" + text + "'");
  return out;
}

std::string format_triplet(const std::array<double, 3>& v) {
  return format_double(v[0]) + "," + format_double(v[1]) + "," + format_double(v[2]);
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::uint64_t h = 14695981039346656037ull;
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    h = fnv1a({buf.data(), static_cast<std::size_t>(in.gcount())}, h);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace marf
