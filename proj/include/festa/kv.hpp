#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "festa/errors.hpp"

namespace festa {

/// One `key=value` line of a config or manifest file.
struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Blank lines and lines starting with '#' are skipped.
inline std::vector<KeyValue> parse_key_values(std::istream& in) {
  std::vector<KeyValue> out;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string_view s = trim(raw);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw FormatError(line, "expected key=value, got '" + std::string(s) + "'");
    const auto key = trim(s.substr(0, eq));
    if (key.empty()) throw FormatError(line, "empty key");
    out.push_back({std::string(key), std::string(trim(s.substr(eq + 1))), line});
  }
  return out;
}

inline std::vector<KeyValue> read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_key_values(in);
}

inline double parse_real(const KeyValue& kv) {
  double v = 0.0;
  const char* b = kv.value.data();
  const char* e = b + kv.value.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) throw FormatError(kv.line, kv.key + ": not a number: '" + kv.value + "'");
  return v;
}

inline std::uint64_t parse_unsigned(const KeyValue& kv) {
  std::uint64_t v = 0;
  const char* b = kv.value.data();
  const char* e = b + kv.value.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) {
    throw FormatError(kv.line, kv.key + ": not a non-negative integer: '" + kv.value + "'");
  }
  return v;
}

inline bool parse_bool(const KeyValue& kv) {
  if (kv.value == "true" || kv.value == "1") return true;
  if (kv.value == "false" || kv.value == "0") return false;
  throw FormatError(kv.line, kv.key + ": expected true or false, got '" + kv.value + "'");
}

template <typename T>
std::vector<T> parse_list(const KeyValue& kv) {
  std::vector<T> out;
  std::stringstream ss(kv.value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    KeyValue one{kv.key, std::string(trim(item)), kv.line};
    if constexpr (std::is_floating_point_v<T>) {
      out.push_back(static_cast<T>(parse_real(one)));
    } else {
      out.push_back(static_cast<T>(parse_unsigned(one)));
    }
  }
  if (out.empty()) throw FormatError(kv.line, kv.key + ": empty list");
  return out;
}

// Shortest text that parses back to the same double.
inline std::string format_real(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename T>
std::string join_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_floating_point_v<T>) s += format_real(static_cast<double>(v[i]));
    else s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace festa
