#pragma once

// Flat `key = value` configuration files and the resolved run settings built from them.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mgslab/error.hpp"

namespace mgslab {

using Settings = std::map<std::string, std::string>;

namespace detail {
inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}
}  // namespace detail

/// Keys are normalised so that `label_noise` and `label-noise` are the same setting.
inline std::string normalise_key(std::string k) {
  for (char& c : k) {
    if (c == '_') c = '-';
  }
  return k;
}

inline Settings parse_config_text(const std::string& text, const std::string& origin = "config") {
  Settings out;
  std::istringstream in(text);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(no) + ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(no) + ": empty key");
    out[normalise_key(key)] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline Settings load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

inline std::string format_config(const Settings& s) {
  std::string out;
  for (const auto& [k, v] : s) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Typed access

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("setting '" + key + "': '" + v + "' is not a number");
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) {
    throw ConfigError("setting '" + key + "': '" + v + "' is not a non-negative integer");
  }
  return out;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = detail::trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split(v, ',')) out.push_back(to_double(key, s));
  if (out.empty()) throw ConfigError("setting '" + key + "' needs at least one value");
  return out;
}

/// Layered settings: built-in defaults, then a config file, then command-line flags.
class ResolvedSettings {
 public:
  ResolvedSettings(Settings defaults, Settings file, Settings flags)
      : defaults_(std::move(defaults)), file_(std::move(file)), flags_(std::move(flags)) {
    for (const auto& [k, v] : file_) {
      if (!defaults_.contains(k)) throw ConfigError("unknown setting '" + k + "' in config file");
    }
    merged_ = defaults_;
    for (const auto& [k, v] : file_) merged_[k] = v;
    for (const auto& [k, v] : flags_) merged_[k] = v;
  }

  const Settings& merged() const { return merged_; }
  const Settings& file() const { return file_; }
  const Settings& flags() const { return flags_; }

  bool from_user(const std::string& k) const { return file_.contains(k) || flags_.contains(k); }
  void set(const std::string& k, std::string v) { merged_[k] = std::move(v); }

  const std::string& str(const std::string& k) const {
    auto it = merged_.find(k);
    if (it == merged_.end()) throw ConfigError("missing setting '" + k + "'");
    return it->second;
  }
  double num(const std::string& k) const { return to_double(k, str(k)); }
  std::uint64_t u64(const std::string& k) const { return to_u64(k, str(k)); }
  std::size_t count(const std::string& k) const { return static_cast<std::size_t>(u64(k)); }

 private:
  Settings defaults_, file_, flags_, merged_;
};

/// Looks up a tuned alpha: `<dataset>.<kind>` first, then `<kind>`.
inline std::optional<double> tuned_alpha(const Settings& defaults, const std::string& dataset,
                                         const std::string& kind) {
  for (const auto& key : {dataset + "." + kind, kind}) {
    if (auto it = defaults.find(key); it != defaults.end()) return to_double(key, it->second);
  }
  return std::nullopt;
}

}  // namespace mgslab
