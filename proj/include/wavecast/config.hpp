#pragma once

// Line-oriented `key = value` configuration. '#' starts a comment. Keys may
// repeat only when registered as lists. Every key must be known.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "wavecast/errors.hpp"

namespace wavecast {

class ConfigFile {
 public:
  ConfigFile() = default;

  /// `known` lists accepted keys; `repeatable` lists keys allowed more than once.
  static ConfigFile parse(const std::string& text, const std::string& origin,
                          const std::set<std::string>& known,
                          const std::set<std::string>& repeatable = {}) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = origin + ":" + std::to_string(lineno);
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(where + ": empty key");
      if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
      auto& slot = cfg.values_[key];
      if (!slot.empty() && !repeatable.count(key)) {
        throw ConfigError(where + ": duplicate key '" + key + "'");
      }
      slot.push_back(value);
    }
    return cfg;
  }

  static ConfigFile load(const std::string& path, const std::set<std::string>& known,
                         const std::set<std::string>& repeatable = {}) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path, known, repeatable);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) { values_[key] = {value}; }

  std::string str(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second.back();
  }

  std::string required(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end() || it->second.back().empty()) {
      throw ConfigError("missing required key '" + key + "'");
    }
    return it->second.back();
  }

  std::vector<std::string> all(const std::string& key) const {
    auto it = values_.find(key);
    return it == values_.end() ? std::vector<std::string>{} : it->second;
  }

  double real(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    return to_real(key, str(key, ""));
  }

  std::size_t count(const std::string& key, std::size_t fallback) const {
    if (!has(key)) return fallback;
    return to_count(key, str(key, ""));
  }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const std::string v = str(key, "");
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      const auto r = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return r;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
  }

  bool flag(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = str(key, "");
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
  }

  /// Whitespace-separated reals.
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    std::istringstream in(str(key, ""));
    std::string tok;
    while (in >> tok) out.push_back(to_real(key, tok));
    return out;
  }

  static double to_real(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double r = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return r;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
  }

  static std::size_t to_count(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      const auto r = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return static_cast<std::size_t>(r);
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::vector<std::string>> values_;
};

}  // namespace wavecast
