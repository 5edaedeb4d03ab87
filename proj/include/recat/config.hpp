#pragma once

// key = value configuration files.  Blank lines and lines starting with '#'
// are ignored.  Every key must be consumed by some reader.

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "recat/error.hpp"

namespace recat {

class ConfigMap {
 public:
  ConfigMap() = default;
  explicit ConfigMap(std::map<std::string, std::string> values) : values_(std::move(values)) {}

  static ConfigMap parse(std::istream& in, const std::string& origin = "config") {
    ConfigMap cm;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string{};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      }
      const auto key = trim(line.substr(0, eq));
      const auto value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (!cm.values_.emplace(key, value).second) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
    }
    return cm;
  }

  static ConfigMap parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static ConfigMap load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  /// Stores a value in a form read() parses back exactly.
  template <class V>
  void put(const std::string& key, const V& v) {
    std::ostringstream os;
    os.precision(17);
    os << std::boolalpha << v;
    values_[key] = os.str();
  }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  template <class V>
  void read(const std::string& key, V& out) const {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    consumed_.insert(key);
    const std::string& s = it->second;
    if constexpr (std::is_same_v<V, bool>) {
      if (s == "true" || s == "1") {
        out = true;
      } else if (s == "false" || s == "0") {
        out = false;
      } else {
        throw ConfigError("key '" + key + "': expected true/false, got '" + s + "'");
      }
    } else if constexpr (std::is_same_v<V, std::string>) {
      out = s;
    } else if constexpr (std::is_floating_point_v<V>) {
      try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        out = static_cast<V>(v);
      } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + s + "'");
      }
    } else {
      V v{};
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || p != s.data() + s.size()) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + s + "'");
      }
      out = v;
    }
  }

  /// Throws on any key no reader asked for.
  void check_consumed() const {
    for (const auto& [k, v] : values_) {
      if (!consumed_.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }
  }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

}  // namespace recat
