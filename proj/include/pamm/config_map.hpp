#pragma once

#include "pamm/common.hpp"

#include <map>
#include <optional>

namespace pamm {

// Flat key=value configuration. Keys are kept sorted so the text form is
// canonical and can be hashed for provenance.
class ConfigMap {
 public:
  ConfigMap() = default;

  static ConfigMap parse(std::string_view text) {
    ConfigMap cfg;
    std::size_t line_no = 0;
    for (const auto& raw : split(text, '\n')) {
      ++line_no;
      const auto line = trim(raw);
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw InvalidInput("config line " + std::to_string(line_no) + ": expected key=value");
      }
      const auto key = std::string(trim(line.substr(0, eq)));
      if (key.empty()) {
        throw InvalidInput("config line " + std::to_string(line_no) + ": empty key");
      }
      cfg.values_[key] = std::string(trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  static ConfigMap load(const std::filesystem::path& path) { return parse(read_file(path)); }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : values_) {
      out += k;
      out += '=';
      out += v;
      out += '\n';
    }
    return out;
  }

  std::uint64_t hash() const { return fnv1a64(to_text()); }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void set(const std::string& key, const char* value) { values_[key] = value; }
  void set(const std::string& key, double value) { values_[key] = format_real(value); }
  void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }
  template <typename Int>
    requires std::is_integral_v<Int>
  void set(const std::string& key, Int value) {
    values_[key] = std::to_string(value);
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw InvalidInput("missing config key '" + key + "'");
    return it->second;
  }

  double get_real(const std::string& key) const {
    try {
      return parse_real(get(key));
    } catch (const InvalidInput& e) {
      throw InvalidInput("config key '" + key + "': " + e.what());
    }
  }

  template <typename Int>
  Int get_int(const std::string& key) const {
    try {
      return parse_int<Int>(get(key));
    } catch (const InvalidInput& e) {
      throw InvalidInput("config key '" + key + "': " + e.what());
    }
  }

  bool get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw InvalidInput("config key '" + key + "': expected true/false, got '" + v + "'");
  }

  // Overlay `other` on top of this map.
  void merge(const ConfigMap& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  ConfigMap with_prefix(std::string_view prefix) const {
    ConfigMap out;
    for (const auto& [k, v] : values_) {
      if (k.starts_with(prefix)) out.values_[k] = v;
    }
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

  bool operator==(const ConfigMap&) const = default;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace pamm
