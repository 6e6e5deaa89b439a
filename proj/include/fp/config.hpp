#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fp/errors.hpp"

namespace fp {

// Flat key=value configuration. Sources merge in priority order:
// preset < config file < environment < command-line overrides.
class RunConfig {
 public:
  void set(const std::string& key, const std::string& value) {
    values_[key] = value;
  }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key,
                                  const std::vector<double>& fallback) const;
  std::vector<int> get_ints(const std::string& key,
                            const std::vector<int>& fallback) const;
  std::vector<std::string> get_strs(const std::string& key,
                                    const std::vector<std::string>& fallback) const;

  // Lines of "key = value", comments with '#'.
  void load_file(const std::string& path);
  void apply_override(const std::string& key_equals_value);
  void apply_environment();

  // Deterministic serialisation (sorted keys) for the run record.
  std::string serialise() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Built-in presets: "ref" (paper-scale defaults), "desk" (acceptance-suite
// dimensions), "tiny" (unit-test scale).
RunConfig preset_config(const std::string& name);

}  // namespace fp
