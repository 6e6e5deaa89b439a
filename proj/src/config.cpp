#include "fp/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace fp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

}  // namespace

std::string RunConfig::get_str(const std::string& key,
                               const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::int64_t RunConfig::get_int(const std::string& key,
                                std::int64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stoll(it->second);
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not an integer: " + it->second);
  }
}

double RunConfig::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not a number: " + it->second);
  }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: " + v);
}

std::vector<double> RunConfig::get_doubles(
    const std::string& key, const std::vector<double>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<double> out;
  for (const auto& item : split_list(it->second)) {
    try {
      out.push_back(std::stod(item));
    } catch (...) {
      throw ConfigError("config key '" + key + "' holds a bad number: " + item);
    }
  }
  return out;
}

std::vector<int> RunConfig::get_ints(const std::string& key,
                                     const std::vector<int>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<int> out;
  for (const auto& item : split_list(it->second)) {
    try {
      out.push_back(std::stoi(item));
    } catch (...) {
      throw ConfigError("config key '" + key + "' holds a bad integer: " + item);
    }
  }
  return out;
}

std::vector<std::string> RunConfig::get_strs(
    const std::string& key, const std::vector<std::string>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  return split_list(it->second);
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    values_[key] = value;
  }
}

void RunConfig::apply_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like key=value: " + kv);
  values_[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
}

void RunConfig::apply_environment() {
  if (const char* s = std::getenv("FP_SEED")) values_["seed"] = s;
  if (const char* s = std::getenv("FP_WORKERS")) values_["workers"] = s;
  if (const char* s = std::getenv("FP_OUT_ROOT")) values_["out_root"] = s;
}

std::string RunConfig::serialise() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  }
  return out;
}

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.set("preset", name);
  if (name == "ref") {
    // Reference-scale defaults; every key matches the module defaults, so
    // this preset only pins the name.
    return c;
  }
  if (name == "desk") {
    c.set("data.n_samples", "100");
    c.set("data.points", "2000");
    c.set("data.edit_pairs", "10");
    c.set("tok.centres", "80");
    c.set("tok.neighbours", "28");
    c.set("tok.token_dim", "16");
    c.set("tok.enc_hidden", "64,128");
    c.set("tok.dec_hidden", "128,64");
    c.set("tok.epochs", "20");
    c.set("gen.hidden", "64");
    c.set("gen.blocks", "3");
    c.set("gen.heads", "4");
    c.set("gen.pos_embed_dim", "8");
    c.set("gen.time_embed_dim", "32");
    c.set("gen.mae_enc_blocks", "2");
    c.set("gen.mae_dec_blocks", "2");
    c.set("fm.epochs", "120");
    c.set("fm.batch", "8");
    c.set("fm.ema_warmup", "100");
    c.set("mae.epochs", "150");
    c.set("mae.batch", "16");
    c.set("inpaint.max_samples", "20");
    return c;
  }
  if (name == "tiny") {
    c.set("data.n_samples", "24");
    c.set("data.points", "700");
    c.set("data.edit_pairs", "2");
    c.set("tok.centres", "24");
    c.set("tok.neighbours", "14");
    c.set("tok.token_dim", "8");
    c.set("tok.enc_hidden", "16,32");
    c.set("tok.dec_hidden", "32,16");
    c.set("tok.epochs", "8");
    c.set("gen.hidden", "32");
    c.set("gen.blocks", "2");
    c.set("gen.heads", "2");
    c.set("gen.pos_embed_dim", "4");
    c.set("gen.time_embed_dim", "16");
    c.set("gen.mae_enc_blocks", "1");
    c.set("gen.mae_dec_blocks", "1");
    c.set("fm.epochs", "20");
    c.set("fm.batch", "8");
    c.set("fm.ema_warmup", "20");
    c.set("mae.epochs", "20");
    c.set("mae.batch", "8");
    c.set("inpaint.fractions", "0.5");
    c.set("inpaint.max_samples", "4");
    return c;
  }
  throw ConfigError("unknown preset: " + name);
}

}  // namespace fp
