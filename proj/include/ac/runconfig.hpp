#pragma once

// Run configuration for the CLI: flat key=value text loaded from a file and
// overridden by command-line flags. Every getter records the value it
// resolved to (default or explicit), so after a command has read its keys the
// config can reject leftovers as unknown and write the exact settings the run
// used next to its outputs.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "ac/errors.hpp"
#include "ac/kv.hpp"

namespace ac {

class RunConfig {
 public:
  void load_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::Config, "cannot read config file " + path);
    std::ostringstream os;
    os << f.rdbuf();
    for (const auto& [key, value] : parse_kv_lines(os.str(), ErrorKind::Config)) raw_[key] = value;
  }

  // Command-line overrides land here after the file so flags win.
  void set(const std::string& key, const std::string& value) { raw_[key] = value; }

  std::string get_str(const std::string& key, const std::string& def) const {
    auto it = raw_.find(key);
    const std::string value = it == raw_.end() ? def : it->second;
    note(key, value);
    return value;
  }

  std::string require_str(const std::string& key) const {
    auto it = raw_.find(key);
    if (it == raw_.end()) fail(ErrorKind::Config, "missing required key \"" + key + "\"");
    note(key, it->second);
    return it->second;
  }

  int64_t get_int(const std::string& key, int64_t def) const {
    auto it = raw_.find(key);
    if (it == raw_.end()) {
      note(key, std::to_string(def));
      return def;
    }
    note(key, it->second);
    return parse_int(key, it->second);
  }

  int64_t require_int(const std::string& key) const {
    const std::string value = require_str(key);
    return parse_int(key, value);
  }

  double get_double(const std::string& key, double def) const {
    auto it = raw_.find(key);
    if (it == raw_.end()) {
      std::ostringstream os;
      os << def;
      note(key, os.str());
      return def;
    }
    note(key, it->second);
    try {
      size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(it->second);
      return v;
    } catch (const std::exception&) {
      fail(ErrorKind::Config, "key \"" + key + "\": \"" + it->second + "\" is not a number");
    }
  }

  bool get_bool(const std::string& key, bool def) const {
    auto it = raw_.find(key);
    if (it == raw_.end()) {
      note(key, def ? "1" : "0");
      return def;
    }
    note(key, it->second);
    if (it->second == "1" || it->second == "true") return true;
    if (it->second == "0" || it->second == "false") return false;
    fail(ErrorKind::Config, "key \"" + key + "\": \"" + it->second +
                                "\" is not a boolean (use 0/1/true/false)");
  }

  // Call after every key the command understands has been read.
  void finish() const {
    for (const auto& [key, value] : raw_)
      if (!consumed_.count(key)) fail(ErrorKind::Config, "unknown key \"" + key + "\"");
  }

  std::string resolved_text() const {
    std::ostringstream os;
    for (const auto& [key, value] : resolved_) os << key << "=" << value << "\n";
    return os.str();
  }

  void write_resolved(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::Storage, "cannot open " + path + " for writing");
    f << resolved_text();
    f.flush();
    if (!f) fail(ErrorKind::Storage, "write failed for " + path);
  }

 private:
  static int64_t parse_int(const std::string& key, const std::string& value) {
    try {
      size_t used = 0;
      const int64_t v = std::stoll(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      fail(ErrorKind::Config, "key \"" + key + "\": \"" + value + "\" is not an integer");
    }
  }

  void note(const std::string& key, const std::string& value) const {
    consumed_.insert(key);
    resolved_[key] = value;
  }

  std::map<std::string, std::string> raw_;
  // Mutable so the typed getters stay const for callers; a std::map keeps the
  // resolved snapshot sorted and therefore byte-stable across runs.
  mutable std::map<std::string, std::string> resolved_;
  mutable std::set<std::string> consumed_;
};

}  // namespace ac
