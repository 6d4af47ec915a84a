#pragma once

// Flat "key=value" line parsing, shared by checkpoint config text and the
// run-configuration files. One pair per line; blank lines and '#' comments
// are skipped. The caller picks the error kind so malformed checkpoint text
// reports as a format problem while a bad config file reports as config.

#include <cstdint>
#include <map>
#include <string>

#include "ac/errors.hpp"

namespace ac {

inline std::string kv_trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
  return s.substr(a, b - a);
}

inline std::map<std::string, std::string> parse_kv_lines(const std::string& text,
                                                         ErrorKind kind = ErrorKind::Format) {
  std::map<std::string, std::string> kv;
  size_t pos = 0;
  int lineno = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = kv_trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      fail(kind, "line " + std::to_string(lineno) + ": expected key=value, got \"" + line + "\"");
    const std::string key = kv_trim(line.substr(0, eq));
    if (kv.count(key)) fail(kind, "duplicate key \"" + key + "\"");
    kv[key] = kv_trim(line.substr(eq + 1));
  }
  return kv;
}

inline const std::string& require_kv(const std::map<std::string, std::string>& kv,
                                     const std::string& key, ErrorKind kind = ErrorKind::Format) {
  auto it = kv.find(key);
  if (it == kv.end()) fail(kind, "missing key \"" + key + "\"");
  return it->second;
}

inline int64_t kv_int(const std::map<std::string, std::string>& kv, const std::string& key,
                      ErrorKind kind = ErrorKind::Format) {
  const std::string& s = require_kv(kv, key, kind);
  try {
    size_t used = 0;
    const int64_t v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(kind, "key \"" + key + "\": \"" + s + "\" is not an integer");
  }
}

inline double kv_double(const std::map<std::string, std::string>& kv, const std::string& key,
                        ErrorKind kind = ErrorKind::Format) {
  const std::string& s = require_kv(kv, key, kind);
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(kind, "key \"" + key + "\": \"" + s + "\" is not a number");
  }
}

inline bool kv_bool(const std::map<std::string, std::string>& kv, const std::string& key,
                    ErrorKind kind = ErrorKind::Format) {
  const std::string& s = require_kv(kv, key, kind);
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  fail(kind, "key \"" + key + "\": \"" + s + "\" is not a boolean (use 0/1/true/false)");
}

}  // namespace ac
