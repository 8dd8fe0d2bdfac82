// SPDX-License-Identifier: Apache-2.0
//
// Small string and key-value helpers shared by config parsing, manifests
// and checkpoint headers. Parsers are strict: malformed numbers raise
// DataError instead of truncating silently.

#pragma once

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "egotr/tensor.hpp"

namespace egotr {

inline std::string trim(const std::string& s) {
  const char* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(delim, start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::uint64_t parse_u64(const std::string& s) {
  const std::string t = trim(s);
  if (t.empty()) throw DataError("empty integer");
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(t.c_str(), &end, 10);
  if (errno != 0 || end != t.c_str() + t.size() || t[0] == '-')
    throw DataError("bad unsigned integer '" + s + "'");
  return v;
}

inline std::int64_t parse_i64(const std::string& s) {
  const std::string t = trim(s);
  if (t.empty()) throw DataError("empty integer");
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(t.c_str(), &end, 10);
  if (errno != 0 || end != t.c_str() + t.size())
    throw DataError("bad integer '" + s + "'");
  return v;
}

inline double parse_f64(const std::string& s) {
  const std::string t = trim(s);
  if (t.empty()) throw DataError("empty number");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(t.c_str(), &end);
  if (errno != 0 || end != t.c_str() + t.size())
    throw DataError("bad number '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  const std::string t = trim(s);
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw DataError("bad boolean '" + s + "'");
}

// Shortest decimal that round-trips the value; identical input bits always
// produce identical text, which the determinism checks rely on.
inline std::string fmt_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = 0;
  for (int prec = 1; prec < 17; ++prec) {
    char probe[64];
    std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
    std::sscanf(probe, "%lf", &back);
    if (back == v) return probe;
  }
  return buf;
}

using KvMap = std::map<std::string, std::string>;
using KvList = std::vector<std::pair<std::string, std::string>>;

inline const std::string& kv_need(const KvMap& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw DataError("missing key '" + key + "'");
  return it->second;
}

}  // namespace egotr
