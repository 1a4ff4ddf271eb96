#pragma once

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "isamp/data.hpp"
#include "isamp/errors.hpp"

namespace isamp {

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

inline bool parse_double(const std::string& s, double* out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  char* end = nullptr;
  *out = std::strtod(t.c_str(), &end);
  return end && *end == '\0';
}

}  // namespace detail

/// Reads the dataset CSV (header required): columns x1..xp (or a single
/// `x`), y, w, delta, stratum. Empty cells mark unavailable fields. The
/// delta and stratum columns are optional; without delta every row is
/// treated as sampled.
inline std::vector<UnitRecord> read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("empty dataset file: " + path);

  const std::vector<std::string> header = detail::split_csv_line(line);
  std::vector<int> xcols;
  int ycol = -1, wcol = -1, dcol = -1, gcol = -1;
  for (int j = 0; j < static_cast<int>(header.size()); ++j) {
    const std::string name = detail::trim(header[j]);
    if (name == "y") ycol = j;
    else if (name == "w") wcol = j;
    else if (name == "delta") dcol = j;
    else if (name == "stratum") gcol = j;
    else if (name == "x" || (name.size() > 1 && name[0] == 'x')) xcols.push_back(j);
    else throw Error("unrecognized CSV column '" + name + "' in " + path);
  }
  if (ycol < 0 || wcol < 0)
    throw Error("dataset CSV must have y and w columns: " + path);

  std::vector<UnitRecord> records;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const std::vector<std::string> f = detail::split_csv_line(line);
    if (f.size() < header.size())
      throw Error("line " + std::to_string(lineno) + ": expected " +
                  std::to_string(header.size()) + " fields");
    UnitRecord r;
    Eigen::VectorXd x(xcols.size());
    bool any_x = false, all_x = true;
    for (size_t k = 0; k < xcols.size(); ++k) {
      double val;
      if (detail::parse_double(f[xcols[k]], &val)) {
        x[k] = val;
        any_x = true;
      } else {
        all_x = false;
      }
    }
    if (any_x && !all_x)
      throw Error("line " + std::to_string(lineno) + ": partially missing x");
    if (any_x || xcols.empty()) {
      r.x = x;
      r.has_x = true;
    }
    double val;
    if (detail::parse_double(f[ycol], &val)) r.y = val;
    if (detail::parse_double(f[wcol], &val)) r.w = val;
    if (dcol >= 0) {
      if (!detail::parse_double(f[dcol], &val))
        throw Error("line " + std::to_string(lineno) + ": missing delta");
      r.delta = val != 0.0;
    } else {
      r.delta = true;
    }
    if (gcol >= 0 && detail::parse_double(f[gcol], &val))
      r.stratum = static_cast<int>(val);
    records.push_back(std::move(r));
  }
  return records;
}

/// Reads a population covariate file (columns x1..xp only) and returns
/// non-sampled records carrying x alone.
inline std::vector<UnitRecord> read_population_x_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open population-x file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("empty population-x file: " + path);
  const std::vector<std::string> header = detail::split_csv_line(line);
  for (const std::string& raw : header) {
    const std::string name = detail::trim(raw);
    if (!(name == "x" || (name.size() > 1 && name[0] == 'x')))
      throw Error("population-x file may only contain x columns: " + path);
  }
  std::vector<UnitRecord> records;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const std::vector<std::string> f = detail::split_csv_line(line);
    UnitRecord r;
    Eigen::VectorXd x(header.size());
    for (size_t k = 0; k < header.size(); ++k) {
      double val;
      if (!detail::parse_double(f[k], &val))
        throw Error("line " + std::to_string(lineno) + ": missing x value");
      x[k] = val;
    }
    r.x = x;
    r.has_x = true;
    r.delta = false;
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace isamp
