#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace msborrow {

// 17 significant digits round-trip any double exactly; used everywhere
// numbers are serialized so determinism is byte-testable.
inline std::string format_g17(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  if (ec != std::errc()) throw std::runtime_error("format_g17: conversion failed");
  return std::string(buf, p);
}

inline double log_sum_exp(const std::vector<double>& logs) {
  if (logs.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  const double m = *std::max_element(logs.begin(), logs.end());
  if (!std::isfinite(m)) return m;  // all -inf stays -inf
  double s = 0.0;
  for (double v : logs) s += std::exp(v - m);
  return m + std::log(s);
}

inline double log_mean_exp(const std::vector<double>& logs) {
  return log_sum_exp(logs) - std::log(static_cast<double>(logs.size()));
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean: empty input");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1 denominator).
inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) throw std::invalid_argument("sample_sd: need at least 2 values");
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// Equal-tailed empirical quantile with linear interpolation between order
// statistics (R type 7).
inline double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("quantile: empty input");
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("quantile: p outside [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 < v.size()) return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
  return v[lo];
}

}  // namespace msborrow
