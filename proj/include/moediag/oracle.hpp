#pragma once

// Definition-level reference computations for entropy and Gini. These are
// deliberately independent of metrics.hpp and serve as test oracles.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "error.hpp"

namespace moediag::oracle {

struct EntropyGini {
  double entropy = 0.0;  // bits
  double gini = 0.0;
};

// H = log2(S) - (1/S) * sum c log2 c.
inline double entropy(std::span<const std::uint64_t> counts) {
  long double s = 0, acc = 0;
  for (auto c : counts) s += static_cast<long double>(c);
  if (s == 0) throw MetricError("degenerate input");
  for (auto c : counts)
    if (c > 0) acc += static_cast<long double>(c) * std::log2(static_cast<long double>(c));
  const long double h = std::log2(s) - acc / s;
  return h < 0 ? 0.0 : static_cast<double>(h);
}

// Mean absolute difference: G = sum_i sum_j |c_i - c_j| / (2 N^2 mean).
// The numerator is an exact integer.
inline double gini(std::span<const std::uint64_t> counts) {
  const std::size_t n = counts.size();
  unsigned __int128 diff = 0, total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += counts[i];
    for (std::size_t j = 0; j < n; ++j)
      diff += counts[i] > counts[j] ? counts[i] - counts[j] : counts[j] - counts[i];
  }
  if (total == 0) throw MetricError("degenerate input");
  // 2 N^2 mean = 2 N total
  return static_cast<double>(static_cast<long double>(diff) /
                             (2.0L * static_cast<long double>(n) * static_cast<long double>(total)));
}

inline EntropyGini metrics(std::span<const std::uint64_t> counts) { return {entropy(counts), gini(counts)}; }

// Same quantities for a real-valued profile (e.g. a routing law's expected
// probabilities).
inline EntropyGini metrics(std::span<const double> profile) {
  long double s = 0;
  for (double p : profile) {
    if (!(p >= 0.0)) throw MetricError("degenerate input");
    s += p;
  }
  if (s == 0) throw MetricError("degenerate input");
  long double h = 0, diff = 0;
  for (double p : profile) {
    const long double q = p / s;
    if (q > 0) h -= q * std::log2(q);
    for (double r : profile) diff += std::fabs(static_cast<long double>(p) - r);
  }
  const long double g = diff / (2.0L * profile.size() * s);
  return {static_cast<double>(h < 0 ? 0 : h), static_cast<double>(g)};
}

}  // namespace moediag::oracle
