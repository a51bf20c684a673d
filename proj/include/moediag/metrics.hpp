#pragma once

// Routing-distribution metric kernels. All functions are pure.
//
// Count inputs are per-expert token counts; utilization inputs are any
// non-negative per-expert profile (activation rates, mean probabilities).
// Entropies are in bits, with 0 log 0 taken as 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "error.hpp"
#include "numeric.hpp"

namespace moediag {

using CountVector = std::vector<std::uint64_t>;
using UtilizationVector = std::vector<double>;

namespace detail {

inline std::uint64_t total(std::span<const std::uint64_t> counts) {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

inline void require_nonempty_mass(std::span<const std::uint64_t> counts) {
  if (counts.empty() || total(counts) == 0) throw MetricError("no routed tokens");
}

inline std::vector<std::size_t> order_desc(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

// 1-based average ranks (ties share the mean of their positions).
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// Number of pairs tied within runs of a sorted sequence.
template <typename It, typename Eq>
std::int64_t tied_pairs(It first, It last, Eq eq) {
  std::int64_t pairs = 0;
  for (It i = first; i != last;) {
    It j = i;
    std::int64_t run = 0;
    while (j != last && eq(*j, *i)) {
      ++j;
      ++run;
    }
    pairs += run * (run - 1) / 2;
    i = j;
  }
  return pairs;
}

}  // namespace detail

// Shannon entropy of the assignment distribution p_i = c_i / sum(c).
inline double usage_entropy(std::span<const std::uint64_t> counts) {
  detail::require_nonempty_mass(counts);
  const double sum = static_cast<double>(detail::total(counts));
  CompensatedSum h;
  for (std::uint64_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / sum;
    h.add(-p * std::log2(p));
  }
  return std::max(0.0, h.value());
}

// Gini coefficient over ascending-sorted counts:
//   G = sum_i (2i - N - 1) c_i / (N sum c),  i = 1..N.
inline double gini(std::span<const std::uint64_t> counts) {
  detail::require_nonempty_mass(counts);
  std::vector<std::uint64_t> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<std::int64_t>(sorted.size());
  CompensatedSum num;
  for (std::int64_t i = 1; i <= n; ++i)
    num.add(static_cast<double>(2 * i - n - 1) * static_cast<double>(sorted[i - 1]));
  const double denom = static_cast<double>(n) * static_cast<double>(detail::total(counts));
  return std::max(0.0, num.value() / denom);
}

// Language specificity index (target - ref) / (target + ref).
// Positive values mean the expert leans towards the target language.
inline double lsi(double a_target, double a_ref) {
  if (!(a_target >= 0.0) || !(a_ref >= 0.0)) throw MetricError("negative activation");
  const double s = a_target + a_ref;
  if (s <= 0.0) throw MetricError("lsi undefined: both activations zero");
  return (a_target - a_ref) / s;
}

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw MetricError("length mismatch");
  CompensatedSum dot, uu, vv;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot.add(u[i] * v[i]);
    uu.add(u[i] * u[i]);
    vv.add(v[i] * v[i]);
  }
  if (!(uu.value() > 0.0) || !(vv.value() > 0.0)) throw MetricError("empty utilization");
  const double c = dot.value() / (std::sqrt(uu.value()) * std::sqrt(vv.value()));
  return std::clamp(c, -1.0, 1.0);
}

// Experts whose share of routed tokens is strictly above `min_share`.
inline std::size_t active_expert_count(std::span<const std::uint64_t> counts,
                                       double min_share = 0.0) {
  detail::require_nonempty_mass(counts);
  if (!(min_share >= 0.0 && min_share < 1.0)) throw MetricError("min_share must be in [0,1)");
  const double sum = static_cast<double>(detail::total(counts));
  return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [&](std::uint64_t c) {
    return static_cast<double>(c) / sum > min_share;
  }));
}

// Entropy in bits of one probability row. Terms are non-negative, so a
// plain sum stays within N ulps.
inline double distribution_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log2(p);
  return std::max(0.0, h);
}

// Mean per-token router entropy across rows.
inline double selection_entropy(std::span<const std::vector<double>> rows) {
  if (rows.empty()) throw MetricError("empty stream");
  CompensatedSum s;
  for (const auto& row : rows) {
    const double mass = compensated_sum(row);
    if (std::fabs(mass - 1.0) > 1e-4) throw MetricError("row does not sum to 1");
    s.add(distribution_entropy(row));
  }
  return s.value() / static_cast<double>(rows.size());
}

// Indices of the k largest values, ties resolved toward the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k) {
  auto idx = detail::order_desc(v);
  idx.resize(std::min(k, idx.size()));
  return idx;
}

// |top-k(a) ∩ top-k(b)| / k.
inline double topk_overlap(std::span<const double> a, std::span<const double> b, std::size_t k) {
  if (a.size() != b.size()) throw MetricError("length mismatch");
  if (k < 1 || k > a.size()) throw MetricError("k must be in [1, N]");
  auto ta = top_k_indices(a, k);
  auto tb = top_k_indices(b, k);
  std::sort(ta.begin(), ta.end());
  std::sort(tb.begin(), tb.end());
  std::vector<std::size_t> common;
  std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(k);
}

// Pearson correlation of average ranks.
inline double spearman_rho(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw MetricError("length mismatch");
  if (u.size() < 2) throw MetricError("need at least two values");
  const auto ru = detail::average_ranks(u);
  const auto rv = detail::average_ranks(v);
  const double mean = 0.5 * static_cast<double>(u.size() + 1);
  CompensatedSum suv, suu, svv;
  for (std::size_t i = 0; i < ru.size(); ++i) {
    const double du = ru[i] - mean;
    const double dv = rv[i] - mean;
    suv.add(du * dv);
    suu.add(du * du);
    svv.add(dv * dv);
  }
  if (suu.value() == 0.0 || svv.value() == 0.0)
    throw MetricError("rank correlation undefined: constant vector");
  return std::clamp(suv.value() / std::sqrt(suu.value() * svv.value()), -1.0, 1.0);
}

// Pair statistics shared by the tau-b fast path and the pairwise oracle.
struct KendallPairs {
  std::int64_t n0 = 0;       // n(n-1)/2
  std::int64_t ties_u = 0;   // pairs tied in u
  std::int64_t ties_v = 0;   // pairs tied in v
  std::int64_t score = 0;    // concordant - discordant
};

inline double tau_b_from_pairs(const KendallPairs& p) {
  const std::int64_t du = p.n0 - p.ties_u;
  const std::int64_t dv = p.n0 - p.ties_v;
  if (du == 0 || dv == 0) throw MetricError("rank correlation undefined: constant vector");
  return static_cast<double>(p.score) /
         std::sqrt(static_cast<double>(du) * static_cast<double>(dv));
}

// Knight's O(n log n) pair counting.
inline KendallPairs kendall_pairs(std::span<const double> u, std::span<const double> v) {
  const std::size_t n = u.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return u[a] < u[b] || (u[a] == u[b] && v[a] < v[b]);
  });

  KendallPairs p;
  p.n0 = static_cast<std::int64_t>(n) * (static_cast<std::int64_t>(n) - 1) / 2;
  p.ties_u = detail::tied_pairs(idx.begin(), idx.end(),
                                [&](std::size_t a, std::size_t b) { return u[a] == u[b]; });
  const std::int64_t joint = detail::tied_pairs(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return u[a] == u[b] && v[a] == v[b];
  });

  // Bottom-up merge sort on v, counting exchanges (discordant pairs).
  std::vector<double> ys(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = v[idx[i]];
  std::int64_t swaps = 0;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo < n; lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, n);
      const std::size_t hi = std::min(lo + 2 * width, n);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (ys[j] < ys[i]) {
          swaps += static_cast<std::int64_t>(mid - i);
          buf[k++] = ys[j++];
        } else {
          buf[k++] = ys[i++];
        }
      }
      while (i < mid) buf[k++] = ys[i++];
      while (j < hi) buf[k++] = ys[j++];
    }
    ys.swap(buf);
  }
  p.ties_v = detail::tied_pairs(ys.begin(), ys.end(), [](double a, double b) { return a == b; });
  p.score = p.n0 - p.ties_u - p.ties_v + joint - 2 * swaps;
  return p;
}

// Tau-b (tie-corrected Kendall rank correlation).
inline double kendall_tau(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw MetricError("length mismatch");
  if (u.size() < 2) throw MetricError("need at least two values");
  return tau_b_from_pairs(kendall_pairs(u, v));
}

}  // namespace moediag
