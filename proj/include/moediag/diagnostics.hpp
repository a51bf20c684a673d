#pragma once

// Expert categorization, deep-layer collapse detection, same-language split
// controls and tokenization statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "aggregation.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "trace.hpp"

namespace moediag {

// ---- expert categorization -----------------------------------------------

enum class ExpertCategory { target_specific, ref_specific, shared, unused };

inline std::string to_string(ExpertCategory c) {
  switch (c) {
    case ExpertCategory::target_specific: return "target_specific";
    case ExpertCategory::ref_specific: return "ref_specific";
    case ExpertCategory::shared: return "shared";
    case ExpertCategory::unused: return "unused";
  }
  return "?";
}

enum class LsiAveraging {
  mean_of_layers,   // per-layer LSI averaged over layers (default)
  of_layer_means,   // LSI of layer-averaged mean probabilities
};

struct CategoryCounts {
  std::size_t target_specific = 0;
  std::size_t ref_specific = 0;
  std::size_t shared = 0;
  std::size_t unused = 0;

  std::size_t total() const { return target_specific + ref_specific + shared + unused; }
  friend bool operator==(const CategoryCounts&, const CategoryCounts&) = default;
};

struct ExpertCategorization {
  double threshold = 0.1;
  std::vector<int> layers;
  std::vector<std::vector<double>> lsi_matrix;  // layers x N, NaN where undefined
  std::vector<double> expert_lsi;               // N, NaN for unused experts
  std::vector<ExpertCategory> categories;
  CategoryCounts counts;
  bool degraded = false;  // mean probabilities came from top-K only
};

namespace detail {

inline std::vector<std::pair<const LayerLanguageProfile*, const LayerLanguageProfile*>> common_layers(
    const std::vector<LayerLanguageProfile>& target, const std::vector<LayerLanguageProfile>& ref) {
  std::map<int, const LayerLanguageProfile*> by_layer;
  for (const auto& r : ref)
    if (!r.empty) by_layer[r.layer] = &r;
  std::vector<std::pair<const LayerLanguageProfile*, const LayerLanguageProfile*>> out;
  for (const auto& t : target) {
    if (t.empty) continue;
    auto it = by_layer.find(t.layer);
    if (it != by_layer.end()) out.emplace_back(&t, it->second);
  }
  if (out.empty()) throw AnalysisError("no common layers between languages");
  return out;
}

inline ExpertCategory classify(double lsi_value, double threshold) {
  if (std::isnan(lsi_value)) return ExpertCategory::unused;
  if (lsi_value > threshold) return ExpertCategory::target_specific;
  if (lsi_value < -threshold) return ExpertCategory::ref_specific;
  return ExpertCategory::shared;
}

inline void recount(ExpertCategorization& c) {
  c.counts = {};
  c.categories.clear();
  for (double v : c.expert_lsi) {
    const auto cat = classify(v, c.threshold);
    c.categories.push_back(cat);
    switch (cat) {
      case ExpertCategory::target_specific: ++c.counts.target_specific; break;
      case ExpertCategory::ref_specific: ++c.counts.ref_specific; break;
      case ExpertCategory::shared: ++c.counts.shared; break;
      case ExpertCategory::unused: ++c.counts.unused; break;
    }
  }
}

}  // namespace detail

inline double lsi_or_nan(double a_target, double a_ref) {
  return a_target + a_ref > 0.0 ? lsi(a_target, a_ref) : std::numeric_limits<double>::quiet_NaN();
}

inline ExpertCategorization categorize_experts(const std::vector<LayerLanguageProfile>& target,
                                               const std::vector<LayerLanguageProfile>& ref, double threshold,
                                               LsiAveraging averaging = LsiAveraging::mean_of_layers,
                                               bool degraded = false) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("LSI threshold must be in (0,1)");
  const auto pairs = detail::common_layers(target, ref);
  const std::size_t n = pairs.front().first->mean_prob.size();
  ExpertCategorization c;
  c.threshold = threshold;
  c.degraded = degraded;
  for (const auto& [t, r] : pairs) {
    if (t->mean_prob.size() != n || r->mean_prob.size() != n) throw AnalysisError("expert count mismatch");
    c.layers.push_back(t->layer);
    auto& row = c.lsi_matrix.emplace_back(n);
    for (std::size_t i = 0; i < n; ++i) row[i] = lsi_or_nan(t->mean_prob[i], r->mean_prob[i]);
  }
  c.expert_lsi.assign(n, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < n; ++i) {
    if (averaging == LsiAveraging::mean_of_layers) {
      CompensatedSum s;
      std::size_t defined = 0;
      for (const auto& row : c.lsi_matrix)
        if (!std::isnan(row[i])) {
          s.add(row[i]);
          ++defined;
        }
      if (defined) c.expert_lsi[i] = s.value() / static_cast<double>(defined);
    } else {
      CompensatedSum at, ar;
      for (const auto& [t, r] : pairs) {
        at.add(t->mean_prob[i]);
        ar.add(r->mean_prob[i]);
      }
      const double L = static_cast<double>(pairs.size());
      c.expert_lsi[i] = lsi_or_nan(at.value() / L, ar.value() / L);
    }
  }
  detail::recount(c);
  return c;
}

inline ExpertCategorization recategorize(ExpertCategorization c, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("LSI threshold must be in (0,1)");
  c.threshold = threshold;
  detail::recount(c);
  return c;
}

inline constexpr double kDefaultLsiThresholds[] = {0.05, 0.10, 0.15, 0.20};

inline std::vector<ExpertCategorization> threshold_sensitivity(const std::vector<LayerLanguageProfile>& target,
                                                               const std::vector<LayerLanguageProfile>& ref,
                                                               const std::vector<double>& thresholds,
                                                               LsiAveraging averaging = LsiAveraging::mean_of_layers,
                                                               bool degraded = false) {
  if (thresholds.empty()) throw ConfigError("no LSI thresholds given");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0 && thresholds[i] < 1.0)) throw ConfigError("LSI thresholds must be in (0,1)");
    if (i && !(thresholds[i] > thresholds[i - 1])) throw ConfigError("LSI thresholds must be strictly increasing");
  }
  const auto base = categorize_experts(target, ref, thresholds.front(), averaging, degraded);
  std::vector<ExpertCategorization> out;
  for (double t : thresholds) out.push_back(recategorize(base, t));
  return out;
}

// ---- collapse detection --------------------------------------------------

struct CollapseConfig {
  double deep_fraction = 0.2;
  std::optional<std::pair<int, int>> baseline_range;  // inclusive layer indices; default: layers before the deep window
  double min_drop_bits = 0.5;
  bool require_sd = true;
};

struct CollapseLayer {
  int layer = 0;
  double target_entropy = 0.0;
  double drop_bits = 0.0;  // baseline mean target entropy - this layer's
  double entropy_gap = 0.0;  // ref - target
  std::optional<double> gap_sd;  // max of the two chunk SDs
  double target_gini = 0.0;
  bool flagged = false;
};

struct CollapseReport {
  std::string target_language;
  std::string ref_language;
  std::vector<CollapseLayer> layers;
  std::pair<int, int> deep_window{0, 0};  // inclusive layer indices
  std::pair<int, int> baseline_window{0, 0};
  double baseline_entropy = 0.0;
  double deep_entropy = 0.0;
  double baseline_gini = 0.0;
  double deep_gini = 0.0;
  double collapse_score = 0.0;  // baseline - deep target entropy (bits)
  double deep_gap = 0.0;        // deep-window mean ref - target entropy
  std::optional<double> deep_gap_sd;
  bool score_passed = false;
  bool sd_criterion_passed = false;
  bool gini_passed = false;
  bool collapsed = false;

  std::vector<int> flagged_layers() const {
    std::vector<int> out;
    for (const auto& l : layers)
      if (l.flagged) out.push_back(l.layer);
    return out;
  }
};

inline void validate(const CollapseConfig& c) {
  if (!(c.deep_fraction > 0.0 && c.deep_fraction <= 0.5)) throw ConfigError("deep_fraction must be in (0, 0.5]");
  if (!(c.min_drop_bits >= 0.0)) throw ConfigError("min_drop_bits must be >= 0");
  if (c.baseline_range && c.baseline_range->first > c.baseline_range->second)
    throw ConfigError("baseline_range must be [first, last]");
}

inline std::size_t deep_window_size(double deep_fraction, std::size_t num_layers) {
  return static_cast<std::size_t>(std::ceil(deep_fraction * static_cast<double>(num_layers) - 1e-9));
}

inline CollapseReport detect_collapse(const MetricSeries& entropy_target, const MetricSeries& entropy_ref,
                                      const MetricSeries& gini_target, const MetricSeries& gini_ref,
                                      const CollapseConfig& config = {}) {
  validate(config);
  const auto layers = entropy_target.layers();
  if (entropy_ref.layers() != layers || gini_target.layers() != layers || gini_ref.layers() != layers)
    throw AnalysisError("detect_collapse: series do not share layers");
  if (layers.size() < 4) throw AnalysisError("detect_collapse: fewer than 4 layers");
  const std::size_t L = layers.size();
  const std::size_t deep = std::max<std::size_t>(1, deep_window_size(config.deep_fraction, L));

  std::vector<std::size_t> baseline_pos, deep_pos;
  for (std::size_t i = L - deep; i < L; ++i) deep_pos.push_back(i);
  for (std::size_t i = 0; i < L; ++i) {
    if (config.baseline_range) {
      if (layers[i] >= config.baseline_range->first && layers[i] <= config.baseline_range->second)
        baseline_pos.push_back(i);
    } else if (i < L - deep) {
      baseline_pos.push_back(i);
    }
  }
  if (baseline_pos.empty()) throw ConfigError("baseline_range selects no analyzed layer");

  CollapseReport r;
  r.target_language = entropy_target.language;
  r.ref_language = entropy_ref.language;
  r.deep_window = {layers[deep_pos.front()], layers[deep_pos.back()]};
  r.baseline_window = {layers[baseline_pos.front()], layers[baseline_pos.back()]};

  const auto mean_at = [](const MetricSeries& s, const std::vector<std::size_t>& pos) {
    CompensatedSum acc;
    for (auto p : pos) acc.add(s.points[p].value);
    return acc.value() / static_cast<double>(pos.size());
  };
  r.baseline_entropy = mean_at(entropy_target, baseline_pos);
  r.deep_entropy = mean_at(entropy_target, deep_pos);
  r.baseline_gini = mean_at(gini_target, baseline_pos);
  r.deep_gini = mean_at(gini_target, deep_pos);
  r.collapse_score = r.baseline_entropy - r.deep_entropy;

  for (std::size_t i = 0; i < L; ++i) {
    CollapseLayer cl;
    cl.layer = layers[i];
    cl.target_entropy = entropy_target.points[i].value;
    cl.drop_bits = r.baseline_entropy - cl.target_entropy;
    cl.entropy_gap = entropy_ref.points[i].value - cl.target_entropy;
    cl.target_gini = gini_target.points[i].value;
    const auto& st = entropy_target.points[i].chunk_sd;
    const auto& sr = entropy_ref.points[i].chunk_sd;
    if (st && sr) cl.gap_sd = std::max(*st, *sr);
    r.layers.push_back(cl);
  }

  CompensatedSum gap, sd;
  bool sd_missing = false;
  for (auto p : deep_pos) {
    gap.add(r.layers[p].entropy_gap);
    if (r.layers[p].gap_sd)
      sd.add(*r.layers[p].gap_sd);
    else
      sd_missing = true;
  }
  r.deep_gap = gap.value() / static_cast<double>(deep_pos.size());
  if (!sd_missing) r.deep_gap_sd = sd.value() / static_cast<double>(deep_pos.size());
  if (config.require_sd && sd_missing)
    throw AnalysisError("detect_collapse: chunk SD missing in deep window (need >= 2 chunks per layer)");

  r.score_passed = r.collapse_score >= config.min_drop_bits;
  r.sd_criterion_passed = r.deep_gap_sd.has_value() && r.deep_gap > *r.deep_gap_sd;
  r.gini_passed = r.deep_gini > r.baseline_gini;
  r.collapsed = r.score_passed && r.gini_passed && (!config.require_sd || r.sd_criterion_passed);

  for (auto& cl : r.layers) {
    const bool gap_ok = cl.gap_sd && cl.entropy_gap > *cl.gap_sd;
    cl.flagged = cl.drop_bits >= config.min_drop_bits && cl.target_gini > r.baseline_gini &&
                 (!config.require_sd || gap_ok);
  }
  return r;
}

// Convenience: collapse report for `target` against `ref` from profiles.
inline CollapseReport detect_collapse(const std::vector<LayerLanguageProfile>& target,
                                      const std::vector<LayerLanguageProfile>& ref, const CollapseConfig& config = {}) {
  return detect_collapse(metric_series(target, LayerMetric::usage_entropy), metric_series(ref, LayerMetric::usage_entropy),
                         metric_series(target, LayerMetric::gini), metric_series(ref, LayerMetric::gini), config);
}

// ---- same-language split control ----------------------------------------

struct NullGap {
  LayerMetric metric = LayerMetric::usage_entropy;
  double mean_abs_gap = 0.0;  // over layers and trials
  double max_abs_gap = 0.0;
};

struct SplitControlSummary {
  std::string language;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::vector<NullGap> gaps;  // one per LayerMetric
  std::size_t collapse_flags = 0;  // trials where either half was flagged collapsed
  double flag_rate = 0.0;

  const NullGap& gap(LayerMetric m) const {
    for (const auto& g : gaps)
      if (g.metric == m) return g;
    throw AnalysisError("metric not in split summary");
  }
};

// Randomly halves one language's chunks (by chunk_id) and runs the gap and
// collapse analysis on the halves as if they were two languages.
inline SplitControlSummary same_language_split_control(const TraceMeta& meta, const std::vector<ChunkAggregate>& chunks,
                                                       std::uint64_t seed, std::size_t trials,
                                                       const CollapseConfig& config = {}) {
  if (trials < 1) throw ConfigError("split_trials must be >= 1");
  std::string language;
  std::set<std::uint64_t> ids;
  for (const auto& c : chunks) {
    if (language.empty()) language = c.language;
    if (c.language != language) throw AnalysisError("split control needs chunks of a single language");
    ids.insert(c.chunk_id);
  }
  if (ids.size() < 4) throw AnalysisError("split control needs at least 4 chunks");

  TraceMeta split_meta = meta;
  split_meta.languages = {"split_a", "split_b"};

  SplitControlSummary out;
  out.language = language;
  out.trials = trials;
  out.seed = seed;
  std::map<LayerMetric, std::pair<CompensatedSum, std::size_t>> sums;
  std::map<LayerMetric, double> maxima;

  const std::vector<std::uint64_t> sorted_ids(ids.begin(), ids.end());
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng(derive_seed(seed, {0x5EED5, trial}));
    auto order = sorted_ids;
    rng.shuffle(order);
    const std::set<std::uint64_t> half_a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(order.size() / 2));
    std::vector<ChunkAggregate> relabeled = chunks;
    for (auto& c : relabeled) c.language = half_a.count(c.chunk_id) ? "split_a" : "split_b";
    const auto table = build_profiles(split_meta, relabeled);
    const auto& a = table.language("split_a");
    const auto& b = table.language("split_b");
    for (auto m : kLayerMetrics) {
      const auto g = gap_series(metric_series(a, m), metric_series(b, m));
      for (const auto& p : g.points) {
        const double v = std::fabs(p.gap);
        sums[m].first.add(v);
        ++sums[m].second;
        maxima[m] = std::max(maxima[m], v);
      }
    }
    const bool flagged = detect_collapse(b, a, config).collapsed || detect_collapse(a, b, config).collapsed;
    if (flagged) ++out.collapse_flags;
  }
  for (auto m : kLayerMetrics) {
    const auto& [s, n] = sums[m];
    out.gaps.push_back({m, n ? s.value() / static_cast<double>(n) : 0.0, maxima[m]});
  }
  out.flag_rate = static_cast<double>(out.collapse_flags) / static_cast<double>(trials);
  return out;
}

// ---- tokenization statistics ----------------------------------------------

struct ChunkTokenCounts {
  std::string language;
  std::uint64_t chunk_id = 0;
  std::uint64_t tokens = 0;
  std::uint64_t chars = 0;
  std::uint64_t segments = 0;
};

struct LanguageTokenization {
  std::uint64_t tokens = 0;
  std::uint64_t chars = 0;
  std::uint64_t segments = 0;
  double tokens_per_char = 0.0;
  double tokens_per_segment = 0.0;
};

struct TokenizationStats {
  std::map<std::string, LanguageTokenization> per_language;
};

// Pooled ratios: totals are summed first, then divided.
inline TokenizationStats tokenization_stats(const std::vector<ChunkTokenCounts>& chunks) {
  TokenizationStats out;
  for (const auto& c : chunks) {
    auto& l = out.per_language[c.language];
    l.tokens += c.tokens;
    l.chars += c.chars;
    l.segments += c.segments;
  }
  for (auto& [lang, l] : out.per_language) {
    if (l.chars == 0) throw AnalysisError("tokenization_stats: zero characters for '" + lang + "'");
    if (l.segments == 0) throw AnalysisError("tokenization_stats: zero segments for '" + lang + "'");
    l.tokens_per_char = static_cast<double>(l.tokens) / static_cast<double>(l.chars);
    l.tokens_per_segment = static_cast<double>(l.tokens) / static_cast<double>(l.segments);
  }
  return out;
}

// One entry per (language, chunk_id), read off the first layer row seen.
inline std::vector<ChunkTokenCounts> chunk_token_counts(const std::vector<ChunkAggregate>& chunks) {
  std::map<std::pair<std::string, std::uint64_t>, ChunkTokenCounts> seen;
  for (const auto& c : chunks)
    seen.try_emplace({c.language, c.chunk_id},
                     ChunkTokenCounts{c.language, c.chunk_id, c.content_token_count, c.char_count, c.segment_count});
  std::vector<ChunkTokenCounts> out;
  for (auto& [k, v] : seen) out.push_back(v);
  return out;
}

}  // namespace moediag
