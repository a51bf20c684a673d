#pragma once

// Chunk aggregates -> per-layer, per-language expert utilization profiles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "error.hpp"
#include "metrics.hpp"
#include "trace.hpp"

namespace moediag {

// Metric values of a single chunk, kept for standard-deviation bands.
struct ChunkMetrics {
  std::uint64_t chunk_id = 0;
  std::uint64_t token_count = 0;
  double usage_entropy = 0.0;
  double gini = 0.0;
  double active_experts = 0.0;
  double selection_entropy = 0.0;

  friend bool operator==(const ChunkMetrics&, const ChunkMetrics&) = default;
};

inline ChunkMetrics chunk_metrics(const ChunkAggregate& c, double active_min_share = 0.0) {
  ChunkMetrics m;
  m.chunk_id = c.chunk_id;
  m.token_count = c.content_token_count;
  m.usage_entropy = usage_entropy(c.selection_counts);
  m.gini = gini(c.selection_counts);
  m.active_experts = static_cast<double>(active_expert_count(c.selection_counts, active_min_share));
  m.selection_entropy = c.selection_entropy_sum / static_cast<double>(c.content_token_count);
  return m;
}

struct LayerLanguageAccumulator {
  int layer = 0;
  std::string language;
  std::uint64_t token_count = 0;
  CountVector counts;
  std::vector<double> prob_sums;
  double selection_entropy_sum = 0.0;
  std::uint64_t char_count = 0;
  std::uint64_t segment_count = 0;
  std::set<std::uint64_t> chunk_ids;
  std::vector<ChunkMetrics> per_chunk;  // chunks with at least one content token

  LayerLanguageAccumulator() = default;
  LayerLanguageAccumulator(int layer_, std::string language_, std::size_t num_experts)
      : layer(layer_), language(std::move(language_)), counts(num_experts, 0), prob_sums(num_experts, 0.0) {}
};

// Adds one chunk row. Chunk ids must be new to the accumulator.
inline LayerLanguageAccumulator accumulate(LayerLanguageAccumulator acc, const ChunkAggregate& chunk,
                                           double active_min_share = 0.0) {
  if (chunk.layer != acc.layer || chunk.language != acc.language)
    throw AnalysisError("accumulate: layer/language mismatch (acc " + acc.language + "@" +
                        std::to_string(acc.layer) + ", chunk " + chunk.language + "@" +
                        std::to_string(chunk.layer) + ")");
  if (acc.counts.empty()) {
    acc.counts.assign(chunk.selection_counts.size(), 0);
    acc.prob_sums.assign(chunk.prob_sums.size(), 0.0);
  }
  if (chunk.selection_counts.size() != acc.counts.size() || chunk.prob_sums.size() != acc.prob_sums.size())
    throw AnalysisError("accumulate: expert count mismatch");
  if (!acc.chunk_ids.insert(chunk.chunk_id).second)
    throw AnalysisError("accumulate: chunk " + std::to_string(chunk.chunk_id) + " already accumulated");
  for (std::size_t i = 0; i < acc.counts.size(); ++i) {
    acc.counts[i] += chunk.selection_counts[i];
    acc.prob_sums[i] += chunk.prob_sums[i];
  }
  acc.token_count += chunk.content_token_count;
  acc.selection_entropy_sum += chunk.selection_entropy_sum;
  acc.char_count += chunk.char_count;
  acc.segment_count += chunk.segment_count;
  if (chunk.content_token_count > 0) acc.per_chunk.push_back(chunk_metrics(chunk, active_min_share));
  return acc;
}

inline LayerLanguageAccumulator merge(const LayerLanguageAccumulator& a, const LayerLanguageAccumulator& b) {
  if (a.layer != b.layer || a.language != b.language) throw AnalysisError("merge: layer/language mismatch");
  if (a.counts.empty()) return b;
  if (b.counts.empty()) return a;
  if (a.counts.size() != b.counts.size()) throw AnalysisError("merge: expert count mismatch");
  for (auto id : b.chunk_ids)
    if (a.chunk_ids.count(id)) throw AnalysisError("merge: overlapping chunk id " + std::to_string(id));
  LayerLanguageAccumulator out = a;
  for (std::size_t i = 0; i < out.counts.size(); ++i) {
    out.counts[i] += b.counts[i];
    out.prob_sums[i] += b.prob_sums[i];
  }
  out.token_count += b.token_count;
  out.selection_entropy_sum += b.selection_entropy_sum;
  out.char_count += b.char_count;
  out.segment_count += b.segment_count;
  out.chunk_ids.insert(b.chunk_ids.begin(), b.chunk_ids.end());
  out.per_chunk.insert(out.per_chunk.end(), b.per_chunk.begin(), b.per_chunk.end());
  return out;
}

struct LayerLanguageProfile {
  int layer = 0;
  std::string language;
  std::uint64_t token_count = 0;
  CountVector counts;
  std::vector<double> activation_rate;
  std::vector<double> mean_prob;
  double selection_entropy = 0.0;  // mean per-token router entropy
  std::uint64_t char_count = 0;
  std::uint64_t segment_count = 0;
  std::vector<ChunkMetrics> per_chunk;  // sorted by chunk_id
  bool empty = false;
};

inline LayerLanguageProfile finalize(const LayerLanguageAccumulator& acc) {
  LayerLanguageProfile p;
  p.layer = acc.layer;
  p.language = acc.language;
  p.token_count = acc.token_count;
  p.counts = acc.counts;
  p.char_count = acc.char_count;
  p.segment_count = acc.segment_count;
  p.per_chunk = acc.per_chunk;
  std::sort(p.per_chunk.begin(), p.per_chunk.end(),
            [](const ChunkMetrics& x, const ChunkMetrics& y) { return x.chunk_id < y.chunk_id; });
  if (acc.token_count == 0) {
    p.empty = true;
    p.activation_rate.assign(acc.counts.size(), 0.0);
    p.mean_prob.assign(acc.counts.size(), 0.0);
    return p;
  }
  const double n = static_cast<double>(acc.token_count);
  p.activation_rate.resize(acc.counts.size());
  p.mean_prob.resize(acc.counts.size());
  for (std::size_t i = 0; i < acc.counts.size(); ++i) {
    p.activation_rate[i] = static_cast<double>(acc.counts[i]) / n;
    p.mean_prob[i] = acc.prob_sums[i] / n;
  }
  p.selection_entropy = acc.selection_entropy_sum / n;
  return p;
}

// Finalized profiles of one trace, per language, ordered by layer.
struct ProfileTable {
  TraceMeta meta;
  bool lossy = false;
  std::map<std::string, std::vector<LayerLanguageProfile>> by_language;

  const std::vector<LayerLanguageProfile>& language(const std::string& lang) const {
    auto it = by_language.find(lang);
    if (it == by_language.end()) throw AnalysisError("no profiles for language '" + lang + "'");
    return it->second;
  }
};

// Accumulates every row into its (language, layer) cell. Languages with no
// rows at all are omitted; layers without rows get an empty profile.
inline ProfileTable build_profiles(const TraceMeta& meta, const std::vector<ChunkAggregate>& chunks,
                                   bool lossy = false, double active_min_share = 0.0) {
  std::map<std::string, std::map<int, LayerLanguageAccumulator>> accs;
  for (const auto& c : chunks) {
    auto& per_layer = accs[c.language];
    auto it = per_layer.find(c.layer);
    if (it == per_layer.end())
      it = per_layer.emplace(c.layer, LayerLanguageAccumulator(c.layer, c.language, meta.num_experts)).first;
    it->second = accumulate(std::move(it->second), c, active_min_share);
  }
  ProfileTable t;
  t.meta = meta;
  t.lossy = lossy;
  for (auto& [lang, per_layer] : accs) {
    auto& out = t.by_language[lang];
    for (int layer : meta.moe_layers) {
      auto it = per_layer.find(layer);
      out.push_back(finalize(it == per_layer.end() ? LayerLanguageAccumulator(layer, lang, meta.num_experts)
                                                   : it->second));
    }
  }
  return t;
}

// ---- metric series ------------------------------------------------------

enum class LayerMetric { usage_entropy, gini, active_experts, selection_entropy };

inline std::string to_string(LayerMetric m) {
  switch (m) {
    case LayerMetric::usage_entropy: return "usage_entropy";
    case LayerMetric::gini: return "gini";
    case LayerMetric::active_experts: return "active_experts";
    case LayerMetric::selection_entropy: return "selection_entropy";
  }
  return "?";
}

inline constexpr LayerMetric kLayerMetrics[] = {LayerMetric::usage_entropy, LayerMetric::gini,
                                                LayerMetric::active_experts, LayerMetric::selection_entropy};

struct SeriesPoint {
  int layer = 0;
  double value = 0.0;                 // from pooled counts
  double chunk_mean = 0.0;            // mean of per-chunk values
  std::optional<double> chunk_sd;     // sample SD; absent with < 2 chunks
  std::size_t chunks = 0;
};

struct MetricSeries {
  LayerMetric metric = LayerMetric::usage_entropy;
  std::string language;
  std::vector<SeriesPoint> points;

  std::vector<int> layers() const {
    std::vector<int> out;
    for (const auto& p : points) out.push_back(p.layer);
    return out;
  }
};

inline double pooled_value(const LayerLanguageProfile& p, LayerMetric m, double active_min_share = 0.0) {
  switch (m) {
    case LayerMetric::usage_entropy: return usage_entropy(p.counts);
    case LayerMetric::gini: return gini(p.counts);
    case LayerMetric::active_experts: return static_cast<double>(active_expert_count(p.counts, active_min_share));
    case LayerMetric::selection_entropy: return p.selection_entropy;
  }
  return 0.0;
}

inline double chunk_value(const ChunkMetrics& c, LayerMetric m) {
  switch (m) {
    case LayerMetric::usage_entropy: return c.usage_entropy;
    case LayerMetric::gini: return c.gini;
    case LayerMetric::active_experts: return c.active_experts;
    case LayerMetric::selection_entropy: return c.selection_entropy;
  }
  return 0.0;
}

inline void mean_and_sd(const std::vector<double>& xs, double& mean, std::optional<double>& sd) {
  mean = 0.0;
  sd.reset();
  if (xs.empty()) return;
  CompensatedSum s;
  for (double x : xs) s.add(x);
  mean = s.value() / static_cast<double>(xs.size());
  if (xs.size() < 2) return;
  CompensatedSum ss;
  for (double x : xs) ss.add((x - mean) * (x - mean));
  sd = std::sqrt(ss.value() / static_cast<double>(xs.size() - 1));
}

// Per-layer point estimates from pooled counts plus chunk SD bands.
// Empty profiles are skipped.
inline MetricSeries metric_series(const std::vector<LayerLanguageProfile>& profiles, LayerMetric metric,
                                  double active_min_share = 0.0) {
  MetricSeries s;
  s.metric = metric;
  for (const auto& p : profiles) {
    if (p.empty) continue;
    if (s.language.empty()) s.language = p.language;
    if (p.language != s.language) throw AnalysisError("metric_series: mixed languages");
    SeriesPoint pt;
    pt.layer = p.layer;
    pt.value = pooled_value(p, metric, active_min_share);
    std::vector<double> xs;
    for (const auto& c : p.per_chunk) xs.push_back(chunk_value(c, metric));
    pt.chunks = xs.size();
    mean_and_sd(xs, pt.chunk_mean, pt.chunk_sd);
    s.points.push_back(pt);
  }
  return s;
}

struct GapPoint {
  int layer = 0;
  double ref_value = 0.0;
  double target_value = 0.0;
  double gap = 0.0;  // ref - target
  std::optional<double> ref_sd;
  std::optional<double> target_sd;
};

// Per-layer reference-minus-target differences.
struct GapSeries {
  LayerMetric metric = LayerMetric::usage_entropy;
  std::string ref_language;
  std::string target_language;
  std::vector<GapPoint> points;
};

inline GapSeries gap_series(const MetricSeries& ref, const MetricSeries& target) {
  if (ref.metric != target.metric) throw AnalysisError("gap_series: metric mismatch");
  if (ref.layers() != target.layers()) throw AnalysisError("gap_series: layer mismatch");
  GapSeries g;
  g.metric = ref.metric;
  g.ref_language = ref.language;
  g.target_language = target.language;
  for (std::size_t i = 0; i < ref.points.size(); ++i) {
    const auto& r = ref.points[i];
    const auto& t = target.points[i];
    g.points.push_back({r.layer, r.value, t.value, r.value - t.value, r.chunk_sd, t.chunk_sd});
  }
  return g;
}

}  // namespace moediag
