#pragma once

// Routing-trace data model and record validation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "error.hpp"
#include "metrics.hpp"
#include "numeric.hpp"

namespace moediag {

enum class CaptureMode { token_full_probs, token_topk_only, chunk_aggregate };

inline std::string to_string(CaptureMode m) {
  switch (m) {
    case CaptureMode::token_full_probs: return "token_full_probs";
    case CaptureMode::token_topk_only: return "token_topk_only";
    case CaptureMode::chunk_aggregate: return "chunk_aggregate";
  }
  return "?";
}

inline std::optional<CaptureMode> capture_mode_from_string(const std::string& s) {
  if (s == "token_full_probs") return CaptureMode::token_full_probs;
  if (s == "token_topk_only") return CaptureMode::token_topk_only;
  if (s == "chunk_aggregate") return CaptureMode::chunk_aggregate;
  return std::nullopt;
}

// How prob_sums in chunk aggregates were obtained.
enum class ProbBasis { full, topk_lossy };

inline std::string to_string(ProbBasis b) { return b == ProbBasis::full ? "full" : "topk_lossy"; }

inline constexpr double kRowMassTolerance = 1e-4;
inline constexpr double kChunkMassTolerance = 1e-3;

struct TraceMeta {
  std::string model_id;
  std::size_t num_experts = 0;
  std::size_t top_k = 0;
  std::vector<int> moe_layers;
  std::vector<std::string> languages;
  CaptureMode capture_mode = CaptureMode::token_full_probs;
  std::string tokenizer_id;
  std::string created_at;
  std::string note;
  // Only meaningful for chunk_aggregate files.
  ProbBasis prob_basis = ProbBasis::full;

  bool has_layer(int layer) const {
    return std::binary_search(moe_layers.begin(), moe_layers.end(), layer);
  }
  bool has_language(const std::string& lang) const {
    return std::find(languages.begin(), languages.end(), lang) != languages.end();
  }
  std::size_t layer_position(int layer) const {
    return static_cast<std::size_t>(
        std::lower_bound(moe_layers.begin(), moe_layers.end(), layer) - moe_layers.begin());
  }

  friend bool operator==(const TraceMeta&, const TraceMeta&) = default;
};

struct TokenRouting {
  std::uint64_t chunk_id = 0;
  std::uint64_t token_index = 0;
  int layer = 0;
  std::string language;
  bool is_content = true;
  std::vector<std::uint32_t> topk_experts;
  std::vector<double> topk_probs;
  std::optional<std::vector<double>> full_probs;

  friend bool operator==(const TokenRouting&, const TokenRouting&) = default;
};

struct ChunkAggregate {
  std::uint64_t chunk_id = 0;
  std::string language;
  int layer = 0;
  std::uint64_t content_token_count = 0;
  CountVector selection_counts;
  std::vector<double> prob_sums;
  std::uint64_t char_count = 0;
  std::uint64_t segment_count = 0;
  // Sum over content tokens of the per-token router entropy (bits).
  double selection_entropy_sum = 0.0;

  friend bool operator==(const ChunkAggregate&, const ChunkAggregate&) = default;
};

using TraceRecord = std::variant<TokenRouting, ChunkAggregate>;

inline void validate_meta(const TraceMeta& m) {
  if (m.num_experts < 1) throw TraceError("num_experts must be positive", "num_experts");
  if (m.top_k < 1 || m.top_k > m.num_experts)
    throw TraceError("top_k must satisfy 1 <= top_k <= num_experts", "top_k");
  if (m.moe_layers.empty()) throw TraceError("moe_layers must be non-empty", "moe_layers");
  for (std::size_t i = 1; i < m.moe_layers.size(); ++i)
    if (m.moe_layers[i] <= m.moe_layers[i - 1])
      throw TraceError("moe_layers must be strictly increasing", "moe_layers");
  if (m.languages.empty()) throw TraceError("languages must be non-empty", "languages");
  std::set<std::string> seen;
  for (const auto& l : m.languages) {
    if (l.empty()) throw TraceError("language tags must be non-empty", "languages");
    if (!seen.insert(l).second) throw TraceError("duplicate language tag '" + l + "'", "languages");
  }
}

// The K largest probabilities, ties to the lower expert id.
inline std::vector<std::uint32_t> topk_from_full(std::span<const double> full, std::size_t k) {
  std::vector<std::uint32_t> out;
  for (std::size_t i : top_k_indices(full, k)) out.push_back(static_cast<std::uint32_t>(i));
  return out;
}

inline void validate_token(const TokenRouting& r, const TraceMeta& m, std::size_t line = 0) {
  const auto fail = [&](const std::string& rule, const std::string& field) {
    throw TraceError(rule, field, line);
  };
  if (!m.has_layer(r.layer)) fail("layer " + std::to_string(r.layer) + " not in moe_layers", "layer");
  if (!m.has_language(r.language)) fail("language '" + r.language + "' not declared", "language");
  if (r.topk_experts.size() != m.top_k)
    fail("expected " + std::to_string(m.top_k) + " experts, got " + std::to_string(r.topk_experts.size()),
         "topk_experts");
  if (r.topk_probs.size() != m.top_k)
    fail("expected " + std::to_string(m.top_k) + " probabilities, got " + std::to_string(r.topk_probs.size()),
         "topk_probs");
  std::vector<bool> used(m.num_experts, false);
  for (auto e : r.topk_experts) {
    if (e >= m.num_experts) fail("expert id " + std::to_string(e) + " out of range", "topk_experts");
    if (used[e]) fail("duplicate expert id " + std::to_string(e), "topk_experts");
    used[e] = true;
  }
  for (double p : r.topk_probs)
    if (!(p >= 0.0 && p <= 1.0)) fail("probability outside [0,1]", "topk_probs");

  if (m.capture_mode == CaptureMode::token_full_probs && !r.full_probs)
    fail("capture_mode token_full_probs requires full_probs", "full_probs");
  if (m.capture_mode == CaptureMode::token_topk_only && r.full_probs)
    fail("capture_mode token_topk_only forbids full_probs", "full_probs");

  if (r.full_probs) {
    const auto& full = *r.full_probs;
    if (full.size() != m.num_experts)
      fail("expected " + std::to_string(m.num_experts) + " probabilities, got " + std::to_string(full.size()),
           "full_probs");
    for (double p : full)
      if (!(p >= 0.0 && p <= 1.0)) fail("probability outside [0,1]", "full_probs");
    const double mass = compensated_sum(full);
    if (std::fabs(mass - 1.0) > kRowMassTolerance) fail("probability mass out of tolerance", "full_probs");
    auto expect = topk_from_full(full, m.top_k);
    auto got = r.topk_experts;
    std::sort(expect.begin(), expect.end());
    std::sort(got.begin(), got.end());
    if (expect != got) fail("topk_experts are not the K largest entries of full_probs", "topk_experts");
    for (std::size_t j = 0; j < r.topk_experts.size(); ++j)
      if (r.topk_probs[j] != full[r.topk_experts[j]])
        fail("topk_probs disagree with full_probs", "topk_probs");
  } else {
    const double mass = compensated_sum(r.topk_probs);
    if (mass > 1.0 + kRowMassTolerance) fail("probability mass out of tolerance", "topk_probs");
  }
}

inline void validate_chunk(const ChunkAggregate& c, const TraceMeta& m, std::size_t line = 0) {
  const auto fail = [&](const std::string& rule, const std::string& field) {
    throw TraceError(rule, field, line);
  };
  if (!m.has_layer(c.layer)) fail("layer " + std::to_string(c.layer) + " not in moe_layers", "layer");
  if (!m.has_language(c.language)) fail("language '" + c.language + "' not declared", "language");
  if (c.selection_counts.size() != m.num_experts) fail("length must equal num_experts", "selection_counts");
  if (c.prob_sums.size() != m.num_experts) fail("length must equal num_experts", "prob_sums");
  std::uint64_t total = 0;
  for (auto s : c.selection_counts) {
    if (s > c.content_token_count) fail("count exceeds content_token_count", "selection_counts");
    total += s;
  }
  if (total != m.top_k * c.content_token_count)
    fail("sum must equal top_k * content_token_count", "selection_counts");
  const double n = static_cast<double>(c.content_token_count);
  for (double p : c.prob_sums)
    if (!(p >= 0.0 && p <= n + kChunkMassTolerance)) fail("entry outside [0, content_token_count]", "prob_sums");
  const double mass = compensated_sum(c.prob_sums);
  if (m.prob_basis == ProbBasis::full) {
    if (std::fabs(mass - n) > kChunkMassTolerance) fail("probability mass out of tolerance", "prob_sums");
  } else if (mass > n + kChunkMassTolerance) {
    fail("probability mass out of tolerance", "prob_sums");
  }
  if (!(c.selection_entropy_sum >= 0.0) ||
      c.selection_entropy_sum > n * std::log2(static_cast<double>(m.num_experts)) + kChunkMassTolerance)
    fail("selection_entropy_sum out of range", "selection_entropy_sum");
}

}  // namespace moediag
