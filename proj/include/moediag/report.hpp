#pragma once

// End-to-end analysis over trace files and machine-readable reports.
//
// Reports are deterministic: JSON keys are emitted in a fixed order and every
// real number is rounded to nine significant digits.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "aggregation.hpp"
#include "diagnostics.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "numeric.hpp"
#include "trace.hpp"
#include "trace_io.hpp"

namespace moediag {

inline constexpr const char* kReportSchema = "moediag-report";
inline constexpr int kReportSchemaVersion = 1;

struct EmitFlags {
  bool layer_csv = true;
  bool summary = true;
  bool gaps = true;
  bool categorization = true;
  bool controls = true;
};

struct VariantInput {
  std::string name;
  std::vector<std::filesystem::path> traces;
};

struct AnalysisConfig {
  std::vector<VariantInput> variants;
  std::string ref_language = "en";
  std::vector<std::string> target_languages;
  CollapseConfig collapse;
  std::vector<double> lsi_thresholds{0.05, 0.10, 0.15, 0.20};
  LsiAveraging lsi_averaging = LsiAveraging::mean_of_layers;
  std::size_t split_trials = 10;
  std::uint64_t seed = 0;
  double active_min_share = 0.0;
  bool require_full_probs = false;
  std::optional<std::filesystem::path> out_dir;
  EmitFlags emit;

  // Adds `path` to the variant called `name`, creating it on first use.
  void add_trace(const std::string& name, std::filesystem::path path) {
    for (auto& v : variants)
      if (v.name == name) {
        v.traces.push_back(std::move(path));
        return;
      }
    variants.push_back({name, {std::move(path)}});
  }
};

// Applies the diagnostics keys of a JSON config document.
inline void apply_config_json(AnalysisConfig& cfg, const nlohmann::ordered_json& j) {
  try {
    if (j.contains("deep_fraction")) cfg.collapse.deep_fraction = j.at("deep_fraction").get<double>();
    if (j.contains("baseline_range")) {
      const auto& b = j.at("baseline_range");
      if (b.is_null())
        cfg.collapse.baseline_range.reset();
      else {
        const auto r = b.get<std::vector<int>>();
        if (r.size() != 2) throw ConfigError("baseline_range must be [first, last]");
        cfg.collapse.baseline_range = std::make_pair(r[0], r[1]);
      }
    }
    if (j.contains("min_drop_bits")) cfg.collapse.min_drop_bits = j.at("min_drop_bits").get<double>();
    if (j.contains("require_sd")) cfg.collapse.require_sd = j.at("require_sd").get<bool>();
    if (j.contains("lsi_thresholds")) cfg.lsi_thresholds = j.at("lsi_thresholds").get<std::vector<double>>();
    if (j.contains("split_trials")) cfg.split_trials = j.at("split_trials").get<std::size_t>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("lsi_averaging")) {
      const auto a = j.at("lsi_averaging").get<std::string>();
      if (a == "mean_of_layers")
        cfg.lsi_averaging = LsiAveraging::mean_of_layers;
      else if (a == "of_layer_means")
        cfg.lsi_averaging = LsiAveraging::of_layer_means;
      else
        throw ConfigError("lsi_averaging must be mean_of_layers or of_layer_means");
    }
    if (j.contains("active_min_share")) cfg.active_min_share = j.at("active_min_share").get<double>();
    if (j.contains("require_full_probs")) cfg.require_full_probs = j.at("require_full_probs").get<bool>();
    if (j.contains("ref_language")) cfg.ref_language = j.at("ref_language").get<std::string>();
    if (j.contains("target_languages"))
      cfg.target_languages = j.at("target_languages").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad analysis config: ") + e.what());
  }
}

inline void validate(const AnalysisConfig& cfg) {
  if (cfg.variants.empty()) throw ConfigError("no trace given");
  for (const auto& v : cfg.variants)
    for (const auto& p : v.traces)
      if (!std::filesystem::exists(p)) throw ConfigError("trace not found: " + p.string());
  for (const auto& t : cfg.target_languages)
    if (t == cfg.ref_language) throw ConfigError("reference and target language must differ");
  validate(cfg.collapse);
  for (std::size_t i = 0; i < cfg.lsi_thresholds.size(); ++i) {
    if (!(cfg.lsi_thresholds[i] > 0.0 && cfg.lsi_thresholds[i] < 1.0))
      throw ConfigError("lsi_thresholds must be in (0,1)");
    if (i && !(cfg.lsi_thresholds[i] > cfg.lsi_thresholds[i - 1]))
      throw ConfigError("lsi_thresholds must be strictly increasing");
  }
  if (cfg.lsi_thresholds.empty()) throw ConfigError("lsi_thresholds must be non-empty");
}

// ---- typed results ---------------------------------------------------------

struct LayerSimilarity {
  int layer = 0;
  double cosine_counts = 0.0;
  double cosine_prob = 0.0;
  double topk_overlap = 0.0;
  std::optional<double> spearman;  // absent when undefined (constant profile)
  std::optional<double> kendall;
};

struct LanguageComparison {
  std::string ref_language;
  std::string target_language;
  std::map<LayerMetric, GapSeries> gaps;
  std::vector<LayerSimilarity> similarity;
  CollapseReport collapse_target;  // target checked against ref
  CollapseReport collapse_ref;     // roles swapped
  std::vector<ExpertCategorization> categorizations;
};

struct VariantAnalysis {
  std::string name;
  std::vector<std::filesystem::path> traces;
  TraceMeta meta;
  bool degraded = false;
  ProfileTable profiles;
  std::map<std::string, std::map<LayerMetric, MetricSeries>> series;
  std::vector<LanguageComparison> comparisons;
  std::map<std::string, SplitControlSummary> controls;
  std::optional<TokenizationStats> tokenization;
  std::vector<ChunkAggregate> chunks;
};

struct DiagnosticsReport {
  AnalysisConfig config;
  std::vector<VariantAnalysis> variants;
};

namespace detail {

inline void check_compatible(const TraceMeta& a, const TraceMeta& b, const std::string& variant) {
  if (a.num_experts != b.num_experts || a.top_k != b.top_k)
    throw AnalysisError("incompatible traces in variant '" + variant + "': different num_experts/top_k");
  if (a.moe_layers != b.moe_layers)
    throw AnalysisError("incompatible traces in variant '" + variant + "': different moe_layers");
}

inline std::optional<double> maybe(auto&& f) {
  try {
    return f();
  } catch (const MetricError&) {
    return std::nullopt;
  }
}

}  // namespace detail

inline VariantAnalysis analyze_variant(const VariantInput& input, const AnalysisConfig& cfg) {
  VariantAnalysis v;
  v.name = input.name;
  v.traces = input.traces;
  bool first = true;
  std::vector<std::string> languages;
  for (const auto& path : input.traces) {
    auto res = load_chunk_aggregates(path, {cfg.require_full_probs});
    if (first) {
      v.meta = res.meta;
      first = false;
    } else {
      detail::check_compatible(v.meta, res.meta, input.name);
    }
    for (const auto& l : res.meta.languages)
      if (std::find(languages.begin(), languages.end(), l) == languages.end()) languages.push_back(l);
    v.degraded = v.degraded || res.lossy;
    v.chunks.insert(v.chunks.end(), std::make_move_iterator(res.chunks.begin()),
                    std::make_move_iterator(res.chunks.end()));
  }
  v.meta.languages = languages;
  v.meta.prob_basis = v.degraded ? ProbBasis::topk_lossy : ProbBasis::full;
  v.profiles = build_profiles(v.meta, v.chunks, v.degraded, cfg.active_min_share);

  std::vector<std::string> targets = cfg.target_languages;
  if (targets.empty())
    for (const auto& l : languages)
      if (l != cfg.ref_language) targets.push_back(l);
  if (!v.profiles.by_language.count(cfg.ref_language))
    throw AnalysisError("variant '" + v.name + "': empty profiles for reference language '" + cfg.ref_language + "'");

  for (const auto& [lang, profiles] : v.profiles.by_language) {
    bool any = false;
    for (const auto& p : profiles) any = any || !p.empty;
    if (!any) throw AnalysisError("variant '" + v.name + "': empty profiles for language '" + lang + "'");
    for (auto m : kLayerMetrics) v.series[lang][m] = metric_series(profiles, m, cfg.active_min_share);
  }

  for (const auto& target : targets) {
    if (!v.profiles.by_language.count(target))
      throw AnalysisError("variant '" + v.name + "': empty profiles for target language '" + target + "'");
    LanguageComparison c;
    c.ref_language = cfg.ref_language;
    c.target_language = target;
    const auto& ref_series = v.series.at(cfg.ref_language);
    const auto& tgt_series = v.series.at(target);
    for (auto m : kLayerMetrics) c.gaps[m] = gap_series(ref_series.at(m), tgt_series.at(m));

    const auto& refp = v.profiles.language(cfg.ref_language);
    const auto& tgtp = v.profiles.language(target);
    for (std::size_t i = 0; i < refp.size(); ++i) {
      const auto& r = refp[i];
      const auto& t = tgtp[i];
      if (r.empty || t.empty) continue;
      LayerSimilarity s;
      s.layer = r.layer;
      s.cosine_counts = cosine_similarity(t.activation_rate, r.activation_rate);
      s.cosine_prob = cosine_similarity(t.mean_prob, r.mean_prob);
      s.topk_overlap = topk_overlap(t.mean_prob, r.mean_prob, v.meta.top_k);
      s.spearman = detail::maybe([&] { return spearman_rho(t.mean_prob, r.mean_prob); });
      s.kendall = detail::maybe([&] { return kendall_tau(t.mean_prob, r.mean_prob); });
      c.similarity.push_back(s);
    }
    c.collapse_target = detect_collapse(tgt_series.at(LayerMetric::usage_entropy), ref_series.at(LayerMetric::usage_entropy),
                                        tgt_series.at(LayerMetric::gini), ref_series.at(LayerMetric::gini), cfg.collapse);
    c.collapse_ref = detect_collapse(ref_series.at(LayerMetric::usage_entropy), tgt_series.at(LayerMetric::usage_entropy),
                                     ref_series.at(LayerMetric::gini), tgt_series.at(LayerMetric::gini), cfg.collapse);
    c.categorizations = threshold_sensitivity(tgtp, refp, cfg.lsi_thresholds, cfg.lsi_averaging, v.degraded);
    v.comparisons.push_back(std::move(c));
  }

  if (cfg.emit.controls && cfg.split_trials > 0) {
    std::map<std::string, std::vector<ChunkAggregate>> per_language;
    for (const auto& c : v.chunks) per_language[c.language].push_back(c);
    for (const auto& [lang, rows] : per_language) {
      std::set<std::uint64_t> ids;
      for (const auto& r : rows) ids.insert(r.chunk_id);
      if (ids.size() < 4) continue;
      v.controls[lang] = same_language_split_control(v.meta, rows, cfg.seed, cfg.split_trials, cfg.collapse);
    }
  }

  const auto counts = chunk_token_counts(v.chunks);
  bool have_text = !counts.empty();
  std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> totals;
  for (const auto& c : counts) {
    totals[c.language].first += c.chars;
    totals[c.language].second += c.segments;
  }
  for (const auto& [l, t] : totals) have_text = have_text && t.first > 0 && t.second > 0;
  if (have_text) v.tokenization = tokenization_stats(counts);
  return v;
}

// ---- JSON rendering ------------------------------------------------------

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson num(double v) { return std::isfinite(v) ? ojson(round9(v)) : ojson(nullptr); }
inline ojson num(const std::optional<double>& v) { return v ? num(*v) : ojson(nullptr); }

inline ojson point_json(const SeriesPoint& p) {
  ojson j;
  j["value"] = num(p.value);
  j["chunk_mean"] = num(p.chunk_mean);
  j["chunk_sd"] = num(p.chunk_sd);
  j["chunks"] = p.chunks;
  return j;
}

inline ojson collapse_json(const CollapseReport& r) {
  ojson j;
  j["target"] = r.target_language;
  j["ref"] = r.ref_language;
  j["collapsed"] = r.collapsed;
  j["collapse_score"] = num(r.collapse_score);
  j["deep_window"] = {r.deep_window.first, r.deep_window.second};
  j["baseline_window"] = {r.baseline_window.first, r.baseline_window.second};
  j["baseline_entropy"] = num(r.baseline_entropy);
  j["deep_entropy"] = num(r.deep_entropy);
  j["baseline_gini"] = num(r.baseline_gini);
  j["deep_gini"] = num(r.deep_gini);
  j["deep_gap"] = num(r.deep_gap);
  j["deep_gap_sd"] = num(r.deep_gap_sd);
  j["score_passed"] = r.score_passed;
  j["sd_criterion_passed"] = r.sd_criterion_passed;
  j["gini_passed"] = r.gini_passed;
  j["flagged_layers"] = r.flagged_layers();
  return j;
}

inline ojson counts_json(const CategoryCounts& c) {
  ojson j;
  j["target_specific"] = c.target_specific;
  j["ref_specific"] = c.ref_specific;
  j["shared"] = c.shared;
  j["unused"] = c.unused;
  return j;
}

inline double mean_of(const std::vector<double>& xs) {
  CompensatedSum s;
  for (double x : xs) s.add(x);
  return xs.empty() ? std::nan("") : s.value() / static_cast<double>(xs.size());
}

}  // namespace detail

inline nlohmann::ordered_json config_to_json(const AnalysisConfig& cfg) {
  nlohmann::ordered_json j;
  j["ref_language"] = cfg.ref_language;
  j["target_languages"] = cfg.target_languages;
  j["deep_fraction"] = detail::num(cfg.collapse.deep_fraction);
  j["baseline_range"] = cfg.collapse.baseline_range
                            ? nlohmann::ordered_json{cfg.collapse.baseline_range->first, cfg.collapse.baseline_range->second}
                            : nlohmann::ordered_json(nullptr);
  j["min_drop_bits"] = detail::num(cfg.collapse.min_drop_bits);
  j["require_sd"] = cfg.collapse.require_sd;
  nlohmann::ordered_json th = nlohmann::ordered_json::array();
  for (double t : cfg.lsi_thresholds) th.push_back(detail::num(t));
  j["lsi_thresholds"] = th;
  j["lsi_averaging"] = cfg.lsi_averaging == LsiAveraging::mean_of_layers ? "mean_of_layers" : "of_layer_means";
  j["split_trials"] = cfg.split_trials;
  j["seed"] = cfg.seed;
  j["active_min_share"] = detail::num(cfg.active_min_share);
  j["require_full_probs"] = cfg.require_full_probs;
  return j;
}

inline nlohmann::ordered_json variant_to_json(const VariantAnalysis& v) {
  using detail::num;
  using detail::ojson;
  ojson j;
  j["name"] = v.name;
  ojson traces = ojson::array();
  for (const auto& p : v.traces) traces.push_back(p.filename().string());
  j["traces"] = traces;
  j["model_id"] = v.meta.model_id;
  j["num_experts"] = v.meta.num_experts;
  j["top_k"] = v.meta.top_k;
  j["moe_layers"] = v.meta.moe_layers;
  j["prob_mode"] = v.degraded ? "degraded" : "full";

  ojson langs = ojson::object();
  for (const auto& [lang, profiles] : v.profiles.by_language) {
    ojson rows = ojson::array();
    const auto& series = v.series.at(lang);
    std::size_t idx = 0;
    for (const auto& p : profiles) {
      if (p.empty) continue;
      ojson row;
      row["layer"] = p.layer;
      row["token_count"] = p.token_count;
      std::uint64_t routed = 0;
      for (auto c : p.counts) routed += c;
      row["routed"] = routed;
      for (auto m : kLayerMetrics) row[to_string(m)] = detail::point_json(series.at(m).points[idx]);
      rows.push_back(row);
      ++idx;
    }
    langs[lang] = {{"layers", rows}};
  }
  j["languages"] = langs;

  ojson comps = ojson::array();
  for (const auto& c : v.comparisons) {
    ojson cj;
    cj["ref"] = c.ref_language;
    cj["target"] = c.target_language;
    ojson layers = ojson::array();
    const auto& first_gap = c.gaps.at(LayerMetric::usage_entropy).points;
    for (std::size_t i = 0; i < first_gap.size(); ++i) {
      ojson lj;
      lj["layer"] = first_gap[i].layer;
      ojson gaps;
      for (auto m : kLayerMetrics) gaps[to_string(m)] = num(c.gaps.at(m).points[i].gap);
      lj["gaps"] = gaps;
      for (const auto& s : c.similarity)
        if (s.layer == first_gap[i].layer) {
          lj["cosine_counts"] = num(s.cosine_counts);
          lj["cosine_prob"] = num(s.cosine_prob);
          lj["topk_overlap"] = num(s.topk_overlap);
          lj["spearman"] = num(s.spearman);
          lj["kendall"] = num(s.kendall);
        }
      layers.push_back(lj);
    }
    cj["layers"] = layers;

    ojson summary;
    std::vector<double> cc, cp, ov, sp, kt;
    for (const auto& s : c.similarity) {
      cc.push_back(s.cosine_counts);
      cp.push_back(s.cosine_prob);
      ov.push_back(s.topk_overlap);
      if (s.spearman) sp.push_back(*s.spearman);
      if (s.kendall) kt.push_back(*s.kendall);
    }
    summary["mean_cosine_counts"] = num(detail::mean_of(cc));
    summary["mean_cosine_prob"] = num(detail::mean_of(cp));
    summary["mean_topk_overlap"] = num(detail::mean_of(ov));
    summary["mean_spearman"] = num(detail::mean_of(sp));
    summary["mean_kendall"] = num(detail::mean_of(kt));
    for (auto m : kLayerMetrics) {
      std::vector<double> g;
      for (const auto& p : c.gaps.at(m).points) g.push_back(p.gap);
      summary["mean_gap_" + to_string(m)] = num(detail::mean_of(g));
    }
    cj["summary"] = summary;

    ojson collapse;
    collapse["criterion"] = "configurable default thresholds (deep_fraction, min_drop_bits, require_sd)";
    collapse["target"] = detail::collapse_json(c.collapse_target);
    collapse["reference"] = detail::collapse_json(c.collapse_ref);
    cj["collapse"] = collapse;

    ojson cats = ojson::array();
    for (const auto& cat : c.categorizations) {
      ojson k;
      k["threshold"] = num(cat.threshold);
      k["counts"] = detail::counts_json(cat.counts);
      cats.push_back(k);
    }
    cj["categorization"] = cats;
    ojson lsi = ojson::array();
    if (!c.categorizations.empty())
      for (double x : c.categorizations.front().expert_lsi) lsi.push_back(num(x));
    cj["expert_lsi"] = lsi;
    cj["categorization_mode"] = v.degraded ? "degraded" : "full";
    comps.push_back(cj);
  }
  j["comparisons"] = comps;

  ojson controls = ojson::object();
  for (const auto& [lang, s] : v.controls) {
    ojson cj;
    cj["trials"] = s.trials;
    cj["seed"] = s.seed;
    ojson gaps;
    for (const auto& g : s.gaps) gaps[to_string(g.metric)] = {{"mean_abs_gap", num(g.mean_abs_gap)}, {"max_abs_gap", num(g.max_abs_gap)}};
    cj["gaps"] = gaps;
    cj["collapse_flags"] = s.collapse_flags;
    cj["flag_rate"] = num(s.flag_rate);
    controls[lang] = cj;
  }
  j["controls"] = controls;

  if (v.tokenization) {
    ojson tj = ojson::object();
    for (const auto& [lang, t] : v.tokenization->per_language)
      tj[lang] = {{"tokens", t.tokens},
                  {"chars", t.chars},
                  {"segments", t.segments},
                  {"tokens_per_char", num(t.tokens_per_char)},
                  {"tokens_per_segment", num(t.tokens_per_segment)}};
    j["tokenization"] = tj;
  } else {
    j["tokenization"] = nullptr;
  }
  return j;
}

inline nlohmann::ordered_json report_to_json(const DiagnosticsReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = kReportSchema;
  j["schema_version"] = kReportSchemaVersion;
  j["config"] = config_to_json(r.config);
  nlohmann::ordered_json vs = nlohmann::ordered_json::array();
  for (const auto& v : r.variants) vs.push_back(variant_to_json(v));
  j["variants"] = vs;
  return j;
}

// ---- compare ---------------------------------------------------------------

namespace detail {

inline double as_num(const ojson& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

inline ojson delta(const ojson& a, const ojson& b) {
  ojson d;
  const double x = as_num(a), y = as_num(b);
  d["a"] = num(x);
  d["b"] = num(y);
  d["delta"] = num(y - x);
  return d;
}

inline void require_schema(const ojson& r) {
  if (!r.is_object() || r.value("schema", "") != kReportSchema)
    throw AnalysisError("not a diagnostics report");
  if (r.value("schema_version", 0) != kReportSchemaVersion) throw AnalysisError("unsupported report schema_version");
}

}  // namespace detail

// Per-layer deltas (b - a) between two variant sections of reports.
inline nlohmann::ordered_json compare_variants(const nlohmann::ordered_json& va, const nlohmann::ordered_json& vb) {
  using detail::ojson;
  if (va.at("moe_layers") != vb.at("moe_layers")) throw AnalysisError("compare: different layer structure");
  ojson out;
  out["a"] = va.at("name");
  out["b"] = vb.at("name");

  ojson langs = ojson::object();
  for (const auto& [lang, la] : va.at("languages").items()) {
    if (!vb.at("languages").contains(lang)) throw AnalysisError("compare: language '" + lang + "' missing in b");
    const auto& rows_a = la.at("layers");
    const auto& rows_b = vb.at("languages").at(lang).at("layers");
    if (rows_a.size() != rows_b.size()) throw AnalysisError("compare: layer mismatch for '" + lang + "'");
    ojson rows = ojson::array();
    for (std::size_t i = 0; i < rows_a.size(); ++i) {
      if (rows_a[i].at("layer") != rows_b[i].at("layer")) throw AnalysisError("compare: layer mismatch");
      ojson row;
      row["layer"] = rows_a[i].at("layer");
      for (auto m : kLayerMetrics)
        row[to_string(m)] = detail::delta(rows_a[i].at(to_string(m)).at("value"), rows_b[i].at(to_string(m)).at("value"));
      rows.push_back(row);
    }
    langs[lang] = rows;
  }
  if (vb.at("languages").size() != va.at("languages").size()) throw AnalysisError("compare: language sets differ");
  out["languages"] = langs;

  ojson comps = ojson::array();
  for (const auto& ca : va.at("comparisons")) {
    const ojson* match = nullptr;
    for (const auto& cb : vb.at("comparisons"))
      if (cb.at("ref") == ca.at("ref") && cb.at("target") == ca.at("target")) match = &cb;
    if (!match) throw AnalysisError("compare: comparison missing in b");
    const auto& cb = *match;
    ojson cj;
    cj["ref"] = ca.at("ref");
    cj["target"] = ca.at("target");
    const auto& la = ca.at("layers");
    const auto& lb = cb.at("layers");
    if (la.size() != lb.size()) throw AnalysisError("compare: layer mismatch");
    ojson layers = ojson::array();
    for (std::size_t i = 0; i < la.size(); ++i) {
      ojson lj;
      lj["layer"] = la[i].at("layer");
      for (auto m : kLayerMetrics)
        lj["gap_" + to_string(m)] = detail::delta(la[i].at("gaps").at(to_string(m)), lb[i].at("gaps").at(to_string(m)));
      for (const char* k : {"cosine_counts", "cosine_prob", "topk_overlap", "spearman", "kendall"})
        lj[k] = detail::delta(la[i].value(k, ojson()), lb[i].value(k, ojson()));
      layers.push_back(lj);
    }
    cj["layers"] = layers;
    ojson summary;
    for (const auto& [k, v] : ca.at("summary").items()) summary[k] = detail::delta(v, cb.at("summary").at(k));
    cj["summary"] = summary;

    ojson cats = ojson::array();
    for (const auto& ka : ca.at("categorization")) {
      for (const auto& kb : cb.at("categorization")) {
        if (ka.at("threshold") != kb.at("threshold")) continue;
        ojson k;
        k["threshold"] = ka.at("threshold");
        for (const char* name : {"target_specific", "ref_specific", "shared", "unused"}) {
          const auto x = ka.at("counts").at(name).get<std::int64_t>();
          const auto y = kb.at("counts").at(name).get<std::int64_t>();
          k[name] = {{"a", x}, {"b", y}, {"delta", y - x}};
        }
        cats.push_back(k);
      }
    }
    cj["categorization"] = cats;
    ojson col;
    for (const char* role : {"target", "reference"}) {
      const auto& x = ca.at("collapse").at(role);
      const auto& y = cb.at("collapse").at(role);
      col[role] = {{"collapsed_a", x.at("collapsed")},
                   {"collapsed_b", y.at("collapsed")},
                   {"collapse_score", detail::delta(x.at("collapse_score"), y.at("collapse_score"))}};
    }
    cj["collapse"] = col;
    comps.push_back(cj);
  }
  out["comparisons"] = comps;
  return out;
}

inline nlohmann::ordered_json compare(const nlohmann::ordered_json& report_a, const nlohmann::ordered_json& report_b,
                                      std::size_t variant_a = 0, std::size_t variant_b = 0) {
  detail::require_schema(report_a);
  detail::require_schema(report_b);
  const auto& va = report_a.at("variants");
  const auto& vb = report_b.at("variants");
  if (variant_a >= va.size() || variant_b >= vb.size()) throw AnalysisError("compare: variant index out of range");
  nlohmann::ordered_json j;
  j["schema"] = "moediag-compare";
  j["schema_version"] = kReportSchemaVersion;
  j["deltas"] = compare_variants(va[variant_a], vb[variant_b]);
  return j;
}

// ---- file output -----------------------------------------------------------

namespace detail {

inline std::string csv_opt(const std::optional<double>& v) { return v ? format9(*v) : "NA"; }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  AtomicFile f(path);
  f.stream() << text;
  f.commit();
}

inline void write_delta_rows(std::ostringstream& os, const ojson& deltas) {
  const std::string a = deltas.at("a"), b = deltas.at("b");
  const auto cell = [](const ojson& x) { return x.is_null() ? std::string("NA") : format9(x.get<double>()); };
  for (const auto& [lang, rows] : deltas.at("languages").items())
    for (const auto& row : rows)
      for (auto m : kLayerMetrics) {
        const auto& d = row.at(to_string(m));
        os << a << ',' << b << ',' << lang << ',' << row.at("layer").get<int>() << ',' << to_string(m) << ','
           << cell(d.at("a")) << ',' << cell(d.at("b")) << ',' << cell(d.at("delta")) << '\n';
      }
  for (const auto& c : deltas.at("comparisons")) {
    const std::string scope = c.at("ref").get<std::string>() + "-" + c.at("target").get<std::string>();
    for (const auto& row : c.at("layers"))
      for (const auto& [k, d] : row.items()) {
        if (k == "layer") continue;
        os << a << ',' << b << ',' << scope << ',' << row.at("layer").get<int>() << ',' << k << ','
           << cell(d.at("a")) << ',' << cell(d.at("b")) << ',' << cell(d.at("delta")) << '\n';
      }
  }
}

}  // namespace detail

inline constexpr const char* kLayersCsvHeader = "variant,layer,language,metric,value,chunk_mean,chunk_sd,chunks";
inline constexpr const char* kSimilarityCsvHeader =
    "variant,ref,target,layer,cosine_counts,cosine_prob,topk_overlap,spearman,kendall";
inline constexpr const char* kGapsCsvHeader =
    "variant,ref,target,layer,metric,ref_value,target_value,gap,ref_sd,target_sd";
inline constexpr const char* kCollapseCsvHeader =
    "variant,ref,target,role,layer,entropy,drop_bits,entropy_gap,gap_sd,gini,flagged";
inline constexpr const char* kCategorizationCsvHeader =
    "variant,ref,target,threshold,target_specific,ref_specific,shared,unused,mode";
inline constexpr const char* kExpertsCsvHeader = "variant,ref,target,expert,lsi,threshold,category";
inline constexpr const char* kControlsCsvHeader =
    "variant,language,metric,mean_abs_gap,max_abs_gap,trials,collapse_flags,flag_rate";
inline constexpr const char* kDeltasCsvHeader = "a,b,scope,layer,metric,a_value,b_value,delta";

inline std::vector<std::filesystem::path> write_report_files(const DiagnosticsReport& r,
                                                             const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const auto& emit = r.config.emit;
  const auto put = [&](const char* name, const std::string& text) {
    detail::write_text(dir / name, text);
    written.push_back(dir / name);
  };

  const auto report = report_to_json(r);
  if (emit.summary) put("report.json", report.dump(1) + "\n");

  if (emit.layer_csv) {
    std::ostringstream layers, sim;
    layers << kLayersCsvHeader << '\n';
    sim << kSimilarityCsvHeader << '\n';
    for (const auto& v : r.variants) {
      for (const auto& [lang, per_metric] : v.series)
        for (auto m : kLayerMetrics)
          for (const auto& p : per_metric.at(m).points)
            layers << v.name << ',' << p.layer << ',' << lang << ',' << to_string(m) << ',' << format9(p.value) << ','
                   << format9(p.chunk_mean) << ',' << detail::csv_opt(p.chunk_sd) << ',' << p.chunks << '\n';
      for (const auto& c : v.comparisons)
        for (const auto& s : c.similarity)
          sim << v.name << ',' << c.ref_language << ',' << c.target_language << ',' << s.layer << ','
              << format9(s.cosine_counts) << ',' << format9(s.cosine_prob) << ',' << format9(s.topk_overlap) << ','
              << detail::csv_opt(s.spearman) << ',' << detail::csv_opt(s.kendall) << '\n';
    }
    put("layers.csv", layers.str());
    put("similarity.csv", sim.str());
  }

  if (emit.gaps) {
    std::ostringstream gaps, col;
    gaps << kGapsCsvHeader << '\n';
    col << kCollapseCsvHeader << '\n';
    for (const auto& v : r.variants)
      for (const auto& c : v.comparisons) {
        for (auto m : kLayerMetrics)
          for (const auto& p : c.gaps.at(m).points)
            gaps << v.name << ',' << c.ref_language << ',' << c.target_language << ',' << p.layer << ','
                 << to_string(m) << ',' << format9(p.ref_value) << ',' << format9(p.target_value) << ','
                 << format9(p.gap) << ',' << detail::csv_opt(p.ref_sd) << ',' << detail::csv_opt(p.target_sd) << '\n';
        for (const auto* rep : {&c.collapse_target, &c.collapse_ref})
          for (const auto& l : rep->layers)
            col << v.name << ',' << c.ref_language << ',' << c.target_language << ','
                << (rep == &c.collapse_target ? "target" : "reference") << ',' << l.layer << ','
                << format9(l.target_entropy) << ',' << format9(l.drop_bits) << ',' << format9(l.entropy_gap) << ','
                << detail::csv_opt(l.gap_sd) << ',' << format9(l.target_gini) << ',' << (l.flagged ? 1 : 0) << '\n';
      }
    put("gaps.csv", gaps.str());
    put("collapse.csv", col.str());
  }

  if (emit.categorization) {
    std::ostringstream cats, experts;
    cats << kCategorizationCsvHeader << '\n';
    experts << kExpertsCsvHeader << '\n';
    for (const auto& v : r.variants)
      for (const auto& c : v.comparisons)
        for (const auto& k : c.categorizations) {
          cats << v.name << ',' << c.ref_language << ',' << c.target_language << ',' << format9(k.threshold) << ','
               << k.counts.target_specific << ',' << k.counts.ref_specific << ',' << k.counts.shared << ','
               << k.counts.unused << ',' << (k.degraded ? "degraded" : "full") << '\n';
          for (std::size_t i = 0; i < k.expert_lsi.size(); ++i)
            experts << v.name << ',' << c.ref_language << ',' << c.target_language << ',' << i << ','
                    << format9(k.expert_lsi[i]) << ',' << format9(k.threshold) << ',' << to_string(k.categories[i])
                    << '\n';
        }
    put("categorization.csv", cats.str());
    put("experts.csv", experts.str());
  }

  if (emit.controls) {
    std::ostringstream ctl;
    ctl << kControlsCsvHeader << '\n';
    for (const auto& v : r.variants)
      for (const auto& [lang, s] : v.controls)
        for (const auto& g : s.gaps)
          ctl << v.name << ',' << lang << ',' << to_string(g.metric) << ',' << format9(g.mean_abs_gap) << ','
              << format9(g.max_abs_gap) << ',' << s.trials << ',' << s.collapse_flags << ',' << format9(s.flag_rate)
              << '\n';
    put("controls.csv", ctl.str());
  }

  if (r.variants.size() > 1) {
    std::ostringstream deltas;
    deltas << kDeltasCsvHeader << '\n';
    const auto& vs = report.at("variants");
    for (std::size_t i = 1; i < vs.size(); ++i) detail::write_delta_rows(deltas, compare_variants(vs[0], vs[i]));
    put("variant_deltas.csv", deltas.str());
  }
  return written;
}

inline DiagnosticsReport analyze(const AnalysisConfig& cfg) {
  validate(cfg);
  DiagnosticsReport r;
  r.config = cfg;
  for (const auto& v : cfg.variants) r.variants.push_back(analyze_variant(v, cfg));
  if (r.variants.size() > 1) {
    const auto& base = r.variants.front();
    for (std::size_t i = 1; i < r.variants.size(); ++i) {
      const auto& other = r.variants[i];
      if (other.meta.moe_layers != base.meta.moe_layers)
        throw AnalysisError("variants '" + base.name + "' and '" + other.name + "' have different layer structure");
    }
  }
  if (cfg.out_dir) write_report_files(r, *cfg.out_dir);
  return r;
}

inline nlohmann::ordered_json load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open report '" + path.string() + "'");
  try {
    return nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw AnalysisError(std::string("report is not valid JSON: ") + e.what());
  }
}

inline void write_compare_files(const nlohmann::ordered_json& cmp, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "compare.json", cmp.dump(1) + "\n");
  std::ostringstream deltas;
  deltas << kDeltasCsvHeader << '\n';
  detail::write_delta_rows(deltas, cmp.at("deltas"));
  detail::write_text(dir / "compare.csv", deltas.str());
}

}  // namespace moediag
