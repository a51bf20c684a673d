#pragma once

// Parametric routing-trace generators with analytically known metrics.
//
// Each routing law defines an expected per-expert probability profile q.
// Every token draws its router distribution from Dirichlet(kappa * q), so
// mean routing probabilities converge to q; the top-K set is extracted from
// that distribution with ties going to the lower expert id.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "rng.hpp"
#include "trace.hpp"
#include "trace_io.hpp"

namespace moediag {

enum class LawKind { uniform, concentrated, dirichlet, zipf, weights };

struct RoutingLaw {
  LawKind kind = LawKind::uniform;
  std::size_t m = 1;           // concentrated: support size
  std::size_t offset = 0;      // concentrated: first expert of the support (wraps)
  double alpha = 1.0;          // dirichlet: concentration of the per-layer profile draw
  double s = 1.0;              // zipf exponent
  std::vector<double> weights; // explicit profile (normalized on use)

  static RoutingLaw uniform() { return {}; }
  static RoutingLaw concentrated(std::size_t m, std::size_t offset = 0) {
    RoutingLaw l;
    l.kind = LawKind::concentrated;
    l.m = m;
    l.offset = offset;
    return l;
  }
  static RoutingLaw dirichlet(double alpha) {
    RoutingLaw l;
    l.kind = LawKind::dirichlet;
    l.alpha = alpha;
    return l;
  }
  static RoutingLaw zipf(double s) {
    RoutingLaw l;
    l.kind = LawKind::zipf;
    l.s = s;
    return l;
  }
  static RoutingLaw explicit_weights(std::vector<double> w) {
    RoutingLaw l;
    l.kind = LawKind::weights;
    l.weights = std::move(w);
    return l;
  }
};

struct LanguageRouting {
  RoutingLaw default_law;
  std::map<int, RoutingLaw> layers;  // per-layer overrides keyed by layer index

  const RoutingLaw& law_for(int layer) const {
    auto it = layers.find(layer);
    return it == layers.end() ? default_law : it->second;
  }
};

struct ScenarioSpec {
  std::string model_id = "synthetic";
  std::size_t num_experts = 128;
  std::size_t top_k = 8;
  std::size_t num_layers = 10;
  int first_layer = 0;
  std::vector<std::string> languages{"en", "he"};
  std::size_t chunks_per_language = 10;
  std::size_t tokens_per_chunk = 100;
  std::size_t special_tokens_per_chunk = 0;  // non-content tokens per chunk
  double token_concentration = 0.0;          // kappa; 0 means num_experts
  CaptureMode capture_mode = CaptureMode::token_full_probs;
  std::uint64_t seed = 0;
  std::string created_at = "1970-01-01T00:00:00Z";
  double chars_per_token = 4.0;
  double segments_per_token = 0.8;
  std::map<std::string, LanguageRouting> routing;  // languages absent here route uniformly

  std::vector<int> layers() const {
    std::vector<int> out(num_layers);
    std::iota(out.begin(), out.end(), first_layer);
    return out;
  }
  double kappa() const { return token_concentration > 0.0 ? token_concentration : static_cast<double>(num_experts); }
  const RoutingLaw& law_for(const std::string& lang, int layer) const {
    static const RoutingLaw kUniform;
    auto it = routing.find(lang);
    return it == routing.end() ? kUniform : it->second.law_for(layer);
  }
};

inline void validate_law(const RoutingLaw& l, std::size_t n) {
  switch (l.kind) {
    case LawKind::uniform: break;
    case LawKind::concentrated:
      if (l.m < 1 || l.m > n) throw ConfigError("concentrated law needs 1 <= m <= num_experts");
      break;
    case LawKind::dirichlet:
      if (!(l.alpha > 0.0)) throw ConfigError("dirichlet law needs alpha > 0");
      break;
    case LawKind::zipf:
      if (!(l.s >= 0.0)) throw ConfigError("zipf law needs s >= 0");
      break;
    case LawKind::weights: {
      if (l.weights.size() != n) throw ConfigError("weights law needs num_experts entries");
      double sum = 0.0;
      for (double w : l.weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("weights must be finite and non-negative");
        sum += w;
      }
      if (!(sum > 0.0)) throw ConfigError("weights must not all be zero");
      break;
    }
  }
}

inline void validate_spec(const ScenarioSpec& s) {
  if (s.num_experts < 1) throw ConfigError("num_experts must be positive");
  if (s.top_k < 1 || s.top_k > s.num_experts) throw ConfigError("top_k must be in [1, num_experts]");
  if (s.num_layers < 1) throw ConfigError("num_layers must be positive");
  if (s.languages.empty()) throw ConfigError("languages must be non-empty");
  if (!(s.token_concentration >= 0.0)) throw ConfigError("token_concentration must be >= 0");
  if (!(s.chars_per_token >= 0.0) || !(s.segments_per_token >= 0.0))
    throw ConfigError("tokenization ratios must be >= 0");
  TraceMeta probe;
  probe.num_experts = s.num_experts;
  probe.top_k = s.top_k;
  probe.moe_layers = s.layers();
  probe.languages = s.languages;
  try {
    validate_meta(probe);
  } catch (const TraceError& e) {
    throw ConfigError(e.what());
  }
  for (const auto& [lang, r] : s.routing) {
    if (!probe.has_language(lang)) throw ConfigError("routing for undeclared language '" + lang + "'");
    validate_law(r.default_law, s.num_experts);
    for (const auto& [layer, law] : r.layers) {
      if (!probe.has_layer(layer)) throw ConfigError("routing override for unknown layer " + std::to_string(layer));
      validate_law(law, s.num_experts);
    }
  }
}

// Expected per-expert probability profile of a law (sums to 1).
// Dirichlet profiles are drawn from `rng`.
inline std::vector<double> law_profile(const RoutingLaw& l, std::size_t n, Rng* rng = nullptr) {
  std::vector<double> q(n, 0.0);
  switch (l.kind) {
    case LawKind::uniform:
      std::fill(q.begin(), q.end(), 1.0 / static_cast<double>(n));
      break;
    case LawKind::concentrated:
      for (std::size_t j = 0; j < l.m; ++j) q[(l.offset + j) % n] = 1.0 / static_cast<double>(l.m);
      break;
    case LawKind::zipf: {
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) sum += q[i] = std::pow(static_cast<double>(i + 1), -l.s);
      for (auto& x : q) x /= sum;
      break;
    }
    case LawKind::dirichlet: {
      if (!rng) throw ConfigError("dirichlet profile needs a random source");
      double sum = 0.0;
      for (auto& x : q) sum += x = rng->gamma(l.alpha);
      if (sum > 0.0)
        for (auto& x : q) x /= sum;
      else
        std::fill(q.begin(), q.end(), 1.0 / static_cast<double>(n));
      break;
    }
    case LawKind::weights: {
      double sum = std::accumulate(l.weights.begin(), l.weights.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) q[i] = l.weights[i] / sum;
      break;
    }
  }
  return q;
}

// Draws one router distribution per call from Dirichlet(kappa * q).
class TokenSampler {
 public:
  TokenSampler(std::vector<double> profile, double kappa, std::size_t top_k)
      : q_(std::move(profile)), shape_(q_.size()), k_(top_k) {
    all_unit_ = true;
    for (std::size_t i = 0; i < q_.size(); ++i) {
      shape_[i] = kappa * q_[i];
      if (shape_[i] != 1.0) all_unit_ = false;
    }
  }

  // Fills `probs` (size N), `experts`/`topk` (size K).
  void sample(Rng& rng, std::vector<double>& probs, std::vector<std::uint32_t>& experts,
              std::vector<double>& topk) {
    const std::size_t n = q_.size();
    probs.resize(n);
    double sum = 0.0;
    if (all_unit_) {
      sum = rng.fill_exponential(probs);
    } else {
      for (std::size_t i = 0; i < n; ++i) sum += probs[i] = shape_[i] > 0.0 ? rng.gamma(shape_[i]) : 0.0;
    }
    if (sum > 0.0) {
      const double inv = 1.0 / sum;
      for (auto& p : probs) p *= inv;
    } else {
      probs = q_;
    }
    // Single pass keeping the K best (descending value, then ascending id).
    experts.resize(k_);
    topk.resize(k_);
    std::size_t held = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
      const double p = probs[i];
      if (held == k_ && !(p > topk[k_ - 1])) continue;  // ties keep the lower id already held
      std::size_t pos = held < k_ ? held++ : k_ - 1;
      while (pos > 0 && topk[pos - 1] < p) {
        topk[pos] = topk[pos - 1];
        experts[pos] = experts[pos - 1];
        --pos;
      }
      topk[pos] = p;
      experts[pos] = i;
    }
  }

  const std::vector<double>& profile() const noexcept { return q_; }

 private:
  std::vector<double> q_;
  std::vector<double> shape_;
  std::size_t k_;
  bool all_unit_ = false;
};

namespace detail {

enum : std::uint64_t { kStreamToken = 1, kStreamSpecial = 2, kStreamProfile = 3 };

inline TraceMeta scenario_meta(const ScenarioSpec& s) {
  TraceMeta m;
  m.model_id = s.model_id;
  m.num_experts = s.num_experts;
  m.top_k = s.top_k;
  m.moe_layers = s.layers();
  m.languages = s.languages;
  m.capture_mode = s.capture_mode;
  m.tokenizer_id = "synthetic";
  m.created_at = s.created_at;
  m.note = "synthetic scenario seed=" + std::to_string(s.seed) + "; routed experts only";
  return m;
}

// Per-(language, layer) samplers; dirichlet profiles drawn once per cell.
inline std::vector<std::vector<TokenSampler>> build_samplers(const ScenarioSpec& s) {
  std::vector<std::vector<TokenSampler>> out;
  const auto layers = s.layers();
  for (std::size_t li = 0; li < s.languages.size(); ++li) {
    auto& row = out.emplace_back();
    for (std::size_t pos = 0; pos < layers.size(); ++pos) {
      Rng prof(derive_seed(s.seed, {kStreamProfile, li, pos}));
      row.emplace_back(law_profile(s.law_for(s.languages[li], layers[pos]), s.num_experts, &prof), s.kappa(),
                       s.top_k);
    }
  }
  return out;
}

inline ChunkTextStats text_stats_for(const ScenarioSpec& s) {
  const double n = static_cast<double>(s.tokens_per_chunk);
  return {static_cast<std::uint64_t>(std::llround(n * s.chars_per_token)),
          static_cast<std::uint64_t>(std::llround(n * s.segments_per_token))};
}

}  // namespace detail

inline TraceMeta scenario_meta(const ScenarioSpec& s) { return detail::scenario_meta(s); }

// Emits every token record in file order: language, chunk, token, layer.
// Special tokens occupy the leading and trailing positions of each chunk and
// draw from their own streams, so adding them never changes content routing.
inline void generate_tokens(const ScenarioSpec& s, const std::function<void(const TokenRouting&)>& sink) {
  validate_spec(s);
  auto samplers = detail::build_samplers(s);
  const auto layers = s.layers();
  const bool keep_full = s.capture_mode != CaptureMode::token_topk_only;
  TokenRouting rec;
  std::vector<double> probs;
  const std::size_t lead = s.special_tokens_per_chunk / 2 + s.special_tokens_per_chunk % 2;
  const std::size_t total = s.tokens_per_chunk + s.special_tokens_per_chunk;
  for (std::size_t li = 0; li < s.languages.size(); ++li) {
    rec.language = s.languages[li];
    for (std::uint64_t chunk = 0; chunk < s.chunks_per_language; ++chunk) {
      std::vector<Rng> content, special;
      for (std::size_t pos = 0; pos < layers.size(); ++pos) {
        content.emplace_back(derive_seed(s.seed, {detail::kStreamToken, li, chunk, pos}));
        special.emplace_back(derive_seed(s.seed, {detail::kStreamSpecial, li, chunk, pos}));
      }
      rec.chunk_id = chunk;
      for (std::size_t t = 0; t < total; ++t) {
        const bool is_content = t >= lead && t < lead + s.tokens_per_chunk;
        rec.token_index = t;
        rec.is_content = is_content;
        for (std::size_t pos = 0; pos < layers.size(); ++pos) {
          rec.layer = layers[pos];
          samplers[li][pos].sample(is_content ? content[pos] : special[pos], probs, rec.topk_experts,
                                   rec.topk_probs);
          if (keep_full)
            rec.full_probs = probs;
          else
            rec.full_probs.reset();
          sink(rec);
        }
      }
    }
  }
}

inline ChunkTextStatsMap scenario_text_stats(const ScenarioSpec& s) {
  ChunkTextStatsMap out;
  for (const auto& lang : s.languages)
    for (std::uint64_t c = 0; c < s.chunks_per_language; ++c) out[{lang, c}] = detail::text_stats_for(s);
  return out;
}

// Chunk aggregates of the scenario without materializing token records.
// Identical to aggregating the token-level trace.
inline AggregationResult generate_aggregates(const ScenarioSpec& s) {
  validate_spec(s);
  auto samplers = detail::build_samplers(s);
  const auto layers = s.layers();
  const bool lossy = s.capture_mode == CaptureMode::token_topk_only;
  const auto stats = scenario_text_stats(s);
  AggregationResult res;
  res.meta = detail::scenario_meta(s);
  res.meta.capture_mode = CaptureMode::chunk_aggregate;
  res.meta.prob_basis = lossy ? ProbBasis::topk_lossy : ProbBasis::full;
  res.lossy = lossy;
  std::vector<double> probs, topk;
  std::vector<std::uint32_t> experts;
  std::vector<std::size_t> lang_order(s.languages.size());
  std::iota(lang_order.begin(), lang_order.end(), std::size_t{0});
  std::sort(lang_order.begin(), lang_order.end(),
            [&](std::size_t a, std::size_t b) { return s.languages[a] < s.languages[b]; });
  for (std::size_t li : lang_order) {
    for (std::uint64_t chunk = 0; chunk < s.chunks_per_language; ++chunk) {
      for (std::size_t pos = 0; pos < layers.size(); ++pos) {
        Rng rng(derive_seed(s.seed, {detail::kStreamToken, li, chunk, pos}));
        ChunkRowBuilder b(chunk, s.languages[li], layers[pos], s.num_experts);
        for (std::size_t t = 0; t < s.tokens_per_chunk; ++t) {
          samplers[li][pos].sample(rng, probs, experts, topk);
          b.add_content(experts, topk, lossy ? std::span<const double>{} : std::span<const double>(probs));
        }
        res.chunks.push_back(b.finish(stats));
      }
    }
  }
  return res;
}

struct GenerationSummary {
  std::uintmax_t bytes = 0;
  std::size_t records = 0;
  std::optional<std::filesystem::path> sidecar;
};

// Writes the scenario in its capture mode. Token-level output also gets a
// tokenization sidecar next to it.
inline GenerationSummary generate_trace(const ScenarioSpec& s, const std::filesystem::path& out) {
  validate_spec(s);
  GenerationSummary g;
  if (s.capture_mode == CaptureMode::chunk_aggregate) {
    auto res = generate_aggregates(s);
    g.records = res.chunks.size();
    g.bytes = write_aggregate_trace(out, res.meta, res.chunks);
    return g;
  }
  {
    AtomicFile f(out);
    write_token_header(f.stream(), detail::scenario_meta(s));
    generate_tokens(s, [&](const TokenRouting& r) {
      write_token_record(f.stream(), r);
      ++g.records;
    });
    g.bytes = f.commit();
  }
  g.sidecar = default_sidecar_path(out);
  write_sidecar(*g.sidecar, scenario_text_stats(s));
  return g;
}

// Target language(s) switch to concentrated routing over the last
// ceil(deep_fraction * L) layers; everything else stays as in `base`.
inline ScenarioSpec gen_collapse_scenario(ScenarioSpec base, double deep_fraction, const std::string& target_language,
                                          std::size_t m = 8, std::vector<std::string> also_collapse = {}) {
  if (!(deep_fraction >= 0.0 && deep_fraction <= 1.0)) throw ConfigError("deep_fraction must be in [0,1]");
  const auto layers = base.layers();
  const auto deep = static_cast<std::size_t>(std::ceil(deep_fraction * static_cast<double>(layers.size()) - 1e-9));
  also_collapse.insert(also_collapse.begin(), target_language);
  for (const auto& lang : also_collapse) {
    auto& r = base.routing[lang];
    for (std::size_t i = layers.size() - deep; i < layers.size(); ++i)
      r.layers[layers[i]] = RoutingLaw::concentrated(m);
  }
  return base;
}

// ---- scenario file ------------------------------------------------------

inline nlohmann::ordered_json law_to_json(const RoutingLaw& l) {
  nlohmann::ordered_json j;
  switch (l.kind) {
    case LawKind::uniform: j["law"] = "uniform"; break;
    case LawKind::concentrated:
      j["law"] = "concentrated";
      j["m"] = l.m;
      j["offset"] = l.offset;
      break;
    case LawKind::dirichlet:
      j["law"] = "dirichlet";
      j["alpha"] = l.alpha;
      break;
    case LawKind::zipf:
      j["law"] = "zipf";
      j["s"] = l.s;
      break;
    case LawKind::weights:
      j["law"] = "weights";
      j["weights"] = l.weights;
      break;
  }
  return j;
}

inline RoutingLaw law_from_json(const nlohmann::ordered_json& j) {
  try {
    const auto kind = j.at("law").get<std::string>();
    RoutingLaw l;
    if (kind == "uniform") return l;
    if (kind == "concentrated") return RoutingLaw::concentrated(j.at("m").get<std::size_t>(), j.value("offset", 0u));
    if (kind == "dirichlet") return RoutingLaw::dirichlet(j.at("alpha").get<double>());
    if (kind == "zipf") return RoutingLaw::zipf(j.at("s").get<double>());
    if (kind == "weights") return RoutingLaw::explicit_weights(j.at("weights").get<std::vector<double>>());
    throw ConfigError("unknown law '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad routing law: ") + e.what());
  }
}

inline nlohmann::ordered_json spec_to_json(const ScenarioSpec& s) {
  nlohmann::ordered_json j;
  j["model_id"] = s.model_id;
  j["num_experts"] = s.num_experts;
  j["top_k"] = s.top_k;
  j["num_layers"] = s.num_layers;
  j["first_layer"] = s.first_layer;
  j["languages"] = s.languages;
  j["chunks_per_language"] = s.chunks_per_language;
  j["tokens_per_chunk"] = s.tokens_per_chunk;
  j["special_tokens_per_chunk"] = s.special_tokens_per_chunk;
  j["token_concentration"] = s.token_concentration;
  j["capture_mode"] = to_string(s.capture_mode);
  j["seed"] = s.seed;
  j["created_at"] = s.created_at;
  j["chars_per_token"] = s.chars_per_token;
  j["segments_per_token"] = s.segments_per_token;
  nlohmann::ordered_json routing = nlohmann::ordered_json::object();
  for (const auto& [lang, r] : s.routing) {
    nlohmann::ordered_json lj;
    lj["default"] = law_to_json(r.default_law);
    nlohmann::ordered_json layers = nlohmann::ordered_json::object();
    for (const auto& [layer, law] : r.layers) layers[std::to_string(layer)] = law_to_json(law);
    lj["layers"] = layers;
    routing[lang] = lj;
  }
  j["routing"] = routing;
  return j;
}

// Missing keys keep their defaults.
inline ScenarioSpec spec_from_json(const nlohmann::ordered_json& j) {
  ScenarioSpec s;
  try {
    s.model_id = j.value("model_id", s.model_id);
    s.num_experts = j.value("num_experts", s.num_experts);
    s.top_k = j.value("top_k", s.top_k);
    s.num_layers = j.value("num_layers", s.num_layers);
    s.first_layer = j.value("first_layer", s.first_layer);
    s.languages = j.value("languages", s.languages);
    s.chunks_per_language = j.value("chunks_per_language", s.chunks_per_language);
    s.tokens_per_chunk = j.value("tokens_per_chunk", s.tokens_per_chunk);
    s.special_tokens_per_chunk = j.value("special_tokens_per_chunk", s.special_tokens_per_chunk);
    s.token_concentration = j.value("token_concentration", s.token_concentration);
    const auto mode = j.value("capture_mode", to_string(s.capture_mode));
    auto parsed = capture_mode_from_string(mode);
    if (!parsed) throw ConfigError("unknown capture_mode '" + mode + "'");
    s.capture_mode = *parsed;
    s.seed = j.value("seed", s.seed);
    s.created_at = j.value("created_at", s.created_at);
    s.chars_per_token = j.value("chars_per_token", s.chars_per_token);
    s.segments_per_token = j.value("segments_per_token", s.segments_per_token);
    if (auto it = j.find("routing"); it != j.end()) {
      for (const auto& [lang, lj] : it->items()) {
        LanguageRouting r;
        if (lj.contains("default")) r.default_law = law_from_json(lj.at("default"));
        if (lj.contains("layers"))
          for (const auto& [layer, law] : lj.at("layers").items()) r.layers[std::stoi(layer)] = law_from_json(law);
        s.routing[lang] = r;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad scenario spec: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ConfigError("bad scenario spec: layer keys must be integers");
  }
  validate_spec(s);
  return s;
}

inline ScenarioSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scenario '" + path.string() + "'");
  try {
    return spec_from_json(nlohmann::ordered_json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("scenario is not valid JSON: ") + e.what());
  }
}

}  // namespace moediag
