#pragma once

// On-disk trace formats.
//
// Token-level traces are line-delimited JSON: the first line is
// {"meta": {...}} and every following line is one TokenRouting record.
// Chunk-aggregate traces are a single JSON document
// {"meta": {...}, "chunks": [...]} written one chunk row per line.
//
// Per-chunk tokenization counts for token-level traces live in a sidecar
// (line-delimited {"language","chunk_id","char_count","segment_count"}).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "metrics.hpp"
#include "trace.hpp"

namespace moediag {

using json = nlohmann::ordered_json;

inline constexpr const char* kTraceFormat = "moediag-trace";
inline constexpr int kTraceFormatVersion = 1;

// ---- JSON mapping -------------------------------------------------------

inline json meta_to_json(const TraceMeta& m) {
  json j;
  j["format"] = kTraceFormat;
  j["format_version"] = kTraceFormatVersion;
  j["model_id"] = m.model_id;
  j["num_experts"] = m.num_experts;
  j["top_k"] = m.top_k;
  j["moe_layers"] = m.moe_layers;
  j["languages"] = m.languages;
  j["capture_mode"] = to_string(m.capture_mode);
  j["tokenizer_id"] = m.tokenizer_id;
  j["created_at"] = m.created_at;
  j["note"] = m.note;
  if (m.capture_mode == CaptureMode::chunk_aggregate) j["prob_basis"] = to_string(m.prob_basis);
  return j;
}

namespace detail {

template <typename T>
T get_field(const json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) throw TraceError("missing required field", key, line);
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw TraceError("wrong type", key, line);
  }
}

template <typename T>
T get_optional(const json& j, const char* key, T fallback, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw TraceError("wrong type", key, line);
  }
}

}  // namespace detail

inline TraceMeta meta_from_json(const json& j, std::size_t line = 1) {
  if (!j.is_object()) throw TraceError("malformed header", "meta", line);
  TraceMeta m;
  const auto format = detail::get_optional<std::string>(j, "format", kTraceFormat, line);
  if (format != kTraceFormat) throw TraceError("unknown format '" + format + "'", "format", line);
  const auto version = detail::get_optional<int>(j, "format_version", kTraceFormatVersion, line);
  if (version != kTraceFormatVersion)
    throw TraceError("unsupported format_version " + std::to_string(version), "format_version", line);
  const auto n = detail::get_field<std::int64_t>(j, "num_experts", line);
  const auto k = detail::get_field<std::int64_t>(j, "top_k", line);
  if (n < 1) throw TraceError("num_experts must be positive", "num_experts", line);
  if (k < 1) throw TraceError("top_k must be positive", "top_k", line);
  m.num_experts = static_cast<std::size_t>(n);
  m.top_k = static_cast<std::size_t>(k);
  m.model_id = detail::get_optional<std::string>(j, "model_id", "", line);
  m.moe_layers = detail::get_field<std::vector<int>>(j, "moe_layers", line);
  m.languages = detail::get_field<std::vector<std::string>>(j, "languages", line);
  const auto mode = detail::get_field<std::string>(j, "capture_mode", line);
  auto parsed = capture_mode_from_string(mode);
  if (!parsed) throw TraceError("unknown capture_mode '" + mode + "'", "capture_mode", line);
  m.capture_mode = *parsed;
  m.tokenizer_id = detail::get_optional<std::string>(j, "tokenizer_id", "", line);
  m.created_at = detail::get_optional<std::string>(j, "created_at", "", line);
  m.note = detail::get_optional<std::string>(j, "note", "", line);
  const auto basis = detail::get_optional<std::string>(j, "prob_basis", "full", line);
  if (basis == "full")
    m.prob_basis = ProbBasis::full;
  else if (basis == "topk_lossy")
    m.prob_basis = ProbBasis::topk_lossy;
  else
    throw TraceError("unknown prob_basis '" + basis + "'", "prob_basis", line);
  try {
    validate_meta(m);
  } catch (const TraceError& e) {
    throw TraceError(e.rule(), e.field(), line);
  }
  return m;
}

inline json token_to_json(const TokenRouting& r) {
  json j;
  j["chunk_id"] = r.chunk_id;
  j["token_index"] = r.token_index;
  j["layer"] = r.layer;
  j["language"] = r.language;
  j["is_content"] = r.is_content;
  j["topk_experts"] = r.topk_experts;
  j["topk_probs"] = r.topk_probs;
  if (r.full_probs) j["full_probs"] = *r.full_probs;
  return j;
}

inline TokenRouting token_from_json(const json& j, std::size_t line) {
  if (!j.is_object()) throw TraceError("record must be an object", "", line);
  if (j.contains("meta")) throw TraceError("duplicate meta header", "meta", line);
  if (j.contains("selection_counts"))
    throw TraceError("capture_mode mismatch: chunk row in token-level trace", "selection_counts", line);
  TokenRouting r;
  r.chunk_id = detail::get_field<std::uint64_t>(j, "chunk_id", line);
  r.token_index = detail::get_field<std::uint64_t>(j, "token_index", line);
  r.layer = detail::get_field<int>(j, "layer", line);
  r.language = detail::get_field<std::string>(j, "language", line);
  r.is_content = detail::get_field<bool>(j, "is_content", line);
  r.topk_experts = detail::get_field<std::vector<std::uint32_t>>(j, "topk_experts", line);
  r.topk_probs = detail::get_field<std::vector<double>>(j, "topk_probs", line);
  if (auto it = j.find("full_probs"); it != j.end() && !it->is_null())
    r.full_probs = detail::get_field<std::vector<double>>(j, "full_probs", line);
  return r;
}

inline json chunk_to_json(const ChunkAggregate& c) {
  json j;
  j["chunk_id"] = c.chunk_id;
  j["language"] = c.language;
  j["layer"] = c.layer;
  j["content_token_count"] = c.content_token_count;
  j["selection_counts"] = c.selection_counts;
  j["prob_sums"] = c.prob_sums;
  j["char_count"] = c.char_count;
  j["segment_count"] = c.segment_count;
  j["selection_entropy_sum"] = c.selection_entropy_sum;
  return j;
}

inline ChunkAggregate chunk_from_json(const json& j, std::size_t line) {
  if (!j.is_object()) throw TraceError("chunk row must be an object", "", line);
  if (j.contains("topk_experts"))
    throw TraceError("capture_mode mismatch: token record in chunk-aggregate trace", "topk_experts", line);
  ChunkAggregate c;
  c.chunk_id = detail::get_field<std::uint64_t>(j, "chunk_id", line);
  c.language = detail::get_field<std::string>(j, "language", line);
  c.layer = detail::get_field<int>(j, "layer", line);
  c.content_token_count = detail::get_field<std::uint64_t>(j, "content_token_count", line);
  c.selection_counts = detail::get_field<CountVector>(j, "selection_counts", line);
  c.prob_sums = detail::get_field<std::vector<double>>(j, "prob_sums", line);
  c.char_count = detail::get_optional<std::uint64_t>(j, "char_count", 0, line);
  c.segment_count = detail::get_optional<std::uint64_t>(j, "segment_count", 0, line);
  c.selection_entropy_sum = detail::get_optional<double>(j, "selection_entropy_sum", 0.0, line);
  return c;
}

// ---- reading ------------------------------------------------------------

// Single-pass sequential reader. Every record is validated against the
// header before it is returned.
class TraceReader {
 public:
  explicit TraceReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw TraceError("cannot open file '" + path.string() + "'");
    std::string first;
    if (!read_line(first)) throw TraceError("malformed header: empty file", "meta", 1);
    json head;
    bool single_line_doc = false;
    try {
      head = json::parse(first);
      single_line_doc = head.is_object() && head.contains("chunks");
    } catch (const nlohmann::json::parse_error&) {
      // Not a complete JSON line: a multi-line aggregate document or garbage.
    }
    if (!head.is_null() && !single_line_doc) {
      start_token_stream(head);
    } else {
      load_aggregate_document(first, head);
    }
  }

  const TraceMeta& meta() const noexcept { return meta_; }
  bool is_token_level() const noexcept { return token_level_; }
  std::size_t line() const noexcept { return line_; }

  std::optional<TraceRecord> next() {
    if (!token_level_) {
      if (chunk_pos_ >= chunk_rows_.size()) return std::nullopt;
      const std::size_t row = chunk_pos_++;
      auto c = chunk_from_json(chunk_rows_[row], 0);
      try {
        validate_chunk(c, meta_);
      } catch (const TraceError& e) {
        throw TraceError(e.rule() + " (chunk row " + std::to_string(row) + ")", e.field());
      }
      return c;
    }
    std::string text;
    while (true) {
      const std::size_t start = offset_;
      if (!read_line(text)) return std::nullopt;
      if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
      json j;
      try {
        j = json::parse(text);
      } catch (const nlohmann::json::parse_error&) {
        if (!last_line_terminated_)
          throw TraceError("unexpected end of stream", "", line_, start + text.size());
        throw TraceError("malformed record", "", line_);
      }
      auto r = token_from_json(j, line_);
      validate_token(r, meta_, line_);
      return r;
    }
  }

  template <typename F>
  void for_each(F&& f) {
    while (auto rec = next()) f(std::move(*rec));
  }

 private:
  bool read_line(std::string& out) {
    if (!std::getline(in_, out)) return false;
    ++line_;
    last_line_terminated_ = !in_.eof();
    offset_ += out.size() + (last_line_terminated_ ? 1 : 0);
    return true;
  }

  void start_token_stream(const json& head) {
    if (!head.is_object() || !head.contains("meta") || head.size() != 1)
      throw TraceError("malformed header: first line must be {\"meta\": {...}}", "meta", 1);
    meta_ = meta_from_json(head.at("meta"), 1);
    if (meta_.capture_mode == CaptureMode::chunk_aggregate)
      throw TraceError("capture_mode mismatch: chunk_aggregate header on a token-level trace", "capture_mode", 1);
    token_level_ = true;
  }

  void load_aggregate_document(const std::string& first, json head) {
    if (head.is_null()) {
      std::ostringstream rest;
      rest << first << (last_line_terminated_ ? "\n" : "") << in_.rdbuf();
      const std::string text = rest.str();
      try {
        head = json::parse(text);
      } catch (const nlohmann::json::parse_error& e) {
        if (e.byte >= text.size())
          throw TraceError("unexpected end of stream", "", 0, text.size());
        throw TraceError("malformed document", "", 0, e.byte == 0 ? 0 : e.byte - 1);
      }
    }
    if (!head.is_object() || !head.contains("meta"))
      throw TraceError("malformed header: missing meta", "meta");
    meta_ = meta_from_json(head.at("meta"), 0);
    if (meta_.capture_mode != CaptureMode::chunk_aggregate)
      throw TraceError("capture_mode mismatch: token-level header on a chunk-aggregate document", "capture_mode");
    auto it = head.find("chunks");
    if (it == head.end() || !it->is_array()) throw TraceError("missing chunks array", "chunks");
    chunk_rows_ = std::move(*it);
    token_level_ = false;
  }

  std::filesystem::path path_;
  std::ifstream in_;
  TraceMeta meta_;
  bool token_level_ = true;
  std::size_t line_ = 0;
  std::size_t offset_ = 0;
  bool last_line_terminated_ = true;
  json chunk_rows_;
  std::size_t chunk_pos_ = 0;
};

// Reads the whole trace into memory.
struct Trace {
  TraceMeta meta;
  std::vector<TraceRecord> records;
};

inline Trace read_trace(const std::filesystem::path& path) {
  TraceReader reader(path);
  Trace t{reader.meta(), {}};
  reader.for_each([&](TraceRecord r) { t.records.push_back(std::move(r)); });
  return t;
}

// ---- writing ------------------------------------------------------------

// Writes to `path` through a temporary file renamed into place on commit().
class AtomicFile {
 public:
  explicit AtomicFile(std::filesystem::path path)
      : path_(std::move(path)), tmp_(path_.string() + ".tmp"), out_(tmp_, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot write '" + tmp_.string() + "'");
  }
  AtomicFile(const AtomicFile&) = delete;
  AtomicFile& operator=(const AtomicFile&) = delete;
  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

  std::ostream& stream() { return out_; }

  std::uintmax_t commit() {
    out_.flush();
    if (!out_) throw Error("write failed for '" + tmp_.string() + "'");
    out_.close();
    std::filesystem::rename(tmp_, path_);
    committed_ = true;
    return std::filesystem::file_size(path_);
  }

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

inline void write_token_header(std::ostream& os, const TraceMeta& meta) {
  json head;
  head["meta"] = meta_to_json(meta);
  os << head.dump() << '\n';
}

inline void write_token_record(std::ostream& os, const TokenRouting& r) { os << token_to_json(r).dump() << '\n'; }

inline void write_aggregate_document(std::ostream& os, const TraceMeta& meta,
                                     const std::vector<ChunkAggregate>& chunks) {
  os << "{\"meta\":" << meta_to_json(meta).dump() << ",\n\"chunks\":[";
  for (std::size_t i = 0; i < chunks.size(); ++i)
    os << (i ? ",\n" : "\n") << chunk_to_json(chunks[i]).dump();
  os << "\n]}\n";
}

inline std::uintmax_t write_token_trace(const std::filesystem::path& path, const TraceMeta& meta,
                                        const std::vector<TokenRouting>& records) {
  AtomicFile f(path);
  write_token_header(f.stream(), meta);
  for (const auto& r : records) write_token_record(f.stream(), r);
  return f.commit();
}

inline std::uintmax_t write_aggregate_trace(const std::filesystem::path& path, const TraceMeta& meta,
                                            const std::vector<ChunkAggregate>& chunks) {
  AtomicFile f(path);
  write_aggregate_document(f.stream(), meta, chunks);
  return f.commit();
}

// ---- tokenization sidecar ----------------------------------------------

struct ChunkTextStats {
  std::uint64_t char_count = 0;
  std::uint64_t segment_count = 0;

  friend bool operator==(const ChunkTextStats&, const ChunkTextStats&) = default;
};

using ChunkKey = std::pair<std::string, std::uint64_t>;  // (language, chunk_id)
using ChunkTextStatsMap = std::map<ChunkKey, ChunkTextStats>;

inline std::filesystem::path default_sidecar_path(const std::filesystem::path& trace) {
  return trace.string() + ".tokstats.jsonl";
}

inline void write_sidecar(const std::filesystem::path& path, const ChunkTextStatsMap& stats) {
  AtomicFile f(path);
  for (const auto& [key, s] : stats) {
    json j;
    j["language"] = key.first;
    j["chunk_id"] = key.second;
    j["char_count"] = s.char_count;
    j["segment_count"] = s.segment_count;
    f.stream() << j.dump() << '\n';
  }
  f.commit();
}

inline ChunkTextStatsMap read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TraceError("cannot open sidecar '" + path.string() + "'");
  ChunkTextStatsMap out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      throw TraceError("malformed sidecar record", "", line);
    }
    ChunkKey key{detail::get_field<std::string>(j, "language", line),
                 detail::get_field<std::uint64_t>(j, "chunk_id", line)};
    out[key] = {detail::get_field<std::uint64_t>(j, "char_count", line),
                detail::get_field<std::uint64_t>(j, "segment_count", line)};
  }
  return out;
}

// ---- token -> chunk aggregation ----------------------------------------

struct TokenAggregationOptions {
  // Refuse top-K-only input instead of degrading.
  bool require_full_probs = false;
};

// Sufficient statistics of one (language, chunk_id, layer) cell.
class ChunkRowBuilder {
 public:
  ChunkRowBuilder() = default;
  ChunkRowBuilder(std::uint64_t chunk_id, std::string language, int layer, std::size_t num_experts)
      : sums_(num_experts) {
    row_.chunk_id = chunk_id;
    row_.language = std::move(language);
    row_.layer = layer;
    row_.selection_counts.assign(num_experts, 0);
  }

  // One content token. `full` may be empty for top-K-only observations.
  void add_content(std::span<const std::uint32_t> experts, std::span<const double> topk_probs,
                   std::span<const double> full) {
    ++row_.content_token_count;
    for (auto e : experts) ++row_.selection_counts[e];
    if (!full.empty()) {
      for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i].add(full[i]);
      entropy_.add(distribution_entropy(full));
      return;
    }
    double residual = 1.0;
    scratch_.assign(topk_probs.begin(), topk_probs.end());
    for (std::size_t j = 0; j < experts.size(); ++j) {
      sums_[experts[j]].add(topk_probs[j]);
      residual -= topk_probs[j];
    }
    // Lower bound: the unobserved mass is treated as a single outcome.
    if (residual > 0.0) scratch_.push_back(residual);
    entropy_.add(distribution_entropy(scratch_));
  }

  ChunkAggregate finish(const ChunkTextStatsMap& text_stats = {}) const {
    ChunkAggregate c = row_;
    c.prob_sums.resize(sums_.size());
    for (std::size_t i = 0; i < sums_.size(); ++i) c.prob_sums[i] = sums_[i].value();
    c.selection_entropy_sum = entropy_.value();
    if (auto s = text_stats.find({c.language, c.chunk_id}); s != text_stats.end()) {
      c.char_count = s->second.char_count;
      c.segment_count = s->second.segment_count;
    }
    return c;
  }

 private:
  ChunkAggregate row_;
  std::vector<CompensatedSum> sums_;
  CompensatedSum entropy_;
  std::vector<double> scratch_;
};

// Streaming grouping of token records by (language, chunk_id, layer).
// Only content tokens contribute; every group seen still yields a row.
class TokenAggregator {
 public:
  explicit TokenAggregator(TraceMeta meta, TokenAggregationOptions opts = {})
      : meta_(std::move(meta)), opts_(opts) {}

  void add(const TokenRouting& r) {
    if (!r.full_probs) {
      if (opts_.require_full_probs)
        throw DegradedModeError("analysis requires full probabilities but trace is top-K only (degraded mode)");
      lossy_ = true;
    }
    Key key{r.language, r.chunk_id, r.layer};
    auto it = groups_.find(key);
    if (it == groups_.end())
      it = groups_.emplace(key, ChunkRowBuilder(r.chunk_id, r.language, r.layer, meta_.num_experts)).first;
    if (!r.is_content) return;
    it->second.add_content(r.topk_experts, r.topk_probs,
                           r.full_probs ? std::span<const double>(*r.full_probs) : std::span<const double>{});
  }

  bool lossy() const noexcept { return lossy_; }

  // Rows sorted by (language, chunk_id, layer).
  std::vector<ChunkAggregate> finish(const ChunkTextStatsMap& text_stats = {}) {
    std::vector<ChunkAggregate> out;
    out.reserve(groups_.size());
    for (const auto& [key, g] : groups_) out.push_back(g.finish(text_stats));
    groups_.clear();
    return out;
  }

  TraceMeta aggregate_meta() const {
    TraceMeta m = meta_;
    m.capture_mode = CaptureMode::chunk_aggregate;
    m.prob_basis = lossy_ ? ProbBasis::topk_lossy : ProbBasis::full;
    return m;
  }

 private:
  using Key = std::tuple<std::string, std::uint64_t, int>;
  TraceMeta meta_;
  TokenAggregationOptions opts_;
  bool lossy_ = false;
  std::map<Key, ChunkRowBuilder> groups_;
};

struct AggregationResult {
  TraceMeta meta;  // chunk_aggregate header describing `chunks`
  std::vector<ChunkAggregate> chunks;
  bool lossy = false;
};

inline AggregationResult aggregate_tokens(const std::vector<TokenRouting>& records, const TraceMeta& meta,
                                          TokenAggregationOptions opts = {},
                                          const ChunkTextStatsMap& text_stats = {}) {
  TokenAggregator agg(meta, opts);
  for (const auto& r : records) agg.add(r);
  AggregationResult res;
  res.lossy = agg.lossy();
  res.meta = agg.aggregate_meta();
  res.chunks = agg.finish(text_stats);
  return res;
}

// Loads any trace file as chunk aggregates, aggregating token-level input on
// the fly. A sidecar next to a token-level trace is picked up automatically.
inline AggregationResult load_chunk_aggregates(const std::filesystem::path& path,
                                               TokenAggregationOptions opts = {},
                                               std::optional<std::filesystem::path> sidecar = std::nullopt) {
  TraceReader reader(path);
  AggregationResult res;
  if (reader.is_token_level()) {
    ChunkTextStatsMap stats;
    if (!sidecar && std::filesystem::exists(default_sidecar_path(path))) sidecar = default_sidecar_path(path);
    if (sidecar) stats = read_sidecar(*sidecar);
    TokenAggregator agg(reader.meta(), opts);
    reader.for_each([&](TraceRecord r) { agg.add(std::get<TokenRouting>(r)); });
    res.lossy = agg.lossy();
    res.meta = agg.aggregate_meta();
    res.chunks = agg.finish(stats);
  } else {
    res.meta = reader.meta();
    res.lossy = res.meta.prob_basis == ProbBasis::topk_lossy;
    if (res.lossy && opts.require_full_probs)
      throw DegradedModeError("analysis requires full probabilities but aggregate was built from top-K only");
    reader.for_each([&](TraceRecord r) { res.chunks.push_back(std::get<ChunkAggregate>(std::move(r))); });
  }
  return res;
}

struct ConversionSummary {
  std::size_t chunks = 0;   // distinct (language, chunk_id)
  std::size_t rows = 0;     // chunk x layer rows written
  std::uint64_t tokens = 0; // content tokens, counted once per chunk
  std::uintmax_t bytes = 0;
};

inline ConversionSummary convert_to_aggregate_file(const std::filesystem::path& token_trace,
                                                   const std::filesystem::path& out,
                                                   std::optional<std::filesystem::path> sidecar = std::nullopt) {
  TraceReader probe(token_trace);
  if (!probe.is_token_level()) throw TraceError("input is not a token-level trace", "capture_mode");
  auto res = load_chunk_aggregates(token_trace, {}, std::move(sidecar));
  ConversionSummary s;
  s.rows = res.chunks.size();
  std::map<ChunkKey, std::uint64_t> per_chunk;
  for (const auto& c : res.chunks) per_chunk.try_emplace({c.language, c.chunk_id}, c.content_token_count);
  s.chunks = per_chunk.size();
  for (const auto& [k, n] : per_chunk) s.tokens += n;
  s.bytes = write_aggregate_trace(out, res.meta, res.chunks);
  return s;
}

}  // namespace moediag
