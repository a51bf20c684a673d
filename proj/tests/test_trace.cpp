#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "moediag/synthetic.hpp"
#include "moediag/trace_io.hpp"
#include "test_util.hpp"

using namespace moediag;
using moediag::testing::TempDir;

namespace {

TraceMeta make_meta(std::size_t n, std::size_t k, CaptureMode mode = CaptureMode::token_full_probs) {
  TraceMeta m;
  m.model_id = "test";
  m.num_experts = n;
  m.top_k = k;
  m.moe_layers = {0, 1};
  m.languages = {"en", "he"};
  m.capture_mode = mode;
  m.tokenizer_id = "tok";
  m.created_at = "2026-01-01T00:00:00Z";
  return m;
}

TokenRouting token_from_full(std::vector<double> full, std::size_t k, std::uint64_t chunk = 0,
                             std::string lang = "en", int layer = 0, bool content = true) {
  TokenRouting r;
  r.chunk_id = chunk;
  r.language = std::move(lang);
  r.layer = layer;
  r.is_content = content;
  r.topk_experts = topk_from_full(full, k);
  for (auto e : r.topk_experts) r.topk_probs.push_back(full[e]);
  r.full_probs = std::move(full);
  return r;
}

std::vector<double> descending_probs(std::size_t n) {
  std::vector<double> p(n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += p[i] = static_cast<double>(n - i);
  for (auto& x : p) x /= total;
  return p;
}

void expect_trace_error(const std::filesystem::path& path, const std::string& needle) {
  try {
    read_trace(path);
    ADD_FAILURE() << "expected TraceError containing '" << needle << "'";
  } catch (const TraceError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(ReadTrace, MinimalWellFormedFile) {
  TempDir dir("trace_min");
  const auto meta = make_meta(128, 8);
  write_token_trace(dir / "t.jsonl", meta, {token_from_full(descending_probs(128), 8)});
  auto t = read_trace(dir / "t.jsonl");
  EXPECT_EQ(t.meta, meta);
  ASSERT_EQ(t.records.size(), 1u);
  const auto& r = std::get<TokenRouting>(t.records[0]);
  EXPECT_EQ(r.topk_experts, (std::vector<std::uint32_t>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(ReadTrace, DuplicateExpertIdNamed) {
  TempDir dir("trace_dup");
  auto meta = make_meta(8, 2, CaptureMode::token_topk_only);
  TokenRouting r;
  r.language = "en";
  r.topk_experts = {3, 3};
  r.topk_probs = {0.2, 0.1};
  write_token_trace(dir / "t.jsonl", meta, {r});
  expect_trace_error(dir / "t.jsonl", "duplicate expert id 3");
  expect_trace_error(dir / "t.jsonl", "line 2");
}

TEST(ReadTrace, ScaledMassRejected) {
  TempDir dir("trace_mass");
  auto full = std::vector<double>(4, 0.25);
  auto r = token_from_full(full, 2);
  for (auto& p : *r.full_probs) p *= 0.9;
  for (auto& p : r.topk_probs) p *= 0.9;
  // Direct summation confirms the constructed mass.
  EXPECT_NEAR(std::accumulate(r.full_probs->begin(), r.full_probs->end(), 0.0), 0.9, 1e-15);
  write_token_trace(dir / "t.jsonl", make_meta(4, 2), {r});
  expect_trace_error(dir / "t.jsonl", "probability mass out of tolerance");
}

TEST(ReadTrace, TopkMustMatchFullProbs) {
  TempDir dir("trace_topk");
  auto r = token_from_full(descending_probs(4), 2);
  r.topk_experts = {0, 2};
  r.topk_probs = {(*r.full_probs)[0], (*r.full_probs)[2]};
  write_token_trace(dir / "t.jsonl", make_meta(4, 2), {r});
  expect_trace_error(dir / "t.jsonl", "K largest");
}

TEST(ReadTrace, TieBreakToLowerId) {
  const std::vector<double> full{0.25, 0.25, 0.25, 0.25};
  EXPECT_EQ(topk_from_full(full, 2), (std::vector<std::uint32_t>{0, 1}));
}

TEST(ReadTrace, UndeclaredLayerAndLanguage) {
  TempDir dir("trace_decl");
  auto a = token_from_full(std::vector<double>(4, 0.25), 1, 0, "en", 7);
  write_token_trace(dir / "a.jsonl", make_meta(4, 1), {a});
  expect_trace_error(dir / "a.jsonl", "layer 7 not in moe_layers");
  auto b = token_from_full(std::vector<double>(4, 0.25), 1, 0, "fr", 0);
  write_token_trace(dir / "b.jsonl", make_meta(4, 1), {b});
  expect_trace_error(dir / "b.jsonl", "language 'fr' not declared");
}

TEST(ReadTrace, CaptureModeMismatch) {
  TempDir dir("trace_mode");
  // Full probabilities inside a top-K-only trace.
  write_token_trace(dir / "a.jsonl", make_meta(4, 1, CaptureMode::token_topk_only),
                    {token_from_full(std::vector<double>(4, 0.25), 1)});
  expect_trace_error(dir / "a.jsonl", "forbids full_probs");
  // Chunk row inside a token-level trace.
  {
    std::ofstream f(dir / "b.jsonl");
    write_token_header(f, make_meta(4, 1));
    ChunkAggregate c;
    c.language = "en";
    c.selection_counts = {1, 0, 0, 0};
    c.prob_sums = {1, 0, 0, 0};
    c.content_token_count = 1;
    f << chunk_to_json(c).dump() << '\n';
  }
  expect_trace_error(dir / "b.jsonl", "capture_mode mismatch");
  // Token-level header on an aggregate document.
  {
    std::ofstream f(dir / "c.json");
    write_aggregate_document(f, make_meta(4, 1), {});
  }
  expect_trace_error(dir / "c.json", "capture_mode mismatch");
}

TEST(ReadTrace, MalformedHeader) {
  TempDir dir("trace_hdr");
  {
    std::ofstream f(dir / "a.jsonl");
    f << "{\"chunk_id\":0}\n";
  }
  expect_trace_error(dir / "a.jsonl", "malformed header");
  {
    std::ofstream f(dir / "b.jsonl");
  }
  expect_trace_error(dir / "b.jsonl", "malformed header");
  {
    std::ofstream f(dir / "c.jsonl");
    f << "{\"meta\":{\"num_experts\":4}}\n";
  }
  expect_trace_error(dir / "c.jsonl", "top_k");
}

TEST(ReadTrace, TruncatedTokenTraceReportsByteOffset) {
  TempDir dir("trace_trunc");
  ScenarioSpec s;
  s.num_experts = 16;
  s.top_k = 2;
  s.num_layers = 2;
  s.chunks_per_language = 2;
  s.tokens_per_chunk = 5;
  generate_trace(s, dir / "t.jsonl");
  const auto text = moediag::testing::slurp(dir / "t.jsonl");
  const std::size_t cut = text.size() - 40;
  {
    std::ofstream f(dir / "cut.jsonl", std::ios::binary);
    f << text.substr(0, cut);
  }
  try {
    read_trace(dir / "cut.jsonl");
    FAIL() << "truncated trace accepted";
  } catch (const TraceError& e) {
    EXPECT_EQ(e.rule(), "unexpected end of stream");
    EXPECT_EQ(e.offset(), cut);
    EXPECT_NE(std::string(e.what()).find("byte " + std::to_string(cut)), std::string::npos);
  }
}

TEST(ReadTrace, TruncatedAggregateDocumentReportsByteOffset) {
  TempDir dir("trace_trunc_agg");
  ScenarioSpec s;
  s.num_experts = 8;
  s.top_k = 2;
  s.num_layers = 2;
  s.chunks_per_language = 3;
  s.tokens_per_chunk = 5;
  s.capture_mode = CaptureMode::chunk_aggregate;
  generate_trace(s, dir / "a.json");
  const auto text = moediag::testing::slurp(dir / "a.json");
  const std::size_t cut = text.size() / 2;
  {
    std::ofstream f(dir / "cut.json", std::ios::binary);
    f << text.substr(0, cut);
  }
  try {
    read_trace(dir / "cut.json");
    FAIL() << "truncated document accepted";
  } catch (const TraceError& e) {
    EXPECT_EQ(e.rule(), "unexpected end of stream");
    EXPECT_EQ(e.offset(), cut);
  }
}

TEST(ReadTrace, ChunkInvariants) {
  const auto meta = [] {
    auto m = make_meta(4, 2, CaptureMode::chunk_aggregate);
    return m;
  }();
  ChunkAggregate c;
  c.language = "he";
  c.layer = 1;
  c.content_token_count = 2;
  c.selection_counts = {2, 1, 1, 0};
  c.prob_sums = {1.0, 0.5, 0.5, 0.0};
  EXPECT_NO_THROW(validate_chunk(c, meta));
  auto bad = c;
  bad.selection_counts = {2, 1, 0, 0};
  EXPECT_THROW(validate_chunk(bad, meta), TraceError);
  bad = c;
  bad.selection_counts = {3, 1, 0, 0};
  EXPECT_THROW(validate_chunk(bad, meta), TraceError);
  bad = c;
  bad.prob_sums = {1.0, 0.5, 0.49, 0.0};
  EXPECT_THROW(validate_chunk(bad, meta), TraceError);
  auto lossy = meta;
  lossy.prob_basis = ProbBasis::topk_lossy;
  EXPECT_NO_THROW(validate_chunk(bad, lossy));
}

TEST(TraceRoundTrip, TokenRecordsBitExact) {
  TempDir dir("trace_rt");
  Rng rng(17);
  const auto meta = make_meta(16, 3);
  std::vector<TokenRouting> recs;
  for (int i = 0; i < 300; ++i) {
    std::vector<double> full(16);
    double total = 0;
    for (auto& x : full) total += x = rng.exponential();
    for (auto& x : full) x /= total;
    auto r = token_from_full(full, 3, rng.below(5), rng.below(2) ? "en" : "he", static_cast<int>(rng.below(2)),
                             rng.uniform() < 0.9);
    r.token_index = static_cast<std::uint64_t>(i);
    recs.push_back(std::move(r));
  }
  write_token_trace(dir / "t.jsonl", meta, recs);
  auto t = read_trace(dir / "t.jsonl");
  ASSERT_EQ(t.records.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) EXPECT_EQ(std::get<TokenRouting>(t.records[i]), recs[i]);
  // Second write of the read records gives identical text.
  std::vector<TokenRouting> again;
  for (auto& r : t.records) again.push_back(std::get<TokenRouting>(r));
  write_token_trace(dir / "t2.jsonl", t.meta, again);
  EXPECT_EQ(moediag::testing::slurp(dir / "t.jsonl"), moediag::testing::slurp(dir / "t2.jsonl"));
}

TEST(TraceRoundTrip, ChunkRowsBitExact) {
  TempDir dir("trace_rt_agg");
  ScenarioSpec s;
  s.num_experts = 32;
  s.top_k = 4;
  s.num_layers = 3;
  s.chunks_per_language = 4;
  s.tokens_per_chunk = 20;
  s.seed = 5;
  auto res = generate_aggregates(s);
  write_aggregate_trace(dir / "a.json", res.meta, res.chunks);
  auto t = read_trace(dir / "a.json");
  EXPECT_EQ(t.meta, res.meta);
  ASSERT_EQ(t.records.size(), res.chunks.size());
  for (std::size_t i = 0; i < res.chunks.size(); ++i) EXPECT_EQ(std::get<ChunkAggregate>(t.records[i]), res.chunks[i]);
}

TEST(AggregateTokens, HandCountedSelection) {
  auto meta = make_meta(4, 2, CaptureMode::token_topk_only);
  TokenRouting a, b;
  a.language = b.language = "en";
  a.topk_experts = {0, 1};
  a.topk_probs = {0.5, 0.3};
  b.topk_experts = {1, 2};
  b.topk_probs = {0.6, 0.2};
  auto res = aggregate_tokens({a, b}, meta);
  ASSERT_EQ(res.chunks.size(), 1u);
  EXPECT_EQ(res.chunks[0].selection_counts, (CountVector{1, 2, 1, 0}));
  EXPECT_EQ(res.chunks[0].content_token_count, 2u);
  EXPECT_TRUE(res.lossy);
  EXPECT_EQ(res.meta.prob_basis, ProbBasis::topk_lossy);
  EXPECT_NEAR(res.chunks[0].prob_sums[1], 0.9, 1e-15);
  EXPECT_EQ(res.chunks[0].prob_sums[3], 0.0);
}

TEST(AggregateTokens, NonContentExcluded) {
  const auto meta = make_meta(4, 1);
  auto content = token_from_full(descending_probs(4), 1);
  auto special = token_from_full(std::vector<double>{0, 0, 0, 1}, 1, 0, "en", 0, false);
  auto res = aggregate_tokens({content, special}, meta);
  ASSERT_EQ(res.chunks.size(), 1u);
  EXPECT_EQ(res.chunks[0].content_token_count, 1u);
  EXPECT_EQ(res.chunks[0].selection_counts, (CountVector{1, 0, 0, 0}));
  EXPECT_EQ(res.chunks[0].prob_sums[3], 0.1);
}

TEST(AggregateTokens, UniformFullProbs) {
  auto res = aggregate_tokens({token_from_full(std::vector<double>(4, 0.25), 2)}, make_meta(4, 2));
  EXPECT_EQ(res.chunks[0].prob_sums, (std::vector<double>{0.25, 0.25, 0.25, 0.25}));
  EXPECT_EQ(res.chunks[0].selection_entropy_sum, 2.0);
  EXPECT_FALSE(res.lossy);
}

TEST(AggregateTokens, TopkOnlyRefusedWhenFullRequired) {
  auto meta = make_meta(4, 1, CaptureMode::token_topk_only);
  TokenRouting r;
  r.language = "en";
  r.topk_experts = {2};
  r.topk_probs = {0.7};
  EXPECT_THROW(aggregate_tokens({r}, meta, {.require_full_probs = true}), DegradedModeError);
  // Entropy lower bound lumps the unobserved mass: H(0.7, 0.3).
  auto res = aggregate_tokens({r}, meta);
  EXPECT_NEAR(res.chunks[0].selection_entropy_sum, -(0.7 * std::log2(0.7) + 0.3 * std::log2(0.3)), 1e-12);
}

TEST(ConvertToAggregate, EmptyTrace) {
  TempDir dir("conv_empty");
  write_token_trace(dir / "t.jsonl", make_meta(8, 2), {});
  auto s = convert_to_aggregate_file(dir / "t.jsonl", dir / "a.json");
  EXPECT_EQ(s.chunks, 0u);
  EXPECT_EQ(s.tokens, 0u);
  EXPECT_GT(s.bytes, 0u);
  auto t = read_trace(dir / "a.json");
  EXPECT_EQ(t.meta.capture_mode, CaptureMode::chunk_aggregate);
  EXPECT_TRUE(t.records.empty());
}

TEST(ConvertToAggregate, TenChunkRecountMatches) {
  TempDir dir("conv_recount");
  ScenarioSpec s;
  s.num_experts = 32;
  s.top_k = 4;
  s.num_layers = 3;
  s.chunks_per_language = 5;  // 10 chunks over two languages
  s.tokens_per_chunk = 30;
  s.special_tokens_per_chunk = 2;
  s.seed = 3;
  generate_trace(s, dir / "t.jsonl");
  auto summary = convert_to_aggregate_file(dir / "t.jsonl", dir / "a.json");
  EXPECT_EQ(summary.chunks, 10u);
  EXPECT_EQ(summary.tokens, 300u);
  EXPECT_EQ(summary.rows, 30u);

  // Independent recount straight from the JSON lines.
  std::map<std::pair<std::string, int>, CountVector> recount;
  {
    std::ifstream in(dir / "t.jsonl");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      auto j = nlohmann::json::parse(line);
      if (!j["is_content"].get<bool>()) continue;
      auto& v = recount[{j["language"].get<std::string>(), j["layer"].get<int>()}];
      v.resize(32);
      for (auto e : j["topk_experts"]) ++v[e.get<std::size_t>()];
    }
  }
  std::map<std::pair<std::string, int>, CountVector> converted;
  auto t = read_trace(dir / "a.json");
  for (auto& r : t.records) {
    const auto& c = std::get<ChunkAggregate>(r);
    auto& v = converted[{c.language, c.layer}];
    v.resize(32);
    for (std::size_t i = 0; i < 32; ++i) v[i] += c.selection_counts[i];
    EXPECT_EQ(c.char_count, 120u);
    EXPECT_EQ(c.segment_count, 24u);
  }
  EXPECT_EQ(converted, recount);
}

TEST(ConvertToAggregate, LanguagesNeverMerged) {
  const auto meta = make_meta(4, 1);
  auto en = token_from_full(descending_probs(4), 1, 7, "en", 0);
  auto he = token_from_full(descending_probs(4), 1, 7, "he", 0);
  auto res = aggregate_tokens({en, he, en}, meta);
  ASSERT_EQ(res.chunks.size(), 2u);
  EXPECT_EQ(res.chunks[0].language, "en");
  EXPECT_EQ(res.chunks[0].content_token_count, 2u);
  EXPECT_EQ(res.chunks[1].language, "he");
  EXPECT_EQ(res.chunks[1].content_token_count, 1u);
}

TEST(ConvertToAggregate, OrderedByLanguageChunkLayer) {
  const auto meta = make_meta(4, 1);
  std::vector<TokenRouting> recs{token_from_full(descending_probs(4), 1, 2, "he", 1),
                                 token_from_full(descending_probs(4), 1, 1, "he", 0),
                                 token_from_full(descending_probs(4), 1, 9, "en", 1),
                                 token_from_full(descending_probs(4), 1, 1, "he", 1)};
  auto res = aggregate_tokens(recs, meta);
  std::vector<std::tuple<std::string, std::uint64_t, int>> keys;
  for (auto& c : res.chunks) keys.emplace_back(c.language, c.chunk_id, c.layer);
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  EXPECT_EQ(keys.size(), 4u);
}

TEST(Sidecar, RoundTripAndAutoDetect) {
  TempDir dir("sidecar");
  ChunkTextStatsMap m;
  m[{"en", 0}] = {400, 80};
  m[{"he", 3}] = {123, 45};
  write_sidecar(dir / "s.jsonl", m);
  EXPECT_EQ(read_sidecar(dir / "s.jsonl"), m);

  write_token_trace(dir / "t.jsonl", make_meta(4, 1), {token_from_full(descending_probs(4), 1, 0, "en")});
  write_sidecar(default_sidecar_path(dir / "t.jsonl"), m);
  auto res = load_chunk_aggregates(dir / "t.jsonl");
  ASSERT_EQ(res.chunks.size(), 1u);
  EXPECT_EQ(res.chunks[0].char_count, 400u);
  EXPECT_EQ(res.chunks[0].segment_count, 80u);
}
