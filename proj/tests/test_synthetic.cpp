#include <gtest/gtest.h>

#include <cmath>

#include "moediag/diagnostics.hpp"
#include "moediag/oracle.hpp"
#include "moediag/synthetic.hpp"
#include "test_util.hpp"

using namespace moediag;
using moediag::testing::TempDir;

namespace {

ScenarioSpec one_language(std::size_t n, std::size_t k, std::size_t tokens, RoutingLaw law = {}) {
  ScenarioSpec s;
  s.num_experts = n;
  s.top_k = k;
  s.num_layers = 1;
  s.languages = {"x"};
  s.chunks_per_language = 1;
  s.tokens_per_chunk = tokens;
  s.capture_mode = CaptureMode::chunk_aggregate;
  s.routing["x"].default_law = std::move(law);
  return s;
}

LayerLanguageProfile single_profile(const ScenarioSpec& s) {
  auto res = generate_aggregates(s);
  return build_profiles(res.meta, res.chunks).language(s.languages.front()).front();
}

}  // namespace

TEST(Oracle, HandComputedOneToFour) {
  const CountVector c{1, 2, 3, 4};
  const double h = -(0.1 * std::log2(0.1) + 0.2 * std::log2(0.2) + 0.3 * std::log2(0.3) + 0.4 * std::log2(0.4));
  EXPECT_NEAR(oracle::entropy(c), h, 1e-15);
  EXPECT_NEAR(oracle::entropy(c), 1.84644, 1e-5);
  EXPECT_EQ(oracle::gini(c), 0.25);
}

TEST(Oracle, UniformAndDegenerate) {
  auto u = oracle::metrics(CountVector(128, 9));
  EXPECT_EQ(u.entropy, 7.0);
  EXPECT_EQ(u.gini, 0.0);
  EXPECT_THROW(oracle::entropy(CountVector(4, 0)), MetricError);
  auto law = oracle::metrics(law_profile(RoutingLaw::concentrated(8), 128));
  EXPECT_NEAR(law.entropy, 3.0, 1e-15);
  EXPECT_NEAR(law.gini, 1.0 - 8.0 / 128.0, 1e-15);
}

TEST(Oracle, AgreesWithMetricsCore) {
  Rng rng(404);
  for (int i = 0; i < 1000; ++i) {
    auto c = moediag::testing::random_counts(rng, 1 + rng.below(128), 10000);
    EXPECT_NEAR(oracle::entropy(c), usage_entropy(c), 1e-9);
    EXPECT_NEAR(oracle::gini(c), gini(c), 1e-9);
  }
}

TEST(LawProfile, ClosedForms) {
  auto q = law_profile(RoutingLaw::concentrated(4, 126), 128);
  EXPECT_EQ(q[126], 0.25);
  EXPECT_EQ(q[127], 0.25);
  EXPECT_EQ(q[0], 0.25);
  EXPECT_EQ(q[1], 0.25);
  EXPECT_EQ(q[2], 0.0);
  auto z = law_profile(RoutingLaw::zipf(0.0), 8);
  for (double x : z) EXPECT_NEAR(x, 0.125, 1e-15);
  auto w = law_profile(RoutingLaw::explicit_weights({1, 3}), 2);
  EXPECT_EQ(w, (std::vector<double>{0.25, 0.75}));
  EXPECT_THROW(law_profile(RoutingLaw::dirichlet(1.0), 8), ConfigError);
}

TEST(Generator, UniformAnchor) {
  auto p = single_profile(one_language(128, 8, 100000));
  EXPECT_NEAR(usage_entropy(p.counts), 7.0, 0.02);
  EXPECT_LT(gini(p.counts), 0.05);
}

TEST(Generator, ConcentratedSingleExpert) {
  auto p = single_profile(one_language(128, 1, 2000, RoutingLaw::concentrated(1, 5)));
  EXPECT_EQ(usage_entropy(p.counts), 0.0);
  EXPECT_EQ(gini(p.counts), 127.0 / 128.0);
  EXPECT_EQ(p.counts[5], 2000u);
}

TEST(Generator, ConcentratedEightIsThreeBits) {
  // K=8 selects the whole support on every token.
  auto p = single_profile(one_language(128, 8, 5000, RoutingLaw::concentrated(8)));
  EXPECT_EQ(usage_entropy(p.counts), 3.0);
  // K=1 picks one of the 8 symmetric experts per token.
  auto p1 = single_profile(one_language(128, 1, 100000, RoutingLaw::concentrated(8)));
  EXPECT_NEAR(usage_entropy(p1.counts), 3.0, 0.02);
}

TEST(Generator, LawFidelityOfMeanProbabilities) {
  // Each token is Dirichlet(kappa q): E[p_i] = q_i, Var = q_i (1 - q_i) / (kappa + 1).
  const std::size_t n = 16, tokens = 100000;
  for (const auto& law : {RoutingLaw::zipf(1.0), RoutingLaw::explicit_weights({5, 4, 3, 2, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1}),
                          RoutingLaw::uniform()}) {
    auto s = one_language(n, 2, tokens, law);
    s.seed = 12;
    auto p = single_profile(s);
    const auto q = law_profile(law, n);
    const double kappa = s.kappa();
    double chi2 = 0;
    std::size_t dof = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (q[i] == 0.0) {
        EXPECT_EQ(p.mean_prob[i], 0.0);
        EXPECT_EQ(p.counts[i], 0u);
        continue;
      }
      const double var = q[i] * (1 - q[i]) / ((kappa + 1) * static_cast<double>(tokens));
      const double z = (p.mean_prob[i] - q[i]) / std::sqrt(var);
      EXPECT_LT(std::fabs(z), 6.0) << i;
      chi2 += z * z;
      ++dof;
    }
    // Components are negatively correlated, so the sum sits below a chi-square with dof degrees.
    EXPECT_LT(chi2, static_cast<double>(dof) + 6.0 * std::sqrt(2.0 * static_cast<double>(dof)));
  }
}

TEST(Generator, DirichletLawProfilesFixedPerLayer) {
  auto s = one_language(64, 2, 4000, RoutingLaw::dirichlet(0.2));
  s.num_layers = 2;
  s.chunks_per_language = 2;
  auto res = generate_aggregates(s);
  auto t = build_profiles(res.meta, res.chunks);
  const auto& layers = t.language("x");
  // Sparse profile: well below the uniform 6 bits, and different per layer.
  EXPECT_LT(usage_entropy(layers[0].counts), 5.5);
  EXPECT_NE(layers[0].counts, layers[1].counts);
  // Both chunks of a layer share the profile.
  const auto& pc = layers[0].per_chunk;
  ASSERT_EQ(pc.size(), 2u);
  EXPECT_NEAR(pc[0].usage_entropy, pc[1].usage_entropy, 0.2);
}

TEST(Generator, ReproducibleBytes) {
  TempDir dir("synth_repro");
  ScenarioSpec s;
  s.num_experts = 32;
  s.top_k = 4;
  s.num_layers = 3;
  s.chunks_per_language = 3;
  s.tokens_per_chunk = 20;
  s.special_tokens_per_chunk = 3;
  s.seed = 99;
  s.routing["he"].default_law = RoutingLaw::dirichlet(0.5);
  for (auto mode : {CaptureMode::token_full_probs, CaptureMode::token_topk_only, CaptureMode::chunk_aggregate}) {
    s.capture_mode = mode;
    generate_trace(s, dir / "a");
    generate_trace(s, dir / "b");
    EXPECT_EQ(moediag::testing::slurp(dir / "a"), moediag::testing::slurp(dir / "b")) << to_string(mode);
    auto other = s;
    other.seed = 100;
    generate_trace(other, dir / "c");
    EXPECT_NE(moediag::testing::slurp(dir / "a"), moediag::testing::slurp(dir / "c"));
  }
}

TEST(Generator, TokenAndAggregateModesAgree) {
  TempDir dir("synth_modes");
  ScenarioSpec s;
  s.num_experts = 32;
  s.top_k = 4;
  s.num_layers = 3;
  s.chunks_per_language = 3;
  s.tokens_per_chunk = 40;
  s.languages = {"he", "en"};  // non-lexical order on purpose
  s.routing["he"].default_law = RoutingLaw::zipf(0.8);
  for (auto mode : {CaptureMode::token_full_probs, CaptureMode::token_topk_only}) {
    s.capture_mode = mode;
    generate_trace(s, dir / "t.jsonl");
    auto from_tokens = load_chunk_aggregates(dir / "t.jsonl");
    auto direct = generate_aggregates(s);
    EXPECT_EQ(from_tokens.meta, direct.meta);
    EXPECT_EQ(from_tokens.lossy, direct.lossy);
    EXPECT_EQ(from_tokens.chunks, direct.chunks);
  }
}

TEST(Generator, SpecialTokensLeaveProfilesUnchanged) {
  ScenarioSpec s;
  s.num_experts = 16;
  s.top_k = 2;
  s.num_layers = 2;
  s.chunks_per_language = 2;
  s.tokens_per_chunk = 30;
  std::vector<TokenRouting> plain, padded;
  generate_tokens(s, [&](const TokenRouting& r) { plain.push_back(r); });
  s.special_tokens_per_chunk = 5;
  generate_tokens(s, [&](const TokenRouting& r) { padded.push_back(r); });
  // Shape: (content + special) tokens x layers records.
  EXPECT_EQ(plain.size(), 2u * 2 * 30 * 2);
  EXPECT_EQ(padded.size(), 2u * 2 * 35 * 2);
  std::size_t content = 0;
  for (const auto& r : padded) content += r.is_content;
  EXPECT_EQ(content, plain.size());
  const auto meta = scenario_meta(s);
  auto a = aggregate_tokens(plain, meta);
  auto b = aggregate_tokens(padded, meta);
  EXPECT_EQ(a.chunks, b.chunks);
}

TEST(Generator, EveryRecordValid) {
  ScenarioSpec s;
  s.num_experts = 24;
  s.top_k = 3;
  s.num_layers = 2;
  s.chunks_per_language = 2;
  s.tokens_per_chunk = 50;
  s.routing["en"].default_law = RoutingLaw::explicit_weights(std::vector<double>(24, 0.0));
  s.routing["en"].default_law.weights[3] = 1.0;
  s.routing["en"].default_law.weights[7] = 2.0;
  // Only two nonzero weights for K=3: the third pick is a zero-probability expert, lowest id first.
  const auto meta = scenario_meta(s);
  generate_tokens(s, [&](const TokenRouting& r) {
    EXPECT_NO_THROW(validate_token(r, meta));
    if (r.language == "en") {
      ASSERT_EQ(r.topk_probs.size(), 3u);
      EXPECT_EQ(r.topk_probs[2], 0.0);
    }
  });
}

TEST(Generator, InvalidSpecs) {
  ScenarioSpec s;
  s.top_k = 0;
  EXPECT_THROW(validate_spec(s), ConfigError);
  s = {};
  s.routing["en"].default_law = RoutingLaw::concentrated(200);
  EXPECT_THROW(validate_spec(s), ConfigError);
  s = {};
  s.routing["en"].default_law = RoutingLaw::dirichlet(0.0);
  EXPECT_THROW(validate_spec(s), ConfigError);
  s = {};
  s.routing["en"].default_law = RoutingLaw::zipf(-1.0);
  EXPECT_THROW(validate_spec(s), ConfigError);
  s = {};
  s.routing["fr"].default_law = RoutingLaw::uniform();
  EXPECT_THROW(validate_spec(s), ConfigError);
}

TEST(CollapseScenario, ZeroFractionHasNoFlags) {
  ScenarioSpec s;
  s.chunks_per_language = 4;
  s.tokens_per_chunk = 1500;
  s.capture_mode = CaptureMode::chunk_aggregate;
  auto spec = gen_collapse_scenario(s, 0.0, "he");
  EXPECT_TRUE(spec.routing["he"].layers.empty());
  auto res = generate_aggregates(spec);
  auto t = build_profiles(res.meta, res.chunks);
  auto r = detect_collapse(t.language("he"), t.language("en"));
  EXPECT_FALSE(r.collapsed);
  EXPECT_TRUE(r.flagged_layers().empty());
}

TEST(CollapseScenario, PlantsExactlyTheDeepWindow) {
  ScenarioSpec s;
  auto spec = gen_collapse_scenario(s, 0.2, "he");
  ASSERT_EQ(spec.routing["he"].layers.size(), 2u);
  EXPECT_EQ(spec.routing["he"].layers.count(8), 1u);
  EXPECT_EQ(spec.routing["he"].layers.count(9), 1u);
  EXPECT_EQ(spec.routing.count("en"), 0u);
  auto both = gen_collapse_scenario(s, 0.3, "he", 8, {"en"});
  EXPECT_EQ(both.routing["en"].layers.size(), 3u);
  EXPECT_THROW(gen_collapse_scenario(s, 1.5, "he"), ConfigError);
}

TEST(ScenarioFile, RoundTrip) {
  TempDir dir("synth_file");
  ScenarioSpec s;
  s.num_experts = 64;
  s.first_layer = 3;
  s.seed = 5;
  s.routing["he"].default_law = RoutingLaw::zipf(1.1);
  s.routing["he"].layers[5] = RoutingLaw::concentrated(4, 2);
  s.routing["en"].default_law = RoutingLaw::dirichlet(0.7);
  {
    std::ofstream f(dir / "s.json");
    f << spec_to_json(s).dump(2);
  }
  auto back = load_spec(dir / "s.json");
  EXPECT_EQ(spec_to_json(back), spec_to_json(s));
  {
    std::ofstream f(dir / "bad.json");
    f << "{\"routing\":{\"he\":{\"default\":{\"law\":\"cauchy\"}}}}";
  }
  EXPECT_THROW(load_spec(dir / "bad.json"), ConfigError);
}
