// moediag: routing diagnostics over captured MoE traces.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moediag/moediag.hpp"

namespace fs = std::filesystem;
using namespace moediag;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kValidation = 2, kInfeasible = 3 };

EmitFlags parse_emit(const std::vector<std::string>& items) {
  if (items.empty()) return {};
  EmitFlags e{false, false, false, false, false};
  for (const auto& it : items) {
    if (it == "layer_csv") e.layer_csv = true;
    else if (it == "summary") e.summary = true;
    else if (it == "gaps") e.gaps = true;
    else if (it == "categorization") e.categorization = true;
    else if (it == "controls") e.controls = true;
    else if (it == "all") e = {};
    else throw ConfigError("unknown emit flag '" + it + "'");
  }
  return e;
}

int run_validate(const fs::path& path) {
  TraceReader reader(path);
  std::size_t records = 0;
  std::map<std::string, std::size_t> per_language;
  reader.for_each([&](TraceRecord r) {
    ++records;
    std::visit([&](const auto& x) { ++per_language[x.language]; }, r);
  });
  const auto& m = reader.meta();
  std::cout << "ok\n"
            << "format: " << (reader.is_token_level() ? "token" : "chunk_aggregate") << "\n"
            << "capture_mode: " << to_string(m.capture_mode) << "\n"
            << "num_experts: " << m.num_experts << "\ntop_k: " << m.top_k << "\nmoe_layers: " << m.moe_layers.size()
            << "\nrecords: " << records << "\n";
  for (const auto& [lang, n] : per_language) std::cout << "records[" << lang << "]: " << n << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expert-routing diagnostics for Mixture-of-Experts traces"};
  app.require_subcommand(1);

  // analyze
  auto* analyze_cmd = app.add_subcommand("analyze", "Analyze one or more trace files");
  std::vector<std::string> trace_args;
  std::string ref = "en";
  std::vector<std::string> targets;
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> emit_items;
  std::optional<double> deep_fraction, min_drop_bits, active_min_share;
  std::optional<std::vector<int>> baseline_range;
  std::optional<bool> require_sd;
  std::optional<std::vector<double>> lsi_thresholds;
  std::optional<std::size_t> split_trials;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> lsi_averaging;
  bool require_full = false;
  analyze_cmd->add_option("--trace,traces", trace_args, "Trace file, or VARIANT=PATH (repeatable)")->required();
  analyze_cmd->add_option("--ref,--ref-language,--ref_language", ref, "Reference language")->capture_default_str();
  analyze_cmd->add_option("--target,--target-language,--target_languages", targets, "Target language(s)");
  analyze_cmd->add_option("--config", config_path, "JSON file with diagnostics configuration keys");
  analyze_cmd->add_option("--out,--output-dir,--out_dir", out_dir, "Output directory")->required();
  analyze_cmd->add_option("--emit", emit_items, "layer_csv,summary,gaps,categorization,controls")->delimiter(',');
  analyze_cmd->add_option("--deep-fraction,--deep_fraction", deep_fraction);
  analyze_cmd->add_option("--baseline-range,--baseline_range", baseline_range, "FIRST LAST layer indices")->expected(2);
  analyze_cmd->add_option("--min-drop-bits,--min_drop_bits", min_drop_bits);
  analyze_cmd->add_option("--require-sd,--require_sd", require_sd);
  analyze_cmd->add_option("--lsi-thresholds,--lsi_thresholds", lsi_thresholds)->delimiter(',');
  analyze_cmd->add_option("--lsi-averaging,--lsi_averaging", lsi_averaging, "mean_of_layers | of_layer_means");
  analyze_cmd->add_option("--split-trials,--split_trials", split_trials);
  analyze_cmd->add_option("--seed", seed);
  analyze_cmd->add_option("--active-min-share,--active_min_share", active_min_share);
  analyze_cmd->add_flag("--require-full-probs,--require_full_probs", require_full,
                        "Fail (exit 3) instead of degrading on top-K-only traces");

  // compare
  auto* compare_cmd = app.add_subcommand("compare", "Per-layer deltas between two reports (b - a)");
  std::string report_a, report_b, compare_out;
  std::size_t variant_a = 0, variant_b = 0;
  compare_cmd->add_option("report_a", report_a)->required();
  compare_cmd->add_option("report_b", report_b)->required();
  compare_cmd->add_option("--out", compare_out, "Output directory")->required();
  compare_cmd->add_option("--variant-a", variant_a, "Variant index in report_a")->capture_default_str();
  compare_cmd->add_option("--variant-b", variant_b, "Variant index in report_b")->capture_default_str();

  // validate
  auto* validate_cmd = app.add_subcommand("validate", "Full invariant scan of a trace file");
  std::string validate_path;
  validate_cmd->add_option("trace", validate_path)->required();

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic trace from a scenario file");
  std::string spec_path, synth_out, dump_spec;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::string> synth_mode;
  std::optional<double> collapse_fraction;
  std::string collapse_target;
  std::size_t collapse_m = 8;
  std::vector<std::string> collapse_also;
  synth_cmd->add_option("--spec", spec_path, "Scenario JSON (defaults used when omitted)");
  synth_cmd->add_option("--out", synth_out, "Output trace path");
  synth_cmd->add_option("--seed", synth_seed, "Override the scenario seed");
  synth_cmd->add_option("--capture-mode,--capture_mode", synth_mode,
                        "token_full_probs | token_topk_only | chunk_aggregate");
  synth_cmd->add_option("--collapse-deep-fraction", collapse_fraction, "Plant a deep-layer collapse");
  synth_cmd->add_option("--collapse-target", collapse_target, "Language receiving the planted collapse");
  synth_cmd->add_option("--collapse-m", collapse_m, "Experts in the collapsed support")->capture_default_str();
  synth_cmd->add_option("--collapse-also", collapse_also, "Additional collapsing languages");
  synth_cmd->add_option("--dump-spec", dump_spec, "Write the effective scenario JSON here");

  // aggregate
  auto* aggregate_cmd = app.add_subcommand("aggregate", "Convert a token-level trace to chunk aggregates");
  std::string agg_in, agg_out, agg_sidecar;
  aggregate_cmd->add_option("input", agg_in)->required();
  aggregate_cmd->add_option("output", agg_out)->required();
  aggregate_cmd->add_option("--sidecar", agg_sidecar, "Tokenization sidecar (default: INPUT.tokstats.jsonl)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*analyze_cmd) {
      AnalysisConfig cfg;
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("cannot open config '" + config_path + "'");
        nlohmann::ordered_json j;
        try {
          j = nlohmann::ordered_json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
          throw ConfigError(std::string("config is not valid JSON: ") + e.what());
        }
        apply_config_json(cfg, j);
      }
      if (analyze_cmd->count("--ref")) cfg.ref_language = ref;
      if (!targets.empty()) cfg.target_languages = targets;
      if (deep_fraction) cfg.collapse.deep_fraction = *deep_fraction;
      if (baseline_range) cfg.collapse.baseline_range = std::make_pair((*baseline_range)[0], (*baseline_range)[1]);
      if (min_drop_bits) cfg.collapse.min_drop_bits = *min_drop_bits;
      if (require_sd) cfg.collapse.require_sd = *require_sd;
      if (lsi_thresholds) cfg.lsi_thresholds = *lsi_thresholds;
      if (split_trials) cfg.split_trials = *split_trials;
      if (seed) cfg.seed = *seed;
      if (active_min_share) cfg.active_min_share = *active_min_share;
      if (lsi_averaging) apply_config_json(cfg, {{"lsi_averaging", *lsi_averaging}});
      if (require_full) cfg.require_full_probs = true;
      cfg.emit = parse_emit(emit_items);
      cfg.out_dir = out_dir;
      for (const auto& t : trace_args) {
        const auto eq = t.find('=');
        if (eq == std::string::npos)
          cfg.add_trace(fs::path(t).stem().string(), t);
        else
          cfg.add_trace(t.substr(0, eq), t.substr(eq + 1));
      }
      const auto report = analyze(cfg);
      for (const auto& v : report.variants)
        for (const auto& c : v.comparisons) {
          std::cout << v.name << " " << c.ref_language << "-" << c.target_language << ": collapse "
                    << (c.collapse_target.collapsed ? "FLAGGED" : "not flagged") << " (score "
                    << format9(c.collapse_target.collapse_score) << " bits)";
          if (!c.categorizations.empty()) {
            const auto& k = c.categorizations.front().counts;
            std::cout << "; experts@" << format9(c.categorizations.front().threshold) << " target/ref/shared/unused "
                      << k.target_specific << "/" << k.ref_specific << "/" << k.shared << "/" << k.unused;
          }
          std::cout << (v.degraded ? " [degraded]" : "") << "\n";
        }
      std::cout << "wrote " << out_dir << "\n";
      return kOk;
    }
    if (*compare_cmd) {
      const auto cmp = compare(load_report(report_a), load_report(report_b), variant_a, variant_b);
      write_compare_files(cmp, compare_out);
      std::cout << "wrote " << compare_out << "\n";
      return kOk;
    }
    if (*validate_cmd) return run_validate(validate_path);
    if (*synth_cmd) {
      ScenarioSpec spec = spec_path.empty() ? ScenarioSpec{} : load_spec(spec_path);
      if (synth_seed) spec.seed = *synth_seed;
      if (synth_mode) {
        auto m = capture_mode_from_string(*synth_mode);
        if (!m) throw ConfigError("unknown capture mode '" + *synth_mode + "'");
        spec.capture_mode = *m;
      }
      if (collapse_fraction) {
        if (collapse_target.empty()) throw ConfigError("--collapse-target is required with --collapse-deep-fraction");
        spec = gen_collapse_scenario(spec, *collapse_fraction, collapse_target, collapse_m, collapse_also);
      }
      validate_spec(spec);
      if (!dump_spec.empty()) {
        AtomicFile f(dump_spec);
        f.stream() << spec_to_json(spec).dump(2) << "\n";
        f.commit();
      }
      if (synth_out.empty()) {
        if (dump_spec.empty()) throw ConfigError("synth needs --out or --dump-spec");
        return kOk;
      }
      const auto g = generate_trace(spec, synth_out);
      std::cout << "records: " << g.records << "\nbytes: " << g.bytes << "\n";
      if (g.sidecar) std::cout << "sidecar: " << g.sidecar->string() << "\n";
      return kOk;
    }
    if (*aggregate_cmd) {
      std::optional<fs::path> sidecar;
      if (!agg_sidecar.empty()) sidecar = agg_sidecar;
      const auto s = convert_to_aggregate_file(agg_in, agg_out, sidecar);
      std::cout << "chunks: " << s.chunks << "\nrows: " << s.rows << "\ntokens: " << s.tokens << "\nbytes: " << s.bytes
                << "\n";
      return kOk;
    }
  } catch (const TraceError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DegradedModeError& e) {
    std::cerr << "analysis infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const Error& e) {
    std::cerr << "analysis infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInfeasible;
  }
  return kUsage;
}
