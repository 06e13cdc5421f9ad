#pragma once

// `modarith` command line: generate, tune, sweep and test.
//
// Exit codes: 0 success, 2 user error (parse, config, arguments), 3 backend error.

#include "modarith/config.hpp"
#include "modarith/selfcheck.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace modarith {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 2;
inline constexpr int kExitBackend = 3;
inline constexpr const char* kConfigEnv = "MODEL_ARITH_CONFIG";

namespace cli {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, path + ": " + e.what());
  }
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::ConfigError, "cannot write " + path);
  out << text;
}

inline std::string strip_newline(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    line = strip_newline(line);
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::size_t> top_k;
  std::optional<double> temperature;
};

inline void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "engine config JSON (default: $MODEL_ARITH_CONFIG)");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--mode", c.mode, "normalization mode: raw or kl_optimal")->check(CLI::IsMember({"raw", "kl_optimal"}));
  cmd->add_option("--top-k", c.top_k, "sampling top-k")->check(CLI::PositiveNumber);
  cmd->add_option("--temperature", c.temperature, "sampling temperature")->check(CLI::PositiveNumber);
}

inline Engine load_engine(Common& c) {
  if (c.config.empty()) {
    if (const char* env = std::getenv(kConfigEnv)) c.config = env;
  }
  if (c.config.empty()) throw Error(ErrorCode::ConfigError, "no config given (use --config or set " + std::string(kConfigEnv) + ")");
  Engine engine = build_engine(load_config(c.config));
  ConfigDefaults& d = engine.config.defaults;
  if (c.seed) d.seed = *c.seed;
  if (c.mode) d.mode = parse_mode(*c.mode);
  if (c.top_k) d.top_k = *c.top_k;
  if (c.temperature) d.temperature = *c.temperature;
  return engine;
}

// Formula errors carry a span; show it under the source text.
inline void report_error(const Error& e, std::ostream& err, const std::string& formula) {
  err << "error: " << e.what() << '\n';
  if (e.span() && !formula.empty() && e.span()->begin <= formula.size()) {
    std::size_t line_start = formula.rfind('\n', e.span()->begin == 0 ? 0 : e.span()->begin - 1);
    line_start = line_start == std::string::npos || e.span()->begin == 0 ? 0 : line_start + 1;
    std::size_t line_end = formula.find('\n', e.span()->begin);
    if (line_end == std::string::npos) line_end = formula.size();
    const std::size_t width = std::max<std::size_t>(1, std::min(e.span()->end, line_end) - e.span()->begin);
    err << "  " << formula.substr(line_start, line_end - line_start) << '\n';
    err << "  " << std::string(e.span()->begin - line_start, ' ') << std::string(width, '^') << '\n';
  }
}

inline nlohmann::ordered_json result_json(const Formula& f, const Engine& engine, const Context& prompt, const GenerationResult& r,
                                          std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["formula"] = f.to_string();
  j["mode"] = std::string(to_string(f.mode()));
  j["seed"] = seed;
  j["prompt"] = prompt;
  j["tokens"] = r.tokens;
  j["text"] = engine.vocabulary.decode(r.tokens);
  j["logprobs"] = r.logprobs;
  j["calls"] = r.calls;
  j["calls_per_token"] = call_statistics(r).total_calls_per_token;
  return j;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Model arithmetic decoding engine"};
  app.require_subcommand(1);

  cli::Common common;
  std::string formula_text;

  // generate
  auto* gen = app.add_subcommand("generate", "sample a continuation from a formula");
  cli::add_common(gen, common);
  std::string prompt_text;
  std::string prompt_file;
  std::optional<std::size_t> max_tokens;
  bool speculative = false;
  std::string factors_arg;
  bool as_json = false;
  gen->add_option("--formula", formula_text, "formula in the model arithmetic DSL")->required();
  auto* prompt_opt = gen->add_option("--prompt", prompt_text, "prompt text");
  gen->add_option("--prompt-file", prompt_file, "file holding the prompt text")->excludes(prompt_opt);
  gen->add_option("--max-tokens", max_tokens, "maximum number of generated tokens")->check(CLI::PositiveNumber);
  gen->add_flag("--speculative", speculative, "use speculative sampling");
  gen->add_option("--factors", factors_arg, "speculative factors: a tuning report / JSON array path, or 'auto'");
  gen->add_flag("--json", as_json, "print the full result as JSON");

  // tune
  auto* tune_cmd = app.add_subcommand("tune", "estimate acceptance rates and choose speculative factors");
  cli::add_common(tune_cmd, common);
  std::string prompts_path;
  std::size_t samples = 10;
  std::string out_path;
  std::optional<std::size_t> s_max;
  tune_cmd->add_option("--formula", formula_text, "formula in the model arithmetic DSL")->required();
  tune_cmd->add_option("--prompts", prompts_path, "calibration prompts, one per line")->required();
  tune_cmd->add_option("--samples", samples, "number of calibration generations");
  tune_cmd->add_option("--out", out_path, "tuning report path (default: stdout)");
  tune_cmd->add_option("--s-max", s_max, "largest speculative factor")->check(CLI::PositiveNumber);

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "run a strength sweep and write a report");
  cli::add_common(sweep_cmd, common);
  std::string spec_path;
  sweep_cmd->add_option("--spec", spec_path, "sweep spec JSON")->required();
  sweep_cmd->add_option("--out", out_path, "report path (JSON lines; a .csv twin is written next to it)");

  // test
  auto* test_cmd = app.add_subcommand("test", "run the built-in correctness suites");
  std::string suite = "all";
  std::size_t test_samples = 20000;
  std::uint64_t test_seed = 0;
  test_cmd->add_option("--config", common.config, "ignored; the suites use built-in fixtures");
  test_cmd->add_option("--suite", suite, "exactness, oracles or all")->check(CLI::IsMember({"exactness", "oracles", "all"}));
  test_cmd->add_option("--samples", test_samples, "samples per exactness case (at least 10000)");
  test_cmd->add_option("--seed", test_seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUser;
  }

  try {
    if (*gen) {
      Engine engine = cli::load_engine(common);
      const ConfigDefaults& d = engine.config.defaults;
      const Formula f = parse_formula(formula_text, engine.registry, d.mode);
      const std::string text = prompt_file.empty() ? prompt_text : cli::strip_newline(cli::read_file(prompt_file));
      const Context prompt = engine.vocabulary.encode(text);
      GenerationConfig cfg;
      cfg.max_tokens = max_tokens.value_or(d.max_tokens);
      cfg.seed = d.seed;
      cfg.policy = d.policy();
      cfg.stop_ids = {engine.vocabulary.eos()};
      if (!speculative && !factors_arg.empty()) throw Error(ErrorCode::InvalidArgument, "--factors needs --speculative");

      GenerationResult result;
      if (speculative) {
        SpeculativeFactors factors = unit_factors(f);
        if (factors_arg == "auto") {
          const std::vector<Context> calibration{prompt};
          const TuningReport report = tune(f, calibration, 10, {d.seed, d.calibration_tokens, cfg.policy}, d.s_max);
          for (const std::string& w : report.warnings) err << "warning: " << w << '\n';
          factors = report.factors();
        } else if (!factors_arg.empty()) {
          factors = factors_from_json(cli::read_json(factors_arg));
        }
        result = speculative_generate(f, prompt, factors, cfg);
      } else {
        result = generate(f, prompt, cfg);
      }
      if (as_json) {
        out << cli::result_json(f, engine, prompt, result, cfg.seed).dump(2) << '\n';
      } else {
        out << engine.vocabulary.decode(result.tokens) << '\n';
      }
      return kExitOk;
    }

    if (*tune_cmd) {
      Engine engine = cli::load_engine(common);
      const ConfigDefaults& d = engine.config.defaults;
      const Formula f = parse_formula(formula_text, engine.registry, d.mode);
      std::vector<Context> prompts;
      for (const std::string& line : cli::read_lines(prompts_path)) prompts.push_back(engine.vocabulary.encode(line));
      const TuningReport report = tune(f, prompts, samples, {d.seed, d.calibration_tokens, d.policy()}, s_max.value_or(d.s_max));
      for (const std::string& w : report.warnings) err << "warning: " << w << '\n';
      const std::string text = to_json(report).dump(2) + "\n";
      if (out_path.empty()) {
        out << text;
      } else {
        cli::write_file(out_path, text);
      }
      return kExitOk;
    }

    if (*sweep_cmd) {
      Engine engine = cli::load_engine(common);
      const ConfigDefaults& d = engine.config.defaults;
      const nlohmann::json j = cli::read_json(spec_path);
      SweepSpec spec;
      try {
        spec.formula_template = j.at("formula").get<std::string>();
        formula_text = spec.formula_template;
        for (const auto& [name, values] : j.at("slots").items()) spec.slots[name] = values.get<std::vector<double>>();
        for (const auto& p : j.at("prompts")) spec.prompts.push_back(engine.vocabulary.encode(p.get<std::string>()));
        for (const auto& m : j.value("metrics", nlohmann::json::array({"perplexity"}))) spec.metrics.push_back(parse_metric(m.get<std::string>()));
        spec.generation.max_tokens = j.value("max_tokens", d.max_tokens);
        spec.generation.seed = j.value("seed", d.seed);
        spec.generation.policy = d.policy();
        spec.generation.stop_ids = {engine.vocabulary.eos()};
        spec.mode = parse_mode(j.value("mode", std::string(to_string(d.mode))));
        const std::string spec_kind = j.value("speculation", std::string("none"));
        if (spec_kind == "none") {
          spec.speculation = Speculation::None;
        } else if (spec_kind == "unit") {
          spec.speculation = Speculation::Unit;
        } else if (spec_kind == "tuned") {
          spec.speculation = Speculation::Tuned;
        } else {
          throw Error(ErrorCode::ConfigError, "speculation must be none, unit or tuned");
        }
        spec.calibration_samples = j.value("calibration_samples", std::size_t{10});
        spec.s_max = j.value("s_max", d.s_max);
        spec.reference = j.value("reference", std::string());
        const std::string scorer = j.value("scorer", std::string());
        if (scorer == "word_length") {
          spec.scorer = std::make_shared<WordLengthScorer>(engine.vocabulary);
        } else if (!scorer.empty()) {
          const ClassifierPtr c = engine.registry.classifier(scorer);
          if (!c) throw Error(ErrorCode::NameError, "unknown scorer '" + scorer + "'");
          spec.scorer = std::make_shared<ClassifierScorer>(c);
        }
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigError, spec_path + ": " + e.what());
      }
      const Report report = run_sweep(spec, engine.registry);
      std::ostringstream jsonl;
      write_jsonl(report, jsonl);
      if (out_path.empty()) {
        out << jsonl.str();
      } else {
        cli::write_file(out_path, jsonl.str());
        std::ostringstream csv;
        write_csv(report, csv);
        const std::filesystem::path csv_path = std::filesystem::path(out_path).replace_extension(".csv");
        cli::write_file(csv_path.string(), csv.str());
      }
      return kExitOk;
    }

    if (*test_cmd) {
      std::vector<selfcheck::CheckResult> results;
      if (suite == "oracles" || suite == "all") {
        results.push_back(selfcheck::check_theorem1(20, test_seed));
        results.push_back(selfcheck::check_union_mass(200, test_seed));
        results.push_back(selfcheck::check_union_objective(10, test_seed));
        results.push_back(selfcheck::check_classifier_lemma(5, test_seed));
      }
      if (suite == "exactness" || suite == "all") {
        for (auto& r : selfcheck::check_exactness(test_samples, test_seed)) results.push_back(std::move(r));
      }
      bool all = true;
      for (const auto& r : results) {
        all = all && r.pass;
        out << (r.pass ? "PASS " : "FAIL ") << r.name << " (n=" << r.instances << ", worst=" << format_number(r.worst)
            << ", tol=" << format_number(r.tolerance) << (r.detail.empty() ? "" : ", " + r.detail) << ")\n";
      }
      return all ? kExitOk : 1;
    }
  } catch (const Error& e) {
    cli::report_error(e, err, formula_text);
    return e.is_backend() ? kExitBackend : kExitUser;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  }
  return kExitOk;
}

}  // namespace modarith
