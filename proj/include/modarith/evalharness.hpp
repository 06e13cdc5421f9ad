#pragma once

// Batch experiments: strength sweeps with JSONL/CSV reports, and chi-square
// equivalence tests of the speculative sampler.

#include "modarith/speculative.hpp"
#include "modarith/stats.hpp"

#include <json.hpp>

#include <ostream>

namespace modarith {

// ---------------------------------------------------------------------------
// Attribute scorers
// ---------------------------------------------------------------------------

class AttributeScorer {
 public:
  virtual ~AttributeScorer() = default;
  virtual std::string name() const = 0;
  // Where the score comes from; written into report metadata.
  virtual std::string provenance() const = 0;
  virtual double score(std::span<const TokenId> text) const = 0;
};

using ScorerPtr = std::shared_ptr<const AttributeScorer>;

class ClassifierScorer final : public AttributeScorer {
 public:
  explicit ClassifierScorer(ClassifierPtr c) : c_(std::move(c)) {}
  std::string name() const override { return c_->name(); }
  std::string provenance() const override { return "toy classifier '" + c_->name() + "'"; }
  double score(std::span<const TokenId> text) const override { return checked_score(*c_, text); }

 private:
  ClassifierPtr c_;
};

/// f(x) = 1 - x/10 on the mean word length x of the decoded text, clamped to [0, 1].
class WordLengthScorer final : public AttributeScorer {
 public:
  explicit WordLengthScorer(Vocabulary vocab) : vocab_(std::move(vocab)) {}
  std::string name() const override { return "word_length"; }
  std::string provenance() const override { return "normalized average word length"; }

  double score(std::span<const TokenId> text) const override { return score_text(vocab_.decode(text)); }

  static double score_text(std::string_view text) {
    std::istringstream words{std::string(text)};
    std::string word;
    double letters = 0.0;
    double count = 0.0;
    while (words >> word) {
      letters += static_cast<double>(word.size());
      count += 1.0;
    }
    const double mean = count > 0.0 ? letters / count : 0.0;
    return std::clamp(1.0 - mean / 10.0, 0.0, 1.0);
  }

 private:
  Vocabulary vocab_;
};

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

enum class Metric { Perplexity, CallsPerToken, AttributeScore, Acceptance };

inline std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::Perplexity: return "perplexity";
    case Metric::CallsPerToken: return "calls_per_token";
    case Metric::AttributeScore: return "attribute_score";
    case Metric::Acceptance: return "acceptance";
  }
  return "";
}

inline Metric parse_metric(std::string_view s) {
  for (Metric m : {Metric::Perplexity, Metric::CallsPerToken, Metric::AttributeScore, Metric::Acceptance}) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorCode::ConfigError, "unknown metric '" + std::string(s) + "'");
}

enum class Speculation { None, Unit, Tuned };

struct SweepSpec {
  std::string formula_template;                      // e.g. "M + {lam}*Ma"
  std::map<std::string, std::vector<double>> slots;  // cells are the cartesian product, in name order
  std::vector<Context> prompts;
  std::vector<Metric> metrics;
  GenerationConfig generation;
  NormalizationMode mode = NormalizationMode::Raw;
  Speculation speculation = Speculation::None;
  std::size_t calibration_samples = 10;
  std::size_t s_max = 64;
  std::string reference;  // perplexity reference provider; defaults to the ranking source
  ScorerPtr scorer;       // required for attribute_score
};

/// Replaces every "{slot}" with the slot's value; leftover braces are a TemplateError.
inline std::string instantiate_template(std::string_view tmpl, const std::map<std::string, double>& values) {
  std::string out;
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const std::size_t open = tmpl.find('{', pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    out.append(tmpl.substr(pos, open - pos));
    const std::size_t close = tmpl.find('}', open);
    if (close == std::string_view::npos) throw Error(ErrorCode::TemplateError, "unterminated slot in template");
    const std::string name(tmpl.substr(open + 1, close - open - 1));
    const auto it = values.find(name);
    if (it == values.end()) throw Error(ErrorCode::TemplateError, "template slot '{" + name + "}' has no values");
    out += format_number(it->second);
    pos = close + 1;
  }
  return out;
}

struct ReportRow {
  std::size_t cell = 0;
  std::string formula;
  std::map<std::string, double> slots;
  std::map<std::string, std::optional<double>> relative_strength;
  std::string metric;
  double value = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};

struct Report {
  nlohmann::json metadata;
  std::vector<ReportRow> rows;
};

inline nlohmann::json to_json(const ReportRow& r) {
  nlohmann::json j;
  j["cell"] = r.cell;
  j["formula"] = r.formula;
  for (const auto& [k, v] : r.slots) j["slot_" + k] = v;
  for (const auto& [k, v] : r.relative_strength) j["relative_" + k] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  j["metric"] = r.metric;
  j["value"] = r.value;
  j["stderr"] = r.stderr_;
  j["n"] = r.n;
  return j;
}

inline std::vector<std::string> report_columns(const Report& report) {
  std::vector<std::string> cols{"cell", "formula"};
  if (!report.rows.empty()) {
    for (const auto& [k, v] : report.rows.front().slots) cols.push_back("slot_" + k);
    for (const auto& [k, v] : report.rows.front().relative_strength) cols.push_back("relative_" + k);
  }
  for (const char* c : {"metric", "value", "stderr", "n"}) cols.emplace_back(c);
  return cols;
}

inline void write_jsonl(const Report& report, std::ostream& out) {
  out << report.metadata.dump() << '\n';
  for (const ReportRow& r : report.rows) {
    nlohmann::ordered_json ordered;
    const nlohmann::json j = to_json(r);
    for (const std::string& c : report_columns(report)) ordered[c] = j.at(c);
    out << ordered.dump() << '\n';
  }
}

inline void write_csv(const Report& report, std::ostream& out) {
  const auto cols = report_columns(report);
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  const auto cell_text = [](const nlohmann::json& v) -> std::string {
    if (v.is_null()) return "";
    if (v.is_number_float()) return format_number(v.get<double>());
    if (v.is_string()) {
      std::string s = v.get<std::string>();
      std::string quoted = "\"";
      for (char c : s) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
      return quoted + "\"";
    }
    return v.dump();
  };
  for (const ReportRow& r : report.rows) {
    const nlohmann::json j = to_json(r);
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cell_text(j.at(cols[i]));
    out << '\n';
  }
}

inline Report run_sweep(const SweepSpec& spec, const Registry& registry) {
  if (spec.slots.empty()) throw Error(ErrorCode::TemplateError, "sweep needs at least one slot");
  if (spec.prompts.empty()) throw Error(ErrorCode::InvalidArgument, "sweep needs at least one prompt");
  for (const auto& [name, values] : spec.slots) {
    if (values.empty()) throw Error(ErrorCode::TemplateError, "slot '" + name + "' has no values");
    if (spec.formula_template.find("{" + name + "}") == std::string::npos) {
      throw Error(ErrorCode::TemplateError, "slot '" + name + "' does not appear in the template");
    }
  }
  // Surface unresolved placeholders before any generation happens.
  {
    std::map<std::string, double> probe;
    for (const auto& [name, values] : spec.slots) probe[name] = values.front();
    instantiate_template(spec.formula_template, probe);
  }
  const bool wants_score = std::find(spec.metrics.begin(), spec.metrics.end(), Metric::AttributeScore) != spec.metrics.end();
  const bool wants_acceptance = std::find(spec.metrics.begin(), spec.metrics.end(), Metric::Acceptance) != spec.metrics.end();
  if (wants_score && !spec.scorer) throw Error(ErrorCode::ConfigError, "attribute_score needs a scorer");
  if (wants_acceptance && spec.speculation == Speculation::None) {
    throw Error(ErrorCode::ConfigError, "the acceptance metric needs speculative generation");
  }

  Report report;
  report.metadata = {{"type", "metadata"},
                     {"formula_template", spec.formula_template},
                     {"seed", spec.generation.seed},
                     {"max_tokens", spec.generation.max_tokens},
                     {"mode", std::string(to_string(spec.mode))},
                     {"prompts", spec.prompts.size()},
                     {"speculation", spec.speculation == Speculation::None ? "none" : spec.speculation == Speculation::Unit ? "unit" : "tuned"}};
  nlohmann::json providers = nlohmann::json::array();
  for (const auto& [name, p] : registry.providers()) providers.push_back(name);
  report.metadata["providers"] = providers;
  report.metadata["scorer"] = spec.scorer ? nlohmann::json(spec.scorer->name()) : nlohmann::json(nullptr);
  report.metadata["scorer_provenance"] = spec.scorer ? nlohmann::json(spec.scorer->provenance()) : nlohmann::json(nullptr);

  std::vector<std::pair<std::string, const std::vector<double>*>> axes;
  for (const auto& [name, values] : spec.slots) axes.emplace_back(name, &values);
  std::vector<std::size_t> index(axes.size(), 0);

  for (std::size_t cell = 0;; ++cell) {
    std::map<std::string, double> values;
    for (std::size_t a = 0; a < axes.size(); ++a) values[axes[a].first] = (*axes[a].second)[index[a]];
    const std::string text = instantiate_template(spec.formula_template, values);
    const Formula f = parse_formula(text, registry, spec.mode);

    double coefficient_sum = 0.0;
    for (const Unit& u : f.units()) coefficient_sum += u.coefficient;

    SpeculativeFactors factors = unit_factors(f);
    if (spec.speculation == Speculation::Tuned) {
      CalibrationOptions calibration{RngStream::derive(spec.generation.seed, cell), spec.generation.max_tokens, spec.generation.policy};
      factors = tune(f, spec.prompts, spec.calibration_samples, calibration, spec.s_max).factors();
    }

    const Provider* reference = nullptr;
    if (!spec.reference.empty()) {
      const ProviderPtr p = registry.provider(spec.reference);
      if (!p) throw Error(ErrorCode::NameError, "unknown reference provider '" + spec.reference + "'");
      reference = p.get();
    } else if (f.ranking_source()) {
      reference = f.providers()[*f.ranking_source()].get();
    }

    std::map<Metric, std::vector<double>> samples;
    for (std::size_t i = 0; i < spec.prompts.size(); ++i) {
      GenerationConfig cfg = spec.generation;
      cfg.seed = RngStream::derive(RngStream::derive(spec.generation.seed, cell), i);
      const Context& prompt = spec.prompts[i];
      const GenerationResult run =
          spec.speculation == Speculation::None ? generate(f, prompt, cfg) : speculative_generate(f, prompt, factors, cfg);
      for (Metric m : spec.metrics) {
        switch (m) {
          case Metric::Perplexity: {
            if (!reference) throw Error(ErrorCode::ConfigError, "perplexity needs a reference provider");
            Context full = prompt;
            full.insert(full.end(), run.tokens.begin(), run.tokens.end());
            samples[m].push_back(perplexity(*reference, full, prompt.size()));
            break;
          }
          case Metric::CallsPerToken: samples[m].push_back(call_statistics(run).total_calls_per_token); break;
          case Metric::AttributeScore: samples[m].push_back(spec.scorer->score(run.tokens)); break;
          case Metric::Acceptance: {
            std::size_t checked = 0;
            std::size_t accepted = 0;
            for (const ValidationStats& v : run.validation) {
              checked += v.checked;
              accepted += v.accepted;
            }
            samples[m].push_back(checked ? static_cast<double>(accepted) / static_cast<double>(checked) : 1.0);
            break;
          }
        }
      }
    }

    for (Metric m : spec.metrics) {
      const MeanStderr ms = mean_stderr(samples[m]);
      ReportRow row;
      row.cell = cell;
      row.formula = f.to_string();
      row.slots = values;
      for (const auto& [name, v] : values) {
        row.relative_strength[name] = coefficient_sum != 0.0 ? std::optional<double>(v / coefficient_sum) : std::nullopt;
      }
      row.metric = std::string(to_string(m));
      row.value = ms.mean;
      row.stderr_ = ms.stderr_;
      row.n = ms.n;
      report.rows.push_back(std::move(row));
    }

    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++index[a] < axes[a].second->size()) break;
      index[a] = 0;
      if (a == 0) return report;
    }
  }
}

// ---------------------------------------------------------------------------
// Equivalence tests
// ---------------------------------------------------------------------------

struct EquivalenceResult {
  double statistic = 0.0;
  double p_value = 1.0;
  bool pass = true;
  std::size_t dof = 0;
  std::size_t merged_bins = 0;
};

struct EquivalenceOptions {
  std::uint64_t seed = 0;
  double alpha = 0.001;
  ResidualMode residual = ResidualMode::Exact;
  SamplingPolicy policy;
};

/// Chi-square test of first tokens drawn by speculative_generate against evaluate().
inline EquivalenceResult equivalence_test(const Formula& f, std::span<const TokenId> prompt, std::size_t n_samples,
                                          const SpeculativeFactors& factors, const EquivalenceOptions& opts = {}) {
  if (n_samples < 10000) throw Error(ErrorCode::InvalidArgument, "equivalence_test needs at least 10^4 samples");
  const LogDistribution expected = apply_sampling_policy(evaluate(f, prompt), opts.policy);
  std::vector<std::size_t> counts(f.vocab_size(), 0);
  GenerationConfig cfg;
  cfg.max_tokens = 1;
  cfg.policy = opts.policy;
  for (std::size_t k = 0; k < n_samples; ++k) {
    cfg.seed = RngStream::derive(opts.seed, k);
    ++counts[speculative_generate(f, prompt, factors, cfg, opts.residual).tokens.front()];
  }
  const ChiSquareResult chi = chi_square_gof(counts, expected.probabilities());
  return {chi.statistic, chi.p_value, chi.p_value > opts.alpha, chi.dof, chi.merged_bins};
}

/// Fixed toy providers and formulas for exactness checks.
struct ExactnessFixture {
  Registry registry{3};
  struct Case {
    std::string formula;
    SpeculativeFactors factors;
  };
  std::vector<Case> cases;
};

inline ExactnessFixture exactness_fixture() {
  ExactnessFixture fx;
  const auto dist = [](std::vector<double> p) { return LogDistribution::from_probabilities(p); };
  // Context-dependent tables over a 3-token vocabulary.
  auto make = [&](const std::string& name, std::vector<double> fallback, std::vector<std::pair<Context, std::vector<double>>> rows,
                  double cost) {
    auto t = std::make_shared<TabularProvider>(name, dist(std::move(fallback)), 2, cost);
    for (auto& [ctx, p] : rows) t->set(ctx, dist(p));
    return t;
  };
  fx.registry.add(make("M", {0.5, 0.3, 0.2}, {{{0}, {0.2, 0.5, 0.3}}, {{1}, {0.6, 0.1, 0.3}}, {{2}, {0.3, 0.3, 0.4}}}, 1.0));
  fx.registry.add(make("Ma", {0.2, 0.2, 0.6}, {{{0}, {0.1, 0.6, 0.3}}, {{1}, {0.5, 0.4, 0.1}}, {{0, 2}, {0.7, 0.2, 0.1}}}, 1.0));
  fx.registry.add(make("Mb", {0.6, 0.3, 0.1}, {{{2}, {0.1, 0.1, 0.8}}, {{1, 1}, {0.3, 0.3, 0.4}}}, 1.0));
  fx.registry.add(make("A", {0.4, 0.4, 0.2}, {{{0}, {0.3, 0.4, 0.3}}, {{1}, {0.5, 0.2, 0.3}}}, 0.1));
  fx.registry.add(std::make_shared<TokenSetClassifier>("C", std::vector<TokenId>{2}, 1.0, -0.5, 2));
  fx.cases = {
      {"M + 0.5*Ma", {1, 3}},
      {"M - 0.6*Mb", {1, 2}},
      {"M + Ma + Mb", {1, 2, 4}},
      {"union(M, Ma)", {2}},
      {"M - 0.9*union(Ma, Mb)", {1, 3}},
      {"intersection(M, Mb) + 0.3*Ma", {3, 1}},
      {"supersede(A, M)", {3}},
      {"supersede(A, M) + 0.5*Ma", {2, 4}},
      {"M + 0.5*Ma + classifier(C)", {1, 2, 1}},
      {"supersede(A, M - 0.3*Mb) + 0.2*union(Ma, Mb)", {4, 2}},
  };
  return fx;
}

}  // namespace modarith
