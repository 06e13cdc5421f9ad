#pragma once

// Checks of the evaluator against the brute-force oracles and of the
// speculative sampler against plain sampling. Used by `modarith test` and the
// acceptance suite.

#include "modarith/evalharness.hpp"
#include "modarith/oracles.hpp"

namespace modarith::selfcheck {

struct CheckResult {
  std::string name;
  bool pass = true;
  std::size_t instances = 0;
  double worst = 0.0;      // largest observed deviation (or smallest p-value for statistical checks)
  double tolerance = 0.0;
  std::string detail;
};

namespace detail {

inline ProviderPtr constant_provider(const std::string& name, const std::vector<double>& p) {
  return std::make_shared<TabularProvider>(name, LogDistribution::from_probabilities(p));
}

inline void record(CheckResult& r, double deviation) {
  ++r.instances;
  r.worst = std::max(r.worst, deviation);
  r.pass = r.pass && deviation <= r.tolerance;
}

}  // namespace detail

/// Random |T| in {3,4,5}, 2-4 plain terms with positive weights, kl_optimal mode.
inline CheckResult check_theorem1(std::size_t instances, std::uint64_t seed) {
  CheckResult r{"theorem1_oracle", true, 0, 0.0, 1e-4, {}};
  for (std::size_t k = 0; k < instances; ++k) {
    RngStream rng(seed, k);
    const std::size_t n = 3 + k % 3;
    const std::size_t terms = 2 + (k / 3) % 3;
    Registry registry(n);
    std::vector<std::vector<double>> qs;
    std::vector<double> lambdas;
    std::string text;
    for (std::size_t i = 0; i < terms; ++i) {
      qs.push_back(oracles::random_distribution(n, rng));
      lambdas.push_back(0.1 + 2.0 * rng.next_uniform());
      registry.add(detail::constant_provider("Q" + std::to_string(i), qs.back()));
      text += (i ? " + " : "") + format_number(lambdas.back()) + "*Q" + std::to_string(i);
    }
    const LogDistribution p = evaluate(parse_formula(text, registry, NormalizationMode::KlOptimal), Context{});
    detail::record(r, oracles::tv(p.probabilities(), oracles::linear_oracle(qs, lambdas)));
  }
  return r;
}

/// Unnormalized union mass equals max(Q1, Q2) and intersection mass min(Q1, Q2).
inline CheckResult check_union_mass(std::size_t pairs, std::uint64_t seed) {
  CheckResult r{"union_intersection_mass", true, 0, 0.0, 1e-12, {}};
  for (std::size_t k = 0; k < pairs; ++k) {
    RngStream rng(seed, k);
    const std::size_t n = 2 + k % 7;
    const auto q1 = oracles::random_distribution(n, rng);
    const auto q2 = oracles::random_distribution(n, rng);
    Registry registry(n);
    registry.add(detail::constant_provider("Q1", q1));
    registry.add(detail::constant_provider("Q2", q2));
    const auto u = evaluate(parse_formula("union(Q1, Q2)", registry), Context{}).probabilities();
    const auto v = evaluate(parse_formula("intersection(Q1, Q2)", registry), Context{}).probabilities();
    // Compare against the probabilities the providers actually hold.
    const LogDistribution la = LogDistribution::from_probabilities(q1);
    const LogDistribution lb = LogDistribution::from_probabilities(q2);
    double z_max = 0.0;
    double z_min = 0.0;
    for (std::size_t x = 0; x < n; ++x) {
      z_max += std::max(la.prob(x), lb.prob(x));
      z_min += std::min(la.prob(x), lb.prob(x));
    }
    double dev = 0.0;
    for (std::size_t x = 0; x < n; ++x) {
      const double hi = std::max(la.prob(x), lb.prob(x));
      const double lo = std::min(la.prob(x), lb.prob(x));
      dev = std::max(dev, std::abs(u[x] * z_max - hi) / hi);
      dev = std::max(dev, std::abs(v[x] * z_min - lo) / lo);
      const double sum = la.prob(x) + lb.prob(x);
      dev = std::max(dev, std::abs(u[x] * z_max + v[x] * z_min - sum) / sum);
    }
    detail::record(r, dev);
  }
  return r;
}

/// Grid minimization of the indicator-weighted objective on 3-token instances.
inline CheckResult check_union_objective(std::size_t instances, std::uint64_t seed) {
  CheckResult r{"union_objective_oracle", true, 0, 0.0, 1e-3, {}};
  for (std::size_t k = 0; k < instances; ++k) {
    RngStream rng(seed, k);
    const auto q1 = oracles::random_distribution(3, rng);
    const auto q2 = oracles::random_distribution(3, rng);
    Registry registry(3);
    registry.add(detail::constant_provider("Q1", q1));
    registry.add(detail::constant_provider("Q2", q2));
    for (bool intersection : {false, true}) {
      const auto p = evaluate(parse_formula(intersection ? "intersection(Q1, Q2)" : "union(Q1, Q2)", registry), Context{});
      detail::record(r, oracles::tv(p.probabilities(), oracles::union_oracle(q1, q2, intersection)));
    }
  }
  return r;
}

/// "M + lambda*classifier(C)" with top_k = |T| against direct minimization.
inline CheckResult check_classifier_lemma(std::size_t fixtures, std::uint64_t seed) {
  CheckResult r{"classifier_lemma_oracle", true, 0, 0.0, 1e-4, {}};
  for (std::size_t k = 0; k < fixtures; ++k) {
    RngStream rng(seed, k);
    const std::size_t n = 3 + k % 3;
    const auto m = oracles::random_distribution(n, rng);
    std::vector<double> scores(n);
    for (double& s : scores) s = 0.05 + 0.9 * rng.next_uniform();
    const double prefix_score = 0.5;
    const Context ctx{static_cast<TokenId>(k % n)};
    auto c = std::make_shared<FunctionClassifier>("C", [scores, prefix_score, len = ctx.size()](std::span<const TokenId> text) {
      return text.size() > len ? scores[text.back()] : prefix_score;
    });
    Registry registry(n);
    registry.add(detail::constant_provider("M", m));
    registry.add(ClassifierPtr(c));
    for (double lambda : {0.5, 1.0, 2.0}) {
      const std::string text = "M + " + format_number(lambda) + "*classifier(C, " + std::to_string(n) + ")";
      const auto p = evaluate(parse_formula(text, registry), ctx);
      detail::record(r, oracles::tv(p.probabilities(), oracles::classifier_oracle(m, scores, lambda)));
    }
  }
  return r;
}

/// First-token chi-square for every exactness fixture, Bonferroni-corrected.
inline std::vector<CheckResult> check_exactness(std::size_t samples, std::uint64_t seed, double alpha = 0.001) {
  const ExactnessFixture fx = exactness_fixture();
  const double corrected = alpha / static_cast<double>(fx.cases.size());
  std::vector<CheckResult> out;
  const Context prompt{0};
  for (std::size_t i = 0; i < fx.cases.size(); ++i) {
    const Formula f = parse_formula(fx.cases[i].formula, fx.registry);
    EquivalenceOptions opts;
    opts.seed = RngStream::derive(seed, i);
    opts.alpha = corrected;
    const EquivalenceResult e = equivalence_test(f, prompt, samples, fx.cases[i].factors, opts);
    CheckResult r{"exactness " + fx.cases[i].formula, e.pass, samples, e.p_value, corrected, {}};
    r.detail = "chi2=" + format_number(e.statistic) + " dof=" + std::to_string(e.dof) + " p=" + format_number(e.p_value);
    out.push_back(std::move(r));
  }
  return out;
}

/// Empirical distribution of the first `length` tokens over `runs` generations.
inline std::map<Context, double> joint_frequencies(const Formula& f, const Context& prompt, std::size_t length, std::size_t runs,
                                                   std::uint64_t seed, const SpeculativeFactors* factors) {
  std::map<Context, double> freq;
  GenerationConfig cfg;
  cfg.max_tokens = length;
  for (std::size_t k = 0; k < runs; ++k) {
    cfg.seed = RngStream::derive(seed, k);
    const GenerationResult run = factors ? speculative_generate(f, prompt, *factors, cfg) : generate(f, prompt, cfg);
    freq[run.tokens] += 1.0 / static_cast<double>(runs);
  }
  return freq;
}

inline double tv(const std::map<Context, double>& a, const std::map<Context, double>& b) {
  double s = 0.0;
  for (const auto& [k, v] : a) {
    const auto it = b.find(k);
    s += std::abs(v - (it == b.end() ? 0.0 : it->second));
  }
  for (const auto& [k, v] : b) {
    if (!a.count(k)) s += v;
  }
  return 0.5 * s;
}

/// 3-token joint law of speculative vs plain sampling, TV <= 0.01.
inline std::vector<CheckResult> check_joint(std::size_t runs, std::uint64_t seed) {
  const ExactnessFixture fx = exactness_fixture();
  std::vector<CheckResult> out;
  const Context prompt{0};
  for (std::size_t i = 0; i < fx.cases.size(); ++i) {
    const Formula f = parse_formula(fx.cases[i].formula, fx.registry);
    const auto spec = joint_frequencies(f, prompt, 3, runs, RngStream::derive(seed, 2 * i), &fx.cases[i].factors);
    const auto plain = joint_frequencies(f, prompt, 3, runs, RngStream::derive(seed, 2 * i + 1), nullptr);
    CheckResult r{"joint " + fx.cases[i].formula, true, runs, 0.0, 0.01, {}};
    r.worst = tv(spec, plain);
    r.pass = r.worst <= r.tolerance;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace modarith::selfcheck
