#pragma once

// Speculative sampling over n distributions.
//
// Each top-level unit of a formula gets a speculative factor s. A unit with
// factor s is evaluated once every s positions, over all positions drafted
// since its last evaluation. Tokens are drafted from the partial sum of the
// units already computed at that position and validated unit by unit with the
// accept/resample rule, so the final law at every position is exactly the law
// of the full formula.

#include "modarith/engine.hpp"

#include <json.hpp>

#include <functional>
#include <limits>

namespace modarith {

// ---------------------------------------------------------------------------
// Accept / resample
// ---------------------------------------------------------------------------

// CorruptedAbs is a test hook: it resamples from |p_val - p_gen| and breaks exactness.
enum class ResidualMode { Exact, CorruptedAbs };

struct StepOutcome {
  TokenId token = 0;
  bool accepted = false;
};

/// `proposed` was drawn from p_gen. Returns a token distributed as p_val.
inline StepOutcome speculative_step(const LogDistribution& p_gen, const LogDistribution& p_val, TokenId proposed, RngStream& rng,
                                    ResidualMode mode = ResidualMode::Exact) {
  if (p_gen.size() != p_val.size()) throw Error(ErrorCode::InvalidArgument, "distributions differ in size");
  if (!p_gen.normalized() || !p_val.normalized()) throw Error(ErrorCode::InvalidArgument, "speculative_step needs normalized inputs");
  if (proposed >= p_gen.size()) throw Error(ErrorCode::InvalidArgument, "proposed token outside the vocabulary");
  const double pg = p_gen.prob(proposed);
  const double pv = p_val.prob(proposed);
  if (!(pg > 0.0)) throw Error(ErrorCode::InvalidArgument, "proposed token has zero probability under the generator");

  if (rng.next_uniform() < std::min(1.0, pv / pg)) return {proposed, true};

  std::vector<double> residual(p_gen.size());
  bool any = false;
  for (std::size_t x = 0; x < residual.size(); ++x) {
    const double d = p_val.prob(x) - p_gen.prob(x);
    residual[x] = mode == ResidualMode::Exact ? std::max(d, 0.0) : std::abs(d);
    any = any || residual[x] > 0.0;
  }
  if (!any) throw Error(ErrorCode::DegenerateResidual, "rejected a token but the residual distribution is empty");
  return {sample_categorical(LogDistribution::from_probabilities(residual, p_val.floor()), rng), false};
}

// ---------------------------------------------------------------------------
// Factors
// ---------------------------------------------------------------------------

/// One factor per formula unit, in declaration order.
using SpeculativeFactors = std::vector<std::size_t>;

inline SpeculativeFactors unit_factors(const Formula& f) { return SpeculativeFactors(f.units().size(), 1); }

inline void check_factors(const Formula& f, const SpeculativeFactors& factors) {
  if (factors.size() != f.units().size()) {
    throw Error(ErrorCode::FactorMismatch, "formula has " + std::to_string(f.units().size()) + " units but " +
                                               std::to_string(factors.size()) + " factors were given");
  }
  for (std::size_t u = 0; u < factors.size(); ++u) {
    if (factors[u] < 1) throw Error(ErrorCode::FactorMismatch, "factor of '" + f.units()[u].label + "' must be at least 1");
    if (f.units()[u].classifier && factors[u] != 1) {
      throw Error(ErrorCode::FactorMismatch, "classifier term '" + f.units()[u].label + "' only permits a factor of 1");
    }
  }
}

namespace detail {

// Partial sums use the weight sum of the included units in kl_optimal mode,
// so a partial sum is itself the optimal distribution for its terms.
class PartialSum {
 public:
  explicit PartialSum(const Formula& f) : f_(f) {}

  void add(const std::vector<double>& contribution, std::optional<double> weight) {
    parts_.push_back(&contribution);
    weight_ += weight.value_or(0.0);
  }

  LogDistribution finish() const {
    const double s = f_.mode() == NormalizationMode::KlOptimal && weight_ > 0.0 ? weight_ : 1.0;
    return combine_contributions(parts_, s, f_.vocab_size(), f_.floor());
  }

 private:
  const Formula& f_;
  std::vector<const std::vector<double>*> parts_;
  double weight_ = 0.0;
};

inline void require_static_weights(const Formula& f) {
  if (f.mode() != NormalizationMode::KlOptimal) return;
  const auto s = f.static_weight_sum();
  if (!s) {
    throw Error(ErrorCode::NormalizationViolation, "speculative kl_optimal decoding needs token-independent weight sums per term");
  }
  if (!(*s > 0.0)) {
    throw Error(ErrorCode::NormalizationViolation, "kl_optimal mode needs a positive weight sum; got " + format_number(*s));
  }
}

inline std::vector<std::size_t> validation_order(const SpeculativeFactors& factors) {
  std::vector<std::size_t> order(factors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return factors[a] < factors[b]; });
  return order;
}

class SpeculativeRun {
 public:
  SpeculativeRun(const Formula& f, std::span<const TokenId> prompt, const SpeculativeFactors& factors, const GenerationConfig& cfg,
                 ResidualMode mode)
      : f_(f), prompt_(prompt.begin(), prompt.end()), factors_(factors), cfg_(cfg), mode_(mode),
        order_(validation_order(factors)), covered_(f.units().size(), 0), dist_(f.providers().size()),
        auth_(f.units().size()), proposal_(f.units().size()), stats_(f.units().size()) {
    for (std::size_t u = 0; u < f.units().size(); ++u) {
      weight_.push_back(f.unit_weight_sum(u, false));
      proposal_weight_.push_back(f.unit_weight_sum(u, true));
      stats_[u].unit = f.units()[u].label;
    }
  }

  GenerationResult run() {
    while (true) {
      const std::size_t q = x_.size();
      const bool finished = q == cfg_.max_tokens || (q > 0 && cfg_.stop_ids.count(x_.back()));
      if (finished) {
        if (flush()) break;
        continue;
      }
      if (advance(q)) continue;
      LogDistribution p = apply_sampling_policy(distribution(q, std::nullopt), cfg_.policy);
      RngStream rng = stream(q, kDraftStream);
      x_.push_back(sample_categorical(p, rng));
      commit(q, kDraftStream, rng);
    }

    GenerationResult result;
    result.tokens = x_;
    for (std::size_t j = 0; j < x_.size(); ++j) {
      result.logprobs.push_back(apply_sampling_policy(distribution(j, std::nullopt), cfg_.policy).logp(x_[j]));
    }
    result.calls = calls_by_name(f_, counter_);
    result.validation = stats_;
    return result;
  }

 private:
  // Evaluates every due unit at q. Returns true when a rejection truncated the sequence.
  bool advance(std::size_t q) {
    for (std::size_t u : order_) {
      if (q - covered_[u] + 1 < factors_[u]) continue;
      const std::size_t first = covered_[u];
      compute(u, first, q + 1);
      if (validate(u, first, q)) return true;
      covered_[u] = q + 1;
    }
    return false;
  }

  // Brings every unit up to date over the drafted tokens. Returns true when nothing was rejected.
  bool flush() {
    const std::size_t end = x_.size();
    for (std::size_t u : order_) {
      if (covered_[u] >= end) continue;
      const std::size_t first = covered_[u];
      compute(u, first, end);
      if (validate(u, first, end)) return false;
    }
    return true;
  }

  // Validates positions [first, last) of unit u in order; true on rejection.
  bool validate(std::size_t u, std::size_t first, std::size_t last) {
    for (std::size_t j = first; j < last; ++j) {
      const LogDistribution before = apply_sampling_policy(distribution(j, std::nullopt), cfg_.policy);
      const LogDistribution after = apply_sampling_policy(distribution(j, u), cfg_.policy);
      RngStream rng = stream(j, u + 1);
      const StepOutcome outcome = speculative_step(before, after, x_[j], rng, mode_);
      commit(j, u + 1, rng);
      ++stats_[u].checked;
      covered_[u] = j + 1;
      if (outcome.accepted) {
        ++stats_[u].accepted;
        continue;
      }
      x_[j] = outcome.token;
      truncate(j + 1);
      return true;
    }
    return false;
  }

  void truncate(std::size_t length) {
    x_.resize(length);
    for (std::size_t& c : covered_) c = std::min(c, length);
    for (auto& rows : dist_) {
      if (rows.size() > length) rows.resize(length);
    }
    for (auto* table : {&auth_, &proposal_}) {
      for (auto& rows : *table) {
        if (rows.size() > length) rows.resize(length);
      }
    }
  }

  // Draw counters persist across truncation so no uniform is used twice.
  RngStream stream(std::size_t position, std::uint64_t id) {
    return position_stream(cfg_.seed, position, id, draws_[{position, id}]);
  }
  void commit(std::size_t position, std::uint64_t id, const RngStream& rng) { draws_[{position, id}] = rng.index(); }

  Context context_at(std::size_t j) const {
    Context ctx = prompt_;
    ctx.insert(ctx.end(), x_.begin(), x_.begin() + static_cast<std::ptrdiff_t>(j));
    return ctx;
  }

  // One call per provider per batch of positions.
  void fetch(std::size_t p, std::size_t first, std::size_t last) {
    auto& rows = dist_[p];
    if (rows.size() < last) rows.resize(last);
    bool called = false;
    for (std::size_t j = first; j < last; ++j) {
      if (rows[j]) continue;
      const Provider& provider = *f_.providers()[p];
      const Context ctx = context_at(j);
      try {
        if (auto limit = provider.max_context(); limit && ctx.size() > *limit) {
          throw Error(ErrorCode::ContextTooLong, "context of " + std::to_string(ctx.size()) + " tokens exceeds the limit of provider '" +
                                                     provider.name() + "' (" + std::to_string(*limit) + ")");
        }
        rows[j] = provider.next_logdist(ctx);
      } catch (const Error& e) {
        throw at_step(e, j);
      }
      called = true;
    }
    if (called && f_.providers()[p]->is_model()) counter_.add(p);
  }

  void compute_side(std::size_t u, bool proposal_side, std::size_t first, std::size_t last) {
    const Unit& unit = f_.units()[u];
    for (std::size_t p : proposal_side ? unit.proposal_sources : unit.sources) fetch(p, first, last);
    auto& rows = (proposal_side ? proposal_ : auth_)[u];
    if (rows.size() < last) rows.resize(last);
    for (std::size_t j = first; j < last; ++j) {
      if (rows[j]) continue;
      const Context ctx = context_at(j);
      try {
        rows[j] = unit_contribution(f_, u, proposal_side, ctx, [&](std::size_t p) -> const LogDistribution& { return *dist_[p][j]; });
      } catch (const Error& e) {
        throw at_step(e, j);
      }
    }
  }

  void compute(std::size_t u, std::size_t first, std::size_t last) {
    ++stats_[u].batches;
    compute_side(u, false, first, last);
  }

  // Partial sum at position j over the units that cover it (plus `extra`);
  // uncovered supersede units contribute their proposal side.
  LogDistribution distribution(std::size_t j, std::optional<std::size_t> extra) {
    PartialSum sum(f_);
    for (std::size_t u = 0; u < f_.units().size(); ++u) {
      if (covered_[u] > j || extra == u) {
        sum.add(*auth_[u][j], weight_[u]);
      } else if (f_.units()[u].supersede) {
        compute_side(u, true, j, j + 1);
        sum.add(*proposal_[u][j], proposal_weight_[u]);
      }
    }
    return sum.finish();
  }

  const Formula& f_;
  Context prompt_;
  SpeculativeFactors factors_;
  GenerationConfig cfg_;
  ResidualMode mode_;
  std::vector<std::size_t> order_;

  Context x_;
  std::vector<std::size_t> covered_;  // unit u covers positions [0, covered_[u])
  std::vector<std::vector<std::optional<LogDistribution>>> dist_;
  std::vector<std::vector<std::optional<std::vector<double>>>> auth_;
  std::vector<std::vector<std::optional<std::vector<double>>>> proposal_;
  std::vector<std::optional<double>> weight_;
  std::vector<std::optional<double>> proposal_weight_;
  std::map<std::pair<std::size_t, std::uint64_t>, std::uint64_t> draws_;
  CallCounter counter_;
  std::vector<ValidationStats> stats_;
};

}  // namespace detail

/// Same law as generate(); with every factor 1 the result is bit-identical.
inline GenerationResult speculative_generate(const Formula& f, std::span<const TokenId> prompt, const SpeculativeFactors& factors,
                                             const GenerationConfig& cfg, ResidualMode mode = ResidualMode::Exact) {
  validate_context(prompt, f.vocab_size());
  check_generation_config(cfg, f.vocab_size());
  check_factors(f, factors);
  detail::require_static_weights(f);
  const auto started = std::chrono::steady_clock::now();
  GenerationResult result = detail::SpeculativeRun(f, prompt, factors, cfg, mode).run();
  result.wall_time = std::chrono::steady_clock::now() - started;
  return result;
}

// ---------------------------------------------------------------------------
// Call statistics
// ---------------------------------------------------------------------------

struct CallStatistics {
  std::map<std::string, double> calls_per_token;
  double total_calls_per_token = 0.0;
  std::map<std::string, double> acceptance;  // accepted / checked per unit; units never checked are absent
};

inline CallStatistics call_statistics(const GenerationResult& run) {
  CallStatistics stats;
  const double n = static_cast<double>(std::max<std::size_t>(run.tokens.size(), 1));
  std::size_t total = 0;
  for (const auto& [name, calls] : run.calls) {
    stats.calls_per_token[name] = static_cast<double>(calls) / n;
    total += calls;
  }
  stats.total_calls_per_token = static_cast<double>(total) / n;
  for (const ValidationStats& v : run.validation) {
    if (v.checked > 0) stats.acceptance[v.unit] = static_cast<double>(v.accepted) / static_cast<double>(v.checked);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Acceptance estimation and factor tuning
// ---------------------------------------------------------------------------

struct AcceptanceEstimate {
  double a = 1.0;
  std::size_t samples = 0;  // contexts pooled into the mean
};

struct CalibrationOptions {
  std::uint64_t seed = 0;
  std::size_t max_tokens = 16;
  SamplingPolicy policy;
};

/// a_i for every unit: pooled mean over the contexts visited by `samples`
/// calibration generations of 1 - TV(formula without unit i, full formula).
/// A supersede unit is compared against its proposal side.
inline std::vector<AcceptanceEstimate> estimate_acceptance_all(const Formula& f, std::span<const Context> prompts, std::size_t samples,
                                                               const CalibrationOptions& opts = {}) {
  if (prompts.empty() || samples == 0) throw Error(ErrorCode::CalibrationEmpty, "calibration needs at least one prompt and one sample");
  detail::require_static_weights(f);
  const std::size_t n_units = f.units().size();
  std::vector<double> sums(n_units, 0.0);
  std::size_t contexts = 0;

  GenerationConfig cfg;
  cfg.max_tokens = opts.max_tokens;
  cfg.policy = opts.policy;
  for (std::size_t k = 0; k < samples; ++k) {
    const Context& prompt = prompts[k % prompts.size()];
    cfg.seed = RngStream::derive(opts.seed, k);
    const GenerationResult run = generate(f, prompt, cfg);
    Context ctx = prompt;
    for (std::size_t t = 0; t < run.tokens.size(); ++t) {
      std::vector<std::optional<LogDistribution>> cache(f.providers().size());
      const auto dist = [&](std::size_t p) -> const LogDistribution& {
        if (!cache[p]) cache[p] = f.providers()[p]->next_logdist(ctx);
        return *cache[p];
      };
      std::vector<std::vector<double>> auth;
      std::vector<std::optional<std::vector<double>>> prop(n_units);
      for (std::size_t u = 0; u < n_units; ++u) {
        auth.push_back(unit_contribution(f, u, false, ctx, dist));
        if (f.units()[u].supersede) prop[u] = unit_contribution(f, u, true, ctx, dist);
      }
      detail::PartialSum full(f);
      for (std::size_t u = 0; u < n_units; ++u) full.add(auth[u], f.unit_weight_sum(u));
      const LogDistribution p_full = apply_sampling_policy(full.finish(), opts.policy);
      for (std::size_t i = 0; i < n_units; ++i) {
        detail::PartialSum before(f);
        for (std::size_t u = 0; u < n_units; ++u) {
          if (u != i) {
            before.add(auth[u], f.unit_weight_sum(u));
          } else if (prop[u]) {
            before.add(*prop[u], f.unit_weight_sum(u, true));
          }
        }
        sums[i] += 1.0 - total_variation(apply_sampling_policy(before.finish(), opts.policy), p_full);
      }
      ++contexts;
      ctx.push_back(run.tokens[t]);
    }
  }
  std::vector<AcceptanceEstimate> out(n_units);
  for (std::size_t i = 0; i < n_units; ++i) {
    out[i].a = std::clamp(sums[i] / static_cast<double>(contexts), 0.0, 1.0);
    out[i].samples = contexts;
  }
  return out;
}

inline AcceptanceEstimate estimate_acceptance(const Formula& f, std::size_t unit, std::span<const Context> prompts, std::size_t samples,
                                              const CalibrationOptions& opts = {}) {
  if (unit >= f.units().size()) throw Error(ErrorCode::FactorMismatch, "formula has no unit " + std::to_string(unit));
  return estimate_acceptance_all(f, prompts, samples, opts)[unit];
}

/// Per unit: C2 = cost of one evaluation of the unit, C1 = cost of drafting
/// one token while it is pending. Pinned units always get factor 1.
struct CostModel {
  std::vector<std::string> names;
  std::vector<double> call_cost;
  std::vector<double> proposal_cost;
  std::vector<bool> pinned;
};

inline CostModel cost_model(const Formula& f) {
  constexpr double kMinCost = 1e-12;
  const auto cost_of = [&](const std::vector<std::size_t>& sources) {
    double c = 0.0;
    for (std::size_t p : sources) {
      if (f.providers()[p]->is_model()) c += f.providers()[p]->cost_hint();
    }
    return std::max(c, kMinCost);
  };
  CostModel m;
  std::optional<std::size_t> drafter;
  for (std::size_t u = 0; u < f.units().size(); ++u) {
    if (!f.units()[u].classifier && !f.units()[u].supersede) {
      drafter = u;
      break;
    }
  }
  for (std::size_t u = 0; u < f.units().size(); ++u) {
    const Unit& unit = f.units()[u];
    m.names.push_back(unit.label);
    m.call_cost.push_back(cost_of(unit.sources));
    if (unit.supersede) {
      m.proposal_cost.push_back(cost_of(unit.proposal_sources));
    } else {
      m.proposal_cost.push_back(drafter ? cost_of(f.units()[*drafter].sources) : kMinCost);
    }
    m.pinned.push_back(unit.classifier || drafter == u);
  }
  return m;
}

/// Expected compute per token with factor s: (1 - a)(C2 + s*C1) / (1 - a^s).
inline double cost_per_token(double a, double c_small, double c_big, std::size_t s) {
  const double sd = static_cast<double>(s);
  if (a <= 0.0) return c_big + sd * c_small;
  if (a >= 1.0) return (c_big + sd * c_small) / sd;
  return (1.0 - a) * (c_big + sd * c_small) / (1.0 - std::pow(a, sd));
}

enum class SearchMethod { Scan, Ternary };

/// Integer argmin over [1, s_max], ties to the smaller s.
inline std::size_t optimal_factor(double a, double c_small, double c_big, std::size_t s_max, SearchMethod method = SearchMethod::Scan) {
  if (s_max < 1) throw Error(ErrorCode::InvalidArgument, "s_max must be at least 1");
  if (!(a >= 0.0 && a <= 1.0)) throw Error(ErrorCode::InvalidArgument, "acceptance must lie in [0, 1]");
  if (!(c_small > 0.0) || !(c_big > 0.0)) throw Error(ErrorCode::InvalidArgument, "costs must be positive");
  if (a >= 1.0) return s_max;
  const auto cost = [&](std::size_t s) { return cost_per_token(a, c_small, c_big, s); };
  std::size_t lo = 1;
  std::size_t hi = s_max;
  if (method == SearchMethod::Ternary) {
    while (hi - lo > 2) {
      const std::size_t m1 = lo + (hi - lo) / 3;
      const std::size_t m2 = hi - (hi - lo) / 3;
      if (cost(m1) <= cost(m2)) {
        hi = m2;
      } else {
        lo = m1 + 1;
      }
    }
  }
  std::size_t best = lo;
  for (std::size_t s = lo + 1; s <= hi; ++s) {
    if (cost(s) < cost(best)) best = s;
  }
  return best;
}

struct TuningResult {
  SpeculativeFactors factors;
  std::vector<std::string> warnings;
};

inline TuningResult tune_factors(std::span<const AcceptanceEstimate> estimates, const CostModel& costs, std::size_t s_max = 64,
                                 SearchMethod method = SearchMethod::Scan) {
  if (estimates.size() != costs.call_cost.size()) throw Error(ErrorCode::FactorMismatch, "one estimate per term is required");
  TuningResult out;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    if (costs.pinned[i]) {
      out.factors.push_back(1);
      continue;
    }
    const double a = estimates[i].a;
    if (a >= 1.0) {
      out.warnings.push_back("term '" + costs.names[i] + "' has acceptance 1; cost decreases in s, using s_max = " + std::to_string(s_max));
    }
    out.factors.push_back(optimal_factor(a, costs.proposal_cost[i], costs.call_cost[i], s_max, method));
  }
  return out;
}

struct TuningReport {
  struct Entry {
    std::string name;
    double a = 1.0;
    double cost = 1.0;
    std::size_t s = 1;
  };
  std::vector<Entry> terms;
  std::size_t calibration_prompts = 0;
  std::size_t samples = 0;
  std::vector<std::string> warnings;

  SpeculativeFactors factors() const {
    SpeculativeFactors s;
    for (const Entry& e : terms) s.push_back(e.s);
    return s;
  }
};

inline TuningReport tune(const Formula& f, std::span<const Context> prompts, std::size_t samples, const CalibrationOptions& opts = {},
                         std::size_t s_max = 64) {
  const std::vector<AcceptanceEstimate> estimates = estimate_acceptance_all(f, prompts, samples, opts);
  const CostModel costs = cost_model(f);
  TuningResult tuned = tune_factors(estimates, costs, s_max);
  TuningReport report;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    report.terms.push_back({costs.names[i], estimates[i].a, costs.call_cost[i], tuned.factors[i]});
  }
  report.calibration_prompts = prompts.size();
  report.samples = samples;
  report.warnings = std::move(tuned.warnings);
  return report;
}

inline nlohmann::json to_json(const TuningReport& r) {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& e : r.terms) terms.push_back({{"name", e.name}, {"a", e.a}, {"cost", e.cost}, {"s", e.s}});
  return {{"terms", terms}, {"calibration_prompts", r.calibration_prompts}, {"samples", r.samples}};
}

/// Accepts a tuning report object or a bare array of factors.
inline SpeculativeFactors factors_from_json(const nlohmann::json& j) {
  SpeculativeFactors out;
  try {
    const nlohmann::json& list = j.is_object() ? j.at("terms") : j;
    if (!list.is_array()) throw Error(ErrorCode::ConfigError, "factors must be an array");
    for (const auto& item : list) {
      const auto& v = item.is_object() ? item.at("s") : item;
      if (!v.is_number_integer() || v.get<long long>() < 1) throw Error(ErrorCode::ConfigError, "factors must be positive integers");
      out.push_back(v.get<std::size_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("malformed factors: ") + e.what());
  }
  return out;
}

}  // namespace modarith
