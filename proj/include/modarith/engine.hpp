#pragma once

// Plain autoregressive decoding over a formula, and perplexity scoring.

#include "modarith/formula.hpp"

#include <chrono>
#include <set>

namespace modarith {

struct GenerationConfig {
  std::size_t max_tokens = 32;
  std::set<TokenId> stop_ids;
  SamplingPolicy policy;
  std::uint64_t seed = 0;
};

// Speculative runs only: how often a unit's validation kept the drafted token.
struct ValidationStats {
  std::string unit;
  std::size_t checked = 0;
  std::size_t accepted = 0;
  std::size_t batches = 0;
};

struct GenerationResult {
  Context tokens;                             // generated tokens, prompt excluded
  std::vector<double> logprobs;               // per step, under the policy-adjusted distribution
  std::map<std::string, std::size_t> calls;   // provider evaluations by name
  std::chrono::duration<double> wall_time{0};
  std::vector<ValidationStats> validation;
};

// Stream 0 of a position draws the proposed token; stream u+1 belongs to unit u.
inline constexpr std::uint64_t kDraftStream = 0;

inline RngStream position_stream(std::uint64_t seed, std::size_t position, std::uint64_t stream, std::uint64_t index = 0) {
  return RngStream(seed, RngStream::derive(position, stream), index);
}

inline void check_generation_config(const GenerationConfig& cfg, std::size_t vocab_size) {
  if (cfg.max_tokens < 1) throw Error(ErrorCode::InvalidArgument, "max_tokens must be at least 1");
  for (TokenId id : cfg.stop_ids) {
    if (id >= vocab_size) throw Error(ErrorCode::InvalidArgument, "stop id " + std::to_string(id) + " outside the vocabulary");
  }
}

inline Error at_step(const Error& e, std::size_t step) {
  return Error(e.code(), "step " + std::to_string(step) + ": " + e.detail(), e.span());
}

inline std::map<std::string, std::size_t> calls_by_name(const Formula& f, const CallCounter& counter) {
  std::map<std::string, std::size_t> out;
  for (std::size_t p = 0; p < f.providers().size(); ++p) {
    if (!f.providers()[p]->is_model()) continue;
    out[f.providers()[p]->name()] += p < counter.calls.size() ? counter.calls[p] : 0;
  }
  return out;
}

inline GenerationResult generate(const Formula& f, std::span<const TokenId> prompt, const GenerationConfig& cfg) {
  validate_context(prompt, f.vocab_size());
  check_generation_config(cfg, f.vocab_size());
  const auto started = std::chrono::steady_clock::now();

  GenerationResult result;
  CallCounter counter;
  Context ctx(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < cfg.max_tokens; ++step) {
    LogDistribution p;
    try {
      p = apply_sampling_policy(evaluate(f, ctx, &counter), cfg.policy);
    } catch (const Error& e) {
      throw at_step(e, step);
    }
    RngStream rng = position_stream(cfg.seed, step, kDraftStream);
    const TokenId token = sample_categorical(p, rng);
    ctx.push_back(token);
    result.tokens.push_back(token);
    result.logprobs.push_back(p.logp(token));
    if (cfg.stop_ids.count(token)) break;
  }
  result.calls = calls_by_name(f, counter);
  result.wall_time = std::chrono::steady_clock::now() - started;
  return result;
}

/// exp of the negative mean log-probability of text[prompt_len:] under
/// `reference`; +inf when an observed token is floored.
inline double perplexity(const Provider& reference, std::span<const TokenId> text, std::size_t prompt_len) {
  if (prompt_len >= text.size()) throw Error(ErrorCode::InvalidArgument, "prompt_len must be shorter than the text");
  validate_context(text, reference.vocab_size());
  double total = 0.0;
  for (std::size_t k = prompt_len; k < text.size(); ++k) {
    const LogDistribution d = reference.next_logdist(text.first(k));
    if (d.floored(text[k])) return kInfinity;
    total += d.logp(text[k]);
  }
  return std::exp(-total / static_cast<double>(text.size() - prompt_len));
}

}  // namespace modarith
