#pragma once

// Vocabulary, log-space distributions and the sampling primitives shared by
// every other part of the engine.
//
// Probabilities of exactly zero are represented by a floor logit (default
// -1e4). Every operation clamps to the floor instead of producing -inf, so
// weighted sums of log-probabilities never see (-inf) * 0.

#include "modarith/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace modarith {

using TokenId = std::uint32_t;
using Context = std::vector<TokenId>;

inline constexpr double kDefaultFloor = -1e4;
inline constexpr double kInfinity = std::numeric_limits<double>::infinity();
inline constexpr double kNormalizationTolerance = 1e-9;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> tokens, TokenId bos, TokenId eos, bool byte_level = false)
      : tokens_(std::move(tokens)), bos_(bos), eos_(eos), byte_level_(byte_level) {
    if (tokens_.size() < 2) {
      throw Error(ErrorCode::VocabularyError, "vocabulary needs at least two tokens");
    }
    if (bos_ >= tokens_.size() || eos_ >= tokens_.size() || bos_ == eos_) {
      throw Error(ErrorCode::VocabularyError, "BOS/EOS must be distinct ids inside the vocabulary");
    }
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw Error(ErrorCode::VocabularyError, "duplicate token '" + tokens_[i] + "'");
      }
    }
  }

  // 256 single-byte tokens. NUL doubles as EOS and SOH as BOS; neither occurs in text.
  static Vocabulary bytes() {
    std::vector<std::string> tokens;
    tokens.reserve(256);
    for (int b = 0; b < 256; ++b) tokens.emplace_back(1, static_cast<char>(b));
    return Vocabulary(std::move(tokens), 1, 0, true);
  }

  // One token per line; "#:BOS=<id>" / "#:EOS=<id>" lines declare reserved ids
  // and do not occupy an id themselves. Defaults: BOS=0, EOS=1.
  static Vocabulary parse(std::istream& in) {
    std::vector<std::string> tokens;
    std::optional<long long> bos;
    std::optional<long long> eos;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.rfind("#:", 0) == 0) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
          throw Error(ErrorCode::VocabularyError, "malformed directive '" + line + "'");
        }
        const std::string key = line.substr(2, eq - 2);
        long long value = 0;
        try {
          value = std::stoll(line.substr(eq + 1));
        } catch (const std::exception&) {
          throw Error(ErrorCode::VocabularyError, "malformed directive '" + line + "'");
        }
        if (key == "BOS") {
          bos = value;
        } else if (key == "EOS") {
          eos = value;
        } else {
          throw Error(ErrorCode::VocabularyError, "unknown directive '" + key + "'");
        }
        continue;
      }
      tokens.push_back(line);
    }
    const auto check = [&](std::optional<long long> v, TokenId fallback) -> TokenId {
      if (!v) return fallback;
      if (*v < 0 || static_cast<std::size_t>(*v) >= tokens.size()) {
        throw Error(ErrorCode::VocabularyError, "reserved id out of range");
      }
      return static_cast<TokenId>(*v);
    };
    return Vocabulary(std::move(tokens), check(bos, 0), check(eos, 1));
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::VocabularyError, "cannot open vocabulary file " + path.string());
    return parse(in);
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  TokenId bos() const noexcept { return bos_; }
  TokenId eos() const noexcept { return eos_; }
  bool byte_level() const noexcept { return byte_level_; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::optional<TokenId> find(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Byte-level vocabularies map UTF-8 bytes directly; word vocabularies split on whitespace.
  Context encode(std::string_view text) const {
    Context ids;
    if (byte_level_) {
      for (unsigned char c : text) ids.push_back(c);
      return ids;
    }
    std::istringstream words{std::string(text)};
    std::string word;
    while (words >> word) {
      const auto id = find(word);
      if (!id) throw Error(ErrorCode::VocabularyError, "word '" + word + "' is not in the vocabulary");
      ids.push_back(*id);
    }
    return ids;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!byte_level_ && i > 0) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId bos_;
  TokenId eos_;
  bool byte_level_;
};

inline void validate_context(std::span<const TokenId> ctx, std::size_t vocab_size) {
  for (TokenId id : ctx) {
    if (id >= vocab_size) {
      throw Error(ErrorCode::InvalidArgument,
                  "token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab_size));
    }
  }
}

// ---------------------------------------------------------------------------
// LogDistribution
// ---------------------------------------------------------------------------

class LogDistribution {
 public:
  LogDistribution() = default;

  // Entries below the floor (including -inf) are clamped to it. NaN is rejected.
  explicit LogDistribution(std::vector<double> logp, double floor = kDefaultFloor, bool normalized = false)
      : logp_(std::move(logp)), floor_(floor), normalized_(normalized) {
    for (double& v : logp_) {
      if (std::isnan(v)) throw Error(ErrorCode::InvalidArgument, "NaN log-probability");
      if (v < floor_) v = floor_;
    }
  }

  // Builds a normalized distribution from probabilities (renormalized; zeros map to the floor).
  static LogDistribution from_probabilities(std::span<const double> probs, double floor = kDefaultFloor);

  static LogDistribution uniform(std::size_t n, double floor = kDefaultFloor) {
    return LogDistribution(std::vector<double>(n, -std::log(static_cast<double>(n))), floor, true);
  }

  std::size_t size() const noexcept { return logp_.size(); }
  double floor() const noexcept { return floor_; }
  bool normalized() const noexcept { return normalized_; }
  double logp(std::size_t i) const { return logp_[i]; }
  double prob(std::size_t i) const { return logp_[i] <= floor_ ? 0.0 : std::exp(logp_[i]); }
  bool floored(std::size_t i) const { return logp_[i] <= floor_; }
  std::span<const double> values() const noexcept { return logp_; }

  std::vector<double> probabilities() const {
    std::vector<double> p(logp_.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = prob(i);
    return p;
  }

  double mass() const {
    double s = 0.0;
    for (std::size_t i = 0; i < logp_.size(); ++i) s += prob(i);
    return s;
  }

  bool operator==(const LogDistribution&) const = default;

 private:
  std::vector<double> logp_;
  double floor_ = kDefaultFloor;
  bool normalized_ = false;
};

/// Shift-invariant softmax in log space. Entries at the floor stay exactly at
/// the floor; +inf and NaN are rejected.
inline LogDistribution softmax_normalize(std::span<const double> logits, double floor = kDefaultFloor) {
  if (logits.empty()) throw Error(ErrorCode::DegenerateDistribution, "empty logit vector");
  std::vector<double> out(logits.begin(), logits.end());
  double max = floor;
  for (double& v : out) {
    if (std::isnan(v) || v == kInfinity) {
      throw Error(ErrorCode::InvalidArgument, "logits must be finite after floor clamping");
    }
    if (v < floor) v = floor;
    max = std::max(max, v);
  }
  if (max <= floor) throw Error(ErrorCode::DegenerateDistribution, "every logit is at the floor");
  double sum = 0.0;
  for (double v : out) {
    if (v > floor) sum += std::exp(v - max);
  }
  const double lse = max + std::log(sum);
  for (double& v : out) {
    v = v <= floor ? floor : std::max(v - lse, floor);
  }
  return LogDistribution(std::move(out), floor, true);
}

inline LogDistribution LogDistribution::from_probabilities(std::span<const double> probs, double floor) {
  std::vector<double> logits(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= 0.0) || !std::isfinite(probs[i])) {
      throw Error(ErrorCode::InvalidArgument, "probabilities must be finite and non-negative");
    }
    logits[i] = probs[i] > 0.0 ? std::log(probs[i]) : floor;
  }
  return softmax_normalize(logits, floor);
}

namespace detail {

inline void require_pair(const LogDistribution& p, const LogDistribution& q) {
  if (p.size() != q.size()) throw Error(ErrorCode::InvalidArgument, "distributions differ in vocabulary size");
  if (!p.normalized() || !q.normalized()) throw Error(ErrorCode::InvalidArgument, "distribution is not normalized");
}

}  // namespace detail

/// Returns kInfinity when q is floored on a token that p supports.
inline double weighted_kl(const LogDistribution& p, const LogDistribution& q, std::span<const double> weights) {
  detail::require_pair(p, q);
  if (weights.size() != p.size()) throw Error(ErrorCode::InvalidArgument, "weight vector has wrong length");
  double total = 0.0;
  for (std::size_t x = 0; x < p.size(); ++x) {
    if (p.floored(x) || weights[x] == 0.0) continue;
    if (!std::isfinite(weights[x])) throw Error(ErrorCode::InvalidArgument, "weights must be finite");
    if (q.floored(x)) return kInfinity;
    total += p.prob(x) * weights[x] * (p.logp(x) - q.logp(x));
  }
  return total;
}

inline double kl_divergence(const LogDistribution& p, const LogDistribution& q) {
  detail::require_pair(p, q);
  double total = 0.0;
  for (std::size_t x = 0; x < p.size(); ++x) {
    if (p.floored(x)) continue;
    if (q.floored(x)) return kInfinity;
    total += p.prob(x) * (p.logp(x) - q.logp(x));
  }
  return std::max(total, 0.0);
}

inline double total_variation(const LogDistribution& p, const LogDistribution& q) {
  detail::require_pair(p, q);
  double total = 0.0;
  for (std::size_t x = 0; x < p.size(); ++x) total += std::abs(p.prob(x) - q.prob(x));
  return std::min(0.5 * total, 1.0);
}

// ---------------------------------------------------------------------------
// RngStream
// ---------------------------------------------------------------------------

/// Counter-based generator: draw i of stream (seed, stream) is a pure function
/// of the triple, so streams can be recreated anywhere without replaying.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0)
      : seed_(seed), stream_(stream), key_(mix(mix(seed) ^ mix(stream + kGolden))), index_(index) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t index() const noexcept { return index_; }

  std::uint64_t next_u64() { return mix(key_ + kGolden * ++index_); }

  // Uniform on [0, 1) with 53 random bits.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // SplitMix64 finalizer; also used to derive child seeds.
  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += kGolden;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t derive(std::uint64_t a, std::uint64_t b) { return mix(mix(a) ^ (b * kGolden + 0x632be59bd9b4e019ULL)); }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t index_;
};

/// Inverse-CDF draw over token ids in ascending order.
inline TokenId sample_categorical(const LogDistribution& p, RngStream& rng) {
  if (!p.normalized()) throw Error(ErrorCode::InvalidArgument, "cannot sample an unnormalized distribution");
  std::optional<TokenId> last;
  for (std::size_t x = 0; x < p.size(); ++x) {
    if (p.prob(x) > 0.0) last = static_cast<TokenId>(x);
  }
  if (!last) throw Error(ErrorCode::DegenerateDistribution, "no token has positive probability");
  const double u = rng.next_uniform();
  double cumulative = 0.0;
  for (std::size_t x = 0; x < p.size(); ++x) {
    cumulative += p.prob(x);
    if (u < cumulative) return static_cast<TokenId>(x);
  }
  return *last;
}

// ---------------------------------------------------------------------------
// Sampling policies
// ---------------------------------------------------------------------------

struct SamplingPolicy {
  std::optional<std::size_t> top_k;
  double temperature = 1.0;

  static SamplingPolicy greedy() { return {1, 1.0}; }
  static SamplingPolicy with_top_k(std::size_t k) { return {k, 1.0}; }
  static SamplingPolicy with_temperature(double t) { return {std::nullopt, t}; }

  bool is_identity(std::size_t vocab_size) const {
    return temperature == 1.0 && (!top_k || *top_k >= vocab_size);
  }

  bool operator==(const SamplingPolicy&) const = default;
};

/// Temperature first, then top-k (ties keep the lower id). k larger than the
/// vocabulary is clamped; identity policies return the input unchanged.
inline LogDistribution apply_sampling_policy(const LogDistribution& p, const SamplingPolicy& policy) {
  if (!p.normalized()) throw Error(ErrorCode::InvalidArgument, "policy needs a normalized distribution");
  if (!(policy.temperature > 0.0)) throw Error(ErrorCode::InvalidArgument, "temperature must be positive");
  if (policy.top_k && *policy.top_k == 0) throw Error(ErrorCode::InvalidArgument, "top_k must be at least 1");
  if (policy.is_identity(p.size())) return p;

  std::vector<double> logits(p.values().begin(), p.values().end());
  const double floor = p.floor();
  if (policy.temperature != 1.0) {
    for (double& v : logits) {
      if (v > floor) v = std::max(v / policy.temperature, floor + 1.0);
    }
  }
  if (policy.top_k && *policy.top_k < logits.size()) {
    std::vector<std::size_t> order(logits.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    for (std::size_t r = *policy.top_k; r < order.size(); ++r) logits[order[r]] = floor;
  }
  return softmax_normalize(logits, floor);
}

}  // namespace modarith
