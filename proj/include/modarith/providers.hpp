#pragma once

// Autoregressive distribution sources and binary classifiers.
//
// Providers must be pure: the same context always yields the same
// distribution. Speculative validation re-evaluates contexts and relies on it.

#include "modarith/core_dist.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace modarith {

class Provider {
 public:
  Provider(std::string name, std::size_t vocab_size) : name_(std::move(name)), vocab_size_(vocab_size) {}
  virtual ~Provider() = default;

  const std::string& name() const noexcept { return name_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }

  virtual LogDistribution next_logdist(std::span<const TokenId> ctx) const = 0;

  // Relative compute per call.
  virtual double cost_hint() const { return 1.0; }
  virtual std::optional<std::size_t> max_context() const { return std::nullopt; }
  // False for sources that are not model evaluations (the uniform distribution).
  virtual bool is_model() const { return true; }

 private:
  std::string name_;
  std::size_t vocab_size_;
};

using ProviderPtr = std::shared_ptr<const Provider>;

class UniformProvider final : public Provider {
 public:
  explicit UniformProvider(std::size_t vocab_size, double floor = kDefaultFloor)
      : Provider("uniform", vocab_size), dist_(LogDistribution::uniform(vocab_size, floor)) {}

  LogDistribution next_logdist(std::span<const TokenId>) const override { return dist_; }
  double cost_hint() const override { return 0.0; }
  bool is_model() const override { return false; }

 private:
  LogDistribution dist_;
};

// ---------------------------------------------------------------------------
// n-gram model with add-alpha smoothing
// ---------------------------------------------------------------------------

class NgramProvider final : public Provider {
 public:
  struct Row {
    std::vector<double> counts;
    double total = 0.0;
  };

  NgramProvider(std::string name, std::size_t vocab_size, std::size_t order, double alpha,
                std::map<Context, Row> table, double cost = 1.0)
      : Provider(std::move(name), vocab_size), order_(order), alpha_(alpha), table_(std::move(table)), cost_(cost) {
    if (order_ < 1) throw Error(ErrorCode::InvalidArgument, "n-gram order must be at least 1");
    if (!(alpha_ > 0.0)) throw Error(ErrorCode::InvalidArgument, "smoothing alpha must be positive");
  }

  std::size_t order() const noexcept { return order_; }
  double alpha() const noexcept { return alpha_; }
  const std::map<Context, Row>& table() const noexcept { return table_; }

  LogDistribution next_logdist(std::span<const TokenId> ctx) const override {
    const std::size_t n = vocab_size();
    const std::size_t keep = std::min(order_ - 1, ctx.size());
    const Context key(ctx.end() - static_cast<std::ptrdiff_t>(keep), ctx.end());
    std::vector<double> logp(n);
    const auto it = table_.find(key);
    const double denom = (it == table_.end() ? 0.0 : it->second.total) + alpha_ * static_cast<double>(n);
    for (std::size_t x = 0; x < n; ++x) {
      const double c = it == table_.end() ? 0.0 : it->second.counts[x];
      logp[x] = std::log((c + alpha_) / denom);
    }
    return LogDistribution(std::move(logp), kDefaultFloor, true);
  }

  double cost_hint() const override { return cost_; }

 private:
  std::size_t order_;
  double alpha_;
  std::map<Context, Row> table_;
  double cost_;
};

/// Counts every (context suffix, next token) pair of every sequence. Positions
/// near the start of a sequence use the shorter available context as key.
inline std::shared_ptr<NgramProvider> train_ngram(std::string name, std::span<const Context> corpus, std::size_t vocab_size,
                                                  std::size_t order, double alpha, double cost = 1.0) {
  if (order < 1) throw Error(ErrorCode::InvalidArgument, "n-gram order must be at least 1");
  if (!(alpha > 0.0)) throw Error(ErrorCode::InvalidArgument, "smoothing alpha must be positive");
  std::map<Context, NgramProvider::Row> table;
  std::size_t observations = 0;
  for (const Context& seq : corpus) {
    validate_context(seq, vocab_size);
    for (std::size_t k = 0; k < seq.size(); ++k) {
      const std::size_t keep = std::min(order - 1, k);
      Context key(seq.begin() + static_cast<std::ptrdiff_t>(k - keep), seq.begin() + static_cast<std::ptrdiff_t>(k));
      auto& row = table[std::move(key)];
      if (row.counts.empty()) row.counts.assign(vocab_size, 0.0);
      row.counts[seq[k]] += 1.0;
      row.total += 1.0;
      ++observations;
    }
  }
  if (observations == 0) throw Error(ErrorCode::EmptyCorpus, "corpus contains no tokens");
  return std::make_shared<NgramProvider>(std::move(name), vocab_size, order, alpha, std::move(table), cost);
}

/// Whitespace-separated token ids, one sequence per line; blank lines are skipped.
inline std::vector<Context> parse_corpus(std::istream& in) {
  std::vector<Context> corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    Context seq;
    std::string field;
    while (fields >> field) {
      std::size_t used = 0;
      unsigned long value = 0;
      try {
        value = std::stoul(field, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != field.size() || field[0] == '-') {
        throw Error(ErrorCode::InvalidArgument, "corpus line " + std::to_string(line_no) + ": '" + field + "' is not a token id");
      }
      seq.push_back(static_cast<TokenId>(value));
    }
    if (!seq.empty()) corpus.push_back(std::move(seq));
  }
  return corpus;
}

inline std::vector<Context> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::InvalidArgument, "cannot open corpus file " + path.string());
  return parse_corpus(in);
}

// ---------------------------------------------------------------------------
// Explicit table of distributions keyed by context suffix
// ---------------------------------------------------------------------------

class TabularProvider final : public Provider {
 public:
  TabularProvider(std::string name, LogDistribution fallback, std::size_t key_length = 3, double cost = 1.0)
      : Provider(std::move(name), fallback.size()), fallback_(std::move(fallback)), key_length_(key_length), cost_(cost) {
    require_normalized(fallback_);
  }

  std::size_t key_length() const noexcept { return key_length_; }
  const LogDistribution& fallback() const noexcept { return fallback_; }
  const std::map<Context, LogDistribution>& entries() const noexcept { return entries_; }

  TabularProvider& set(Context suffix, LogDistribution dist) {
    if (suffix.size() > key_length_) throw Error(ErrorCode::InvalidArgument, "suffix longer than the key length");
    validate_context(suffix, vocab_size());
    require_normalized(dist);
    entries_.insert_or_assign(std::move(suffix), std::move(dist));
    return *this;
  }

  // Longest stored suffix of the context wins; unmatched contexts get the fallback.
  LogDistribution next_logdist(std::span<const TokenId> ctx) const override {
    if (!entries_.empty()) {
      Context key;
      for (std::size_t len = std::min(key_length_, ctx.size()) + 1; len-- > 0;) {
        key.assign(ctx.end() - static_cast<std::ptrdiff_t>(len), ctx.end());
        const auto it = entries_.find(key);
        if (it != entries_.end()) return it->second;
      }
    }
    return fallback_;
  }

  double cost_hint() const override { return cost_; }

 private:
  void require_normalized(const LogDistribution& d) const {
    if (d.size() != vocab_size()) throw Error(ErrorCode::VocabMismatch, "table entry has the wrong vocabulary size");
    if (!d.normalized() || std::abs(d.mass() - 1.0) > kNormalizationTolerance) {
      throw Error(ErrorCode::InvalidArgument, "table entries must be normalized distributions");
    }
  }

  LogDistribution fallback_;
  std::size_t key_length_;
  std::map<Context, LogDistribution> entries_;
  double cost_;
};

// ---------------------------------------------------------------------------
// Classifiers
// ---------------------------------------------------------------------------

class Classifier {
 public:
  explicit Classifier(std::string name) : name_(std::move(name)) {}
  virtual ~Classifier() = default;

  const std::string& name() const noexcept { return name_; }
  // Probability in (0, 1) that the text carries the attribute.
  virtual double score(std::span<const TokenId> text) const = 0;

 private:
  std::string name_;
};

using ClassifierPtr = std::shared_ptr<const Classifier>;

class FunctionClassifier final : public Classifier {
 public:
  using Fn = std::function<double(std::span<const TokenId>)>;
  FunctionClassifier(std::string name, Fn fn) : Classifier(std::move(name)), fn_(std::move(fn)) {}
  double score(std::span<const TokenId> text) const override { return fn_(text); }

 private:
  Fn fn_;
};

/// logistic(bias + weight * hits) where hits counts target tokens among the
/// last `window` tokens (whole text when window is 0).
class TokenSetClassifier final : public Classifier {
 public:
  TokenSetClassifier(std::string name, std::vector<TokenId> targets, double weight, double bias, std::size_t window = 0)
      : Classifier(std::move(name)), targets_(std::move(targets)), weight_(weight), bias_(bias), window_(window) {
    std::sort(targets_.begin(), targets_.end());
  }

  const std::vector<TokenId>& targets() const noexcept { return targets_; }
  double weight() const noexcept { return weight_; }
  double bias() const noexcept { return bias_; }
  std::size_t window() const noexcept { return window_; }

  double score(std::span<const TokenId> text) const override {
    const std::size_t start = window_ == 0 || window_ >= text.size() ? 0 : text.size() - window_;
    double hits = 0.0;
    for (std::size_t i = start; i < text.size(); ++i) {
      if (std::binary_search(targets_.begin(), targets_.end(), text[i])) hits += 1.0;
    }
    const double z = bias_ + weight_ * hits;
    // keep strictly inside (0, 1)
    return std::clamp(1.0 / (1.0 + std::exp(-z)), 1e-12, 1.0 - 1e-12);
  }

 private:
  std::vector<TokenId> targets_;
  double weight_;
  double bias_;
  std::size_t window_;
};

inline double checked_score(const Classifier& c, std::span<const TokenId> text) {
  const double s = c.score(text);
  if (!(s > 0.0 && s < 1.0)) {
    throw Error(ErrorCode::ClassifierRange, "classifier '" + c.name() + "' returned " + std::to_string(s) + " outside (0,1)");
  }
  return s;
}

/// Q_C(x | ctx) proportional to c(ctx + x), scoring only the top_k tokens of
/// `ranking`; the remaining tokens reuse the prefix score c(ctx).
inline LogDistribution classifier_induced_distribution(const Classifier& c, std::span<const TokenId> ctx, std::size_t top_k,
                                                       const LogDistribution& ranking, double floor = kDefaultFloor) {
  if (top_k == 0) throw Error(ErrorCode::InvalidArgument, "classifier top_k must be at least 1");
  if (!ranking.normalized()) throw Error(ErrorCode::InvalidArgument, "ranking distribution must be normalized");
  const std::size_t n = ranking.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = std::min(top_k, n);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return ranking.logp(a) > ranking.logp(b); });

  std::vector<double> logits(n);
  if (k < n) {
    const double prefix = std::log(checked_score(c, ctx));
    for (std::size_t r = k; r < n; ++r) logits[order[r]] = prefix;
  }
  Context extended(ctx.begin(), ctx.end());
  extended.push_back(0);
  for (std::size_t r = 0; r < k; ++r) {
    extended.back() = static_cast<TokenId>(order[r]);
    logits[order[r]] = std::log(checked_score(c, extended));
  }
  return softmax_normalize(logits, floor);
}

}  // namespace modarith
