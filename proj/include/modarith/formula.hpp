#pragma once

// Model arithmetic formulas: the expression tree and its parser, the flat
// weighted-term form used for evaluation, and the evaluator itself.
//
// A formula denotes the distribution
//
//     P(x | ctx) = softmax( sum_i lambda_i * f'_i(x) * log Q_i(x | ctx) / S )
//
// where S = sum_i lambda_i * f'_i(x) in kl_optimal mode and S = 1 in raw mode.
// union(Q1, Q2) expands to two indicator-weighted terms whose log-sum is
// max(log Q1, log Q2); intersection swaps the indicators and yields the min.
// A classifier term lambda*classifier(C) contributes lambda*(log Q_C - log U).
//
// DSL grammar (whitespace insignificant):
//
//     formula := term (("+" | "-") term)*
//     term    := [number "*"] atom
//     atom    := ident | "(" formula ")" | "uniform"
//              | "union(" formula "," formula ")"
//              | "intersection(" formula "," formula ")"
//              | "classifier(" ident ["," integer] ")"
//              | "supersede(" formula "," formula ")"

#include "modarith/core_dist.hpp"
#include "modarith/providers.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace modarith {

enum class NormalizationMode { Raw, KlOptimal };

inline constexpr std::size_t kDefaultClassifierTopK = 100;
// Upper clamp on combined logits; keeps "Q1 - lambda*Q2" finite where Q2 is floored.
inline constexpr double kLogitCeiling = 50.0;

inline std::string_view to_string(NormalizationMode mode) { return mode == NormalizationMode::Raw ? "raw" : "kl_optimal"; }

inline NormalizationMode parse_mode(std::string_view text) {
  if (text == "raw") return NormalizationMode::Raw;
  if (text == "kl_optimal") return NormalizationMode::KlOptimal;
  throw Error(ErrorCode::InvalidArgument, "unknown normalization mode '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Expression tree
// ---------------------------------------------------------------------------

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct Summand {
  double coefficient = 1.0;
  ExprPtr expr;
};

struct Expr {
  enum class Kind { Source, Uniform, Classifier, Union, Intersection, Supersede, Sum };

  Kind kind = Kind::Sum;
  std::string name;                  // Source, Classifier
  std::optional<std::size_t> top_k;  // Classifier
  std::vector<Summand> operands;     // Sum: summands; binary operators: two operands with coefficient 1
  SourceSpan span;                   // ignored by comparisons

  static ExprPtr source(std::string name, SourceSpan span = {}) {
    return std::make_shared<Expr>(Expr{Kind::Source, std::move(name), std::nullopt, {}, span});
  }
  static ExprPtr uniform(SourceSpan span = {}) { return std::make_shared<Expr>(Expr{Kind::Uniform, {}, std::nullopt, {}, span}); }
  static ExprPtr classifier(std::string name, std::optional<std::size_t> top_k = std::nullopt, SourceSpan span = {}) {
    return std::make_shared<Expr>(Expr{Kind::Classifier, std::move(name), top_k, {}, span});
  }
  static ExprPtr binary(Kind kind, ExprPtr lhs, ExprPtr rhs, SourceSpan span = {}) {
    return std::make_shared<Expr>(Expr{kind, {}, std::nullopt, {{1.0, std::move(lhs)}, {1.0, std::move(rhs)}}, span});
  }
  static ExprPtr sum(std::vector<Summand> summands, SourceSpan span = {}) {
    return std::make_shared<Expr>(Expr{Kind::Sum, {}, std::nullopt, std::move(summands), span});
  }
};

inline bool same_tree(const Expr& a, const Expr& b) {
  if (a.kind != b.kind || a.name != b.name || a.top_k != b.top_k || a.operands.size() != b.operands.size()) return false;
  for (std::size_t i = 0; i < a.operands.size(); ++i) {
    if (a.operands[i].coefficient != b.operands[i].coefficient) return false;
    if (!same_tree(*a.operands[i].expr, *b.operands[i].expr)) return false;
  }
  return true;
}

inline std::string format_number(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline std::string to_string(const Expr& e);

namespace detail {

inline std::string atom_text(const Expr& e) {
  switch (e.kind) {
    case Expr::Kind::Source: return e.name;
    case Expr::Kind::Uniform: return "uniform";
    case Expr::Kind::Classifier:
      return "classifier(" + e.name + (e.top_k ? ", " + std::to_string(*e.top_k) : std::string()) + ")";
    case Expr::Kind::Union:
    case Expr::Kind::Intersection:
    case Expr::Kind::Supersede: {
      const char* fn = e.kind == Expr::Kind::Union ? "union(" : e.kind == Expr::Kind::Intersection ? "intersection(" : "supersede(";
      return fn + to_string(*e.operands[0].expr) + ", " + to_string(*e.operands[1].expr) + ")";
    }
    case Expr::Kind::Sum: return "(" + to_string(e) + ")";
  }
  return {};
}

inline std::string summand_text(const Summand& s) {
  const std::string atom = atom_text(*s.expr);
  return s.coefficient == 1.0 ? atom : format_number(s.coefficient) + "*" + atom;
}

}  // namespace detail

/// Canonical text; parsing it yields an equal tree.
inline std::string to_string(const Expr& e) {
  if (e.kind != Expr::Kind::Sum) return detail::atom_text(e);
  std::string out;
  for (std::size_t i = 0; i < e.operands.size(); ++i) {
    const Summand& s = e.operands[i];
    if (i == 0) {
      out += detail::summand_text(s);
    } else if (s.coefficient < 0.0) {
      out += " - " + detail::summand_text({-s.coefficient, s.expr});
    } else {
      out += " + " + detail::summand_text(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

namespace detail {

class FormulaParser {
 public:
  explicit FormulaParser(std::string_view text) : text_(text) {}

  ExprPtr parse() {
    skip_space();
    ExprPtr root = formula();
    skip_space();
    if (pos_ != text_.size()) fail(pos_, pos_ + 1, "unexpected '" + std::string(1, text_[pos_]) + "'");
    return root;
  }

 private:
  static bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
  static bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

  SourceSpan span(std::size_t begin, std::size_t end) const {
    SourceSpan s{begin, std::min(end, text_.size()), 1, 1};
    for (std::size_t i = 0; i < begin && i < text_.size(); ++i) {
      if (text_[i] == '\n') {
        ++s.line;
        s.column = 1;
      } else {
        ++s.column;
      }
    }
    return s;
  }

  [[noreturn]] void fail(std::size_t begin, std::size_t end, const std::string& message) const {
    const SourceSpan s = span(begin, end);
    std::string near = begin < text_.size() ? std::string(text_.substr(begin, std::max<std::size_t>(end - begin, 1))) : "end of input";
    throw Error(ErrorCode::ParseError,
                std::to_string(s.line) + ":" + std::to_string(s.column) + ": " + message + " (at '" + near + "')", s);
  }

  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool peek(char c) {
    skip_space();
    return pos_ < text_.size() && text_[pos_] == c;
  }

  void expect(char c) {
    if (!peek(c)) fail(pos_, pos_ + 1, std::string("expected '") + c + "'");
    ++pos_;
  }

  bool number_ahead() {
    skip_space();
    std::size_t p = pos_;
    if (p < text_.size() && (text_[p] == '+' || text_[p] == '-')) ++p;
    while (p < text_.size() && std::isspace(static_cast<unsigned char>(text_[p]))) ++p;
    return p < text_.size() && (std::isdigit(static_cast<unsigned char>(text_[p])) || text_[p] == '.');
  }

  double number() {
    skip_space();
    const std::size_t begin = pos_;
    double sign = 1.0;
    if (text_[pos_] == '+' || text_[pos_] == '-') {
      if (text_[pos_] == '-') sign = -1.0;
      ++pos_;
      skip_space();
    }
    const std::size_t digits = pos_;
    while (pos_ < text_.size() && (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.')) ++pos_;
    if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
      std::size_t p = pos_ + 1;
      if (p < text_.size() && (text_[p] == '+' || text_[p] == '-')) ++p;
      if (p < text_.size() && std::isdigit(static_cast<unsigned char>(text_[p]))) {
        pos_ = p;
        while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      }
    }
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(text_.data() + digits, text_.data() + pos_, value);
    if (ec != std::errc() || ptr != text_.data() + pos_) fail(begin, pos_, "malformed number");
    return sign * value;
  }

  std::string ident() {
    skip_space();
    const std::size_t begin = pos_;
    if (pos_ >= text_.size() || !ident_start(text_[pos_])) fail(pos_, pos_ + 1, "expected an identifier");
    while (pos_ < text_.size() && ident_char(text_[pos_])) ++pos_;
    return std::string(text_.substr(begin, pos_ - begin));
  }

  ExprPtr formula() {
    skip_space();
    const std::size_t begin = pos_;
    std::vector<Summand> summands;
    summands.push_back(term(1.0));
    while (true) {
      skip_space();
      if (pos_ >= text_.size() || (text_[pos_] != '+' && text_[pos_] != '-')) break;
      const double sign = text_[pos_] == '-' ? -1.0 : 1.0;
      ++pos_;
      summands.push_back(term(sign));
    }
    return Expr::sum(std::move(summands), span(begin, pos_));
  }

  Summand term(double sign) {
    double coefficient = 1.0;
    if (number_ahead()) {
      coefficient = number();
      expect('*');
    }
    return {sign * coefficient, atom()};
  }

  ExprPtr atom() {
    skip_space();
    const std::size_t begin = pos_;
    if (peek('(')) {
      ++pos_;
      ExprPtr inner = formula();
      expect(')');
      return inner;
    }
    if (pos_ >= text_.size()) fail(pos_, pos_, "expected a term");
    if (!ident_start(text_[pos_])) fail(pos_, pos_ + 1, "expected a term");
    const std::string name = ident();
    const bool call = peek('(');

    if (name == "union" || name == "intersection" || name == "supersede") {
      if (!call) fail(begin, pos_, "'" + name + "' must be called with two arguments");
      ++pos_;
      ExprPtr lhs = formula();
      expect(',');
      ExprPtr rhs = formula();
      expect(')');
      const auto kind = name == "union" ? Expr::Kind::Union : name == "intersection" ? Expr::Kind::Intersection : Expr::Kind::Supersede;
      return Expr::binary(kind, std::move(lhs), std::move(rhs), span(begin, pos_));
    }
    if (name == "classifier") {
      if (!call) fail(begin, pos_, "'classifier' must be called with a classifier name");
      ++pos_;
      const std::size_t name_begin = pos_;
      const std::string cname = ident();
      const SourceSpan name_span = span(name_begin, pos_);
      std::optional<std::size_t> top_k;
      if (peek(',')) {
        ++pos_;
        skip_space();
        const std::size_t num_begin = pos_;
        while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
        std::size_t k = 0;
        const auto [ptr, ec] = std::from_chars(text_.data() + num_begin, text_.data() + pos_, k);
        if (num_begin == pos_ || ec != std::errc() || k == 0) fail(num_begin, pos_ + 1, "expected a positive integer top-k");
        top_k = k;
      }
      expect(')');
      auto node = Expr::classifier(cname, top_k, span(begin, pos_));
      auto copy = std::make_shared<Expr>(*node);
      copy->span = SourceSpan{name_span.begin, name_span.end, name_span.line, name_span.column};
      return copy;
    }
    if (name == "uniform") {
      if (call) fail(begin, pos_ + 1, "'uniform' takes no arguments");
      return Expr::uniform(span(begin, pos_));
    }
    if (call) fail(begin, pos_ + 1, "unknown function '" + name + "'");
    return Expr::source(name, span(begin, pos_));
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline ExprPtr parse_expression(std::string_view text) { return detail::FormulaParser(text).parse(); }

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

class Registry {
 public:
  explicit Registry(std::size_t vocab_size, double floor = kDefaultFloor)
      : vocab_size_(vocab_size), floor_(floor), uniform_(std::make_shared<UniformProvider>(vocab_size, floor)) {}

  Registry& add(ProviderPtr provider) {
    if (provider->vocab_size() != vocab_size_) {
      throw Error(ErrorCode::VocabMismatch, "provider '" + provider->name() + "' uses a different vocabulary size");
    }
    check_fresh(provider->name());
    providers_.emplace(provider->name(), std::move(provider));
    return *this;
  }

  Registry& add(ClassifierPtr classifier) {
    check_fresh(classifier->name());
    classifiers_.emplace(classifier->name(), std::move(classifier));
    return *this;
  }

  ProviderPtr provider(const std::string& name) const {
    const auto it = providers_.find(name);
    return it == providers_.end() ? nullptr : it->second;
  }
  ClassifierPtr classifier(const std::string& name) const {
    const auto it = classifiers_.find(name);
    return it == classifiers_.end() ? nullptr : it->second;
  }
  const ProviderPtr& uniform() const noexcept { return uniform_; }

  std::size_t vocab_size() const noexcept { return vocab_size_; }
  double floor() const noexcept { return floor_; }
  std::size_t classifier_top_k() const noexcept { return classifier_top_k_; }
  void set_classifier_top_k(std::size_t k) {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "classifier top_k must be at least 1");
    classifier_top_k_ = k;
  }

  const std::map<std::string, ProviderPtr>& providers() const noexcept { return providers_; }
  const std::map<std::string, ClassifierPtr>& classifiers() const noexcept { return classifiers_; }

 private:
  void check_fresh(const std::string& name) const {
    static const std::set<std::string> reserved = {"union", "intersection", "classifier", "supersede", "uniform"};
    if (reserved.count(name)) throw Error(ErrorCode::InvalidArgument, "'" + name + "' is a reserved word");
    if (providers_.count(name) || classifiers_.count(name)) {
      throw Error(ErrorCode::InvalidArgument, "duplicate registry name '" + name + "'");
    }
  }

  std::size_t vocab_size_;
  double floor_;
  std::size_t classifier_top_k_ = kDefaultClassifierTopK;
  ProviderPtr uniform_;
  std::map<std::string, ProviderPtr> providers_;
  std::map<std::string, ClassifierPtr> classifiers_;
};

// ---------------------------------------------------------------------------
// Flat weighted-term form
// ---------------------------------------------------------------------------

enum class WeightKind { Ones, Indicator, Classifier };
enum class Operator { Linear, Union, Intersection, Classifier };

/// Context-dependent scale lambda(ctx); programmatic only.
using ContextScale = std::function<double(std::span<const TokenId>)>;

struct Term {
  double coefficient = 1.0;
  WeightKind weight = WeightKind::Ones;
  Operator op = Operator::Linear;
  std::size_t source = 0;  // provider index, or classifier index for classifier terms
  // Indicator weight: [Q_lhs(x) > Q_rhs(x)] when `first`, its complement otherwise.
  std::size_t lhs = 0;
  std::size_t rhs = 0;
  bool first = true;
  std::optional<std::size_t> top_k;  // classifier terms
  bool proposal = false;             // proposal side of a supersede
  std::size_t unit = 0;
  ContextScale scale;
};

/// A top-level additive component. Speculative factors are assigned per unit.
struct Unit {
  std::string label;
  double coefficient = 1.0;
  bool classifier = false;
  bool supersede = false;
  std::vector<std::size_t> terms;
  std::vector<std::size_t> sources;           // providers needed for the authoritative side
  std::vector<std::size_t> proposal_sources;  // providers needed for the proposal side
};

class Formula {
 public:
  const ExprPtr& expression() const noexcept { return expr_; }
  std::string to_string() const { return modarith::to_string(*expr_); }
  const Registry& registry() const noexcept { return registry_; }

  const std::vector<ProviderPtr>& providers() const noexcept { return providers_; }
  const std::vector<ClassifierPtr>& classifiers() const noexcept { return classifiers_; }
  const std::vector<Term>& terms() const noexcept { return terms_; }
  const std::vector<Unit>& units() const noexcept { return units_; }

  NormalizationMode mode() const noexcept { return mode_; }
  std::size_t vocab_size() const noexcept { return registry_.vocab_size(); }
  double floor() const noexcept { return registry_.floor(); }
  std::size_t classifier_top_k() const noexcept { return classifier_top_k_; }
  bool rebalanced() const noexcept { return rebalanced_; }
  // Provider whose top-k tokens a classifier term scores.
  std::optional<std::size_t> ranking_source() const noexcept { return ranking_; }

  Formula with_mode(NormalizationMode mode) const {
    Formula f = *this;
    f.mode_ = mode;
    return f;
  }
  Formula with_classifier_top_k(std::size_t k) const {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "classifier top_k must be at least 1");
    Formula f = *this;
    f.classifier_top_k_ = k;
    return f;
  }
  /// Attaches a context-dependent multiplier to every term of a unit.
  Formula with_context_scale(std::size_t unit, ContextScale scale) const {
    Formula f = *this;
    for (std::size_t t : f.units_.at(unit).terms) f.terms_[t].scale = scale;
    return f;
  }

  /// Weight sum of one side of a unit when it is token-independent
  /// (indicator pairs sum to their coefficient, classifier pairs to 0).
  std::optional<double> unit_weight_sum(std::size_t unit, bool proposal_side = false) const {
    double total = 0.0;
    std::map<std::pair<std::size_t, std::size_t>, std::pair<double, double>> indicator;
    for (std::size_t t : units_.at(unit).terms) {
      const Term& term = terms_[t];
      if (term.proposal != proposal_side) continue;
      if (term.scale) return std::nullopt;
      if (term.weight == WeightKind::Ones) total += term.coefficient;
      if (term.weight == WeightKind::Indicator) {
        auto& [a, b] = indicator[{term.lhs, term.rhs}];
        (term.first ? a : b) += term.coefficient;
      }
    }
    for (const auto& [key, sums] : indicator) {
      if (sums.first != sums.second) return std::nullopt;
      total += sums.first;
    }
    return total;
  }

  /// Sum of the unit weight sums in declaration order, if all are constant.
  std::optional<double> static_weight_sum() const {
    double total = 0.0;
    for (std::size_t u = 0; u < units_.size(); ++u) {
      const auto w = unit_weight_sum(u);
      if (!w) return std::nullopt;
      total += *w;
    }
    return total;
  }

  std::size_t provider_index(const std::string& name) const {
    for (std::size_t i = 0; i < providers_.size(); ++i) {
      if (providers_[i]->name() == name) return i;
    }
    throw Error(ErrorCode::NameError, "formula does not use provider '" + name + "'");
  }

 private:
  friend class FormulaBuilder;
  friend Formula rebalance_weights(const Formula& f);

  ExprPtr expr_;
  Registry registry_{2};
  NormalizationMode mode_ = NormalizationMode::Raw;
  std::size_t classifier_top_k_ = kDefaultClassifierTopK;
  bool rebalanced_ = false;
  std::optional<std::size_t> ranking_;
  std::vector<ProviderPtr> providers_;
  std::vector<ClassifierPtr> classifiers_;
  std::vector<Term> terms_;
  std::vector<Unit> units_;
};

class FormulaBuilder {
 public:
  FormulaBuilder(const Registry& registry, NormalizationMode mode) {
    f_.registry_ = registry;
    f_.mode_ = mode;
    f_.classifier_top_k_ = registry.classifier_top_k();
  }

  Formula build(ExprPtr expr) && {
    f_.expr_ = expr;
    lower_sum(*expr, 1.0, std::nullopt, false);
    if (f_.terms_.empty()) throw Error(ErrorCode::ParseError, "formula has no terms");
    for (const Term& t : f_.terms_) {
      if (!t.proposal && t.weight == WeightKind::Ones && f_.providers_[t.source]->is_model()) {
        f_.ranking_ = t.source;
        break;
      }
    }
    if (!f_.ranking_) {
      for (const Term& t : f_.terms_) {
        if (!t.proposal && t.weight != WeightKind::Classifier) {
          f_.ranking_ = t.source;
          break;
        }
      }
    }
    for (Unit& u : f_.units_) {
      std::set<std::size_t> auth;
      std::set<std::size_t> prop;
      for (std::size_t t : u.terms) {
        const Term& term = f_.terms_[t];
        auto& target = term.proposal ? prop : auth;
        if (term.weight == WeightKind::Classifier) {
          if (f_.ranking_) target.insert(*f_.ranking_);
        } else {
          target.insert(term.source);
          if (term.weight == WeightKind::Indicator) {
            target.insert(term.lhs);
            target.insert(term.rhs);
          }
        }
      }
      u.sources.assign(auth.begin(), auth.end());
      u.proposal_sources.assign(prop.begin(), prop.end());
    }
    return std::move(f_);
  }

 private:
  std::size_t provider_slot(const ProviderPtr& p) {
    for (std::size_t i = 0; i < f_.providers_.size(); ++i) {
      if (f_.providers_[i] == p) return i;
    }
    f_.providers_.push_back(p);
    return f_.providers_.size() - 1;
  }

  std::size_t classifier_slot(const ClassifierPtr& c) {
    for (std::size_t i = 0; i < f_.classifiers_.size(); ++i) {
      if (f_.classifiers_[i] == c) return i;
    }
    f_.classifiers_.push_back(c);
    return f_.classifiers_.size() - 1;
  }

  std::size_t resolve_source(const Expr& e) {
    if (e.kind == Expr::Kind::Uniform) return provider_slot(f_.registry_.uniform());
    ProviderPtr p = f_.registry_.provider(e.name);
    if (!p) {
      if (f_.registry_.classifier(e.name)) {
        throw Error(ErrorCode::NameError,
                    at(e.span) + "'" + e.name + "' is a classifier; write classifier(" + e.name + ")", e.span);
      }
      throw Error(ErrorCode::NameError, at(e.span) + "unknown identifier '" + e.name + "'", e.span);
    }
    return provider_slot(p);
  }

  static std::string at(const SourceSpan& s) { return std::to_string(s.line) + ":" + std::to_string(s.column) + ": "; }

  // Operand of union/intersection: a single source, possibly wrapped in parentheses.
  const Expr& single_source(const Expr& e, const char* op) {
    const Expr* cur = &e;
    while (cur->kind == Expr::Kind::Sum && cur->operands.size() == 1 && cur->operands[0].coefficient == 1.0) {
      cur = cur->operands[0].expr.get();
    }
    if (cur->kind == Expr::Kind::Source || cur->kind == Expr::Kind::Uniform) return *cur;
    if (cur->kind == Expr::Kind::Classifier) {
      throw Error(ErrorCode::UnsupportedComposition, at(e.span) + "classifier terms cannot appear inside " + op, e.span);
    }
    throw Error(ErrorCode::UnsupportedComposition,
                at(e.span) + std::string(op) + " arguments must be single sources", e.span);
  }

  std::size_t open_unit(const std::string& label, double coefficient) {
    Unit u;
    u.label = label;
    u.coefficient = coefficient;
    f_.units_.push_back(std::move(u));
    return f_.units_.size() - 1;
  }

  void push(Term t) {
    f_.units_[t.unit].terms.push_back(f_.terms_.size());
    f_.terms_.push_back(std::move(t));
  }

  // `unit` is set inside a supersede; otherwise every atom opens its own unit.
  void lower_sum(const Expr& sum, double scale, std::optional<std::size_t> unit, bool proposal) {
    for (const Summand& s : sum.operands) lower_atom(*s.expr, scale * s.coefficient, unit, proposal);
  }

  void lower_atom(const Expr& e, double c, std::optional<std::size_t> unit, bool proposal) {
    const auto label = [&] { return detail::summand_text({c, std::make_shared<Expr>(e)}); };
    switch (e.kind) {
      case Expr::Kind::Sum:
        lower_sum(e, c, unit, proposal);
        return;
      case Expr::Kind::Source:
      case Expr::Kind::Uniform: {
        Term t;
        t.coefficient = c;
        t.source = resolve_source(e);
        t.proposal = proposal;
        t.unit = unit ? *unit : open_unit(label(), c);
        push(std::move(t));
        return;
      }
      case Expr::Kind::Classifier: {
        if (unit) throw Error(ErrorCode::UnsupportedComposition, at(e.span) + "classifier terms cannot appear inside supersede", e.span);
        ClassifierPtr cls = f_.registry_.classifier(e.name);
        if (!cls) {
          throw Error(ErrorCode::NameError, at(e.span) + "unknown classifier '" + e.name + "'", e.span);
        }
        Term t;
        t.coefficient = c;
        t.weight = WeightKind::Classifier;
        t.op = Operator::Classifier;
        t.source = classifier_slot(cls);
        t.top_k = e.top_k;
        t.unit = open_unit(label(), c);
        f_.units_[t.unit].classifier = true;
        push(std::move(t));
        return;
      }
      case Expr::Kind::Union:
      case Expr::Kind::Intersection: {
        const char* op = e.kind == Expr::Kind::Union ? "union" : "intersection";
        const std::size_t q1 = resolve_source(single_source(*e.operands[0].expr, op));
        const std::size_t q2 = resolve_source(single_source(*e.operands[1].expr, op));
        const std::size_t u = unit ? *unit : open_unit(label(), c);
        const bool is_union = e.kind == Expr::Kind::Union;
        // union: I1*log Q1 + I2*log Q2; intersection swaps the indicators.
        for (int side = 0; side < 2; ++side) {
          Term t;
          t.coefficient = c;
          t.weight = WeightKind::Indicator;
          t.op = is_union ? Operator::Union : Operator::Intersection;
          t.source = side == 0 ? q1 : q2;
          t.lhs = q1;
          t.rhs = q2;
          t.first = is_union ? side == 0 : side == 1;
          t.proposal = proposal;
          t.unit = u;
          push(std::move(t));
        }
        return;
      }
      case Expr::Kind::Supersede: {
        if (unit) throw Error(ErrorCode::UnsupportedComposition, at(e.span) + "supersede cannot be nested", e.span);
        const std::size_t u = open_unit(label(), c);
        f_.units_[u].supersede = true;
        lower_atom(*e.operands[0].expr, c, u, true);
        lower_atom(*e.operands[1].expr, c, u, false);
        return;
      }
    }
  }

  Formula f_;
};

inline Formula make_formula(ExprPtr expr, const Registry& registry, NormalizationMode mode = NormalizationMode::Raw) {
  return FormulaBuilder(registry, mode).build(std::move(expr));
}

inline Formula parse_formula(std::string_view text, const Registry& registry, NormalizationMode mode = NormalizationMode::Raw) {
  return make_formula(parse_expression(text), registry, mode);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Provider evaluations performed, indexed like Formula::providers().
struct CallCounter {
  std::vector<std::size_t> calls;

  void add(std::size_t provider, std::size_t n = 1) {
    if (calls.size() <= provider) calls.resize(provider + 1, 0);
    calls[provider] += n;
  }
  std::size_t total() const { return std::accumulate(calls.begin(), calls.end(), std::size_t{0}); }
};

namespace detail {

inline double term_scale(const Term& t, std::span<const TokenId> ctx) { return t.scale ? t.coefficient * t.scale(ctx) : t.coefficient; }

inline bool indicator(const Term& t, std::size_t x, const LogDistribution& q_lhs, const LogDistribution& q_rhs) {
  const bool greater = q_lhs.logp(x) > q_rhs.logp(x);
  return t.first ? greater : !greater;
}

}  // namespace detail

/// Sum of lambda_i * f'_i(x) * log Q_i(x) over one unit's terms on one side.
/// `dist(i)` returns provider i's distribution at `ctx`.
template <typename DistFn>
std::vector<double> unit_contribution(const Formula& f, std::size_t unit, bool proposal_side, std::span<const TokenId> ctx,
                                      DistFn&& dist) {
  const std::size_t n = f.vocab_size();
  std::vector<double> out(n, 0.0);
  for (std::size_t ti : f.units()[unit].terms) {
    const Term& t = f.terms()[ti];
    if (t.proposal != proposal_side) continue;
    const double c = detail::term_scale(t, ctx);
    switch (t.weight) {
      case WeightKind::Ones: {
        const LogDistribution& q = dist(t.source);
        for (std::size_t x = 0; x < n; ++x) out[x] += c * q.logp(x);
        break;
      }
      case WeightKind::Indicator: {
        const LogDistribution& q = dist(t.source);
        const LogDistribution& a = dist(t.lhs);
        const LogDistribution& b = dist(t.rhs);
        for (std::size_t x = 0; x < n; ++x) {
          if (detail::indicator(t, x, a, b)) out[x] += c * q.logp(x);
        }
        break;
      }
      case WeightKind::Classifier: {
        const LogDistribution ranking = f.ranking_source() ? dist(*f.ranking_source()) : LogDistribution::uniform(n, f.floor());
        const LogDistribution qc = classifier_induced_distribution(*f.classifiers()[t.source], ctx,
                                                                   t.top_k.value_or(f.classifier_top_k()), ranking, f.floor());
        const double log_n = std::log(static_cast<double>(n));
        for (std::size_t x = 0; x < n; ++x) out[x] += c * (qc.logp(x) + log_n);
        break;
      }
    }
  }
  return out;
}

/// Sums unit contributions in declaration order, divides by the weight sum,
/// clamps to [floor, kLogitCeiling] and normalizes.
inline LogDistribution combine_contributions(std::span<const std::vector<double>* const> contributions, double weight_sum,
                                             std::size_t vocab_size, double floor) {
  std::vector<double> logits(vocab_size, 0.0);
  for (const std::vector<double>* c : contributions) {
    if (c == nullptr) continue;
    for (std::size_t x = 0; x < vocab_size; ++x) logits[x] += (*c)[x];
  }
  for (double& v : logits) {
    if (weight_sum != 1.0) v /= weight_sum;
    v = std::clamp(v, floor, kLogitCeiling);
  }
  return softmax_normalize(logits, floor);
}

namespace detail {

// Per-token weight sum; throws unless it is constant and positive.
template <typename DistFn>
double checked_weight_sum(const Formula& f, std::span<const TokenId> ctx, DistFn&& dist) {
  if (const auto fixed = f.static_weight_sum()) {
    if (!(*fixed > 0.0)) {
      throw Error(ErrorCode::NormalizationViolation, "kl_optimal mode needs a positive weight sum sum_i lambda_i*f'_i(x); got " +
                                                         format_number(*fixed) + " (rebalance the formula or use raw mode)");
    }
    return *fixed;
  }
  const std::size_t n = f.vocab_size();
  std::vector<double> s(n, 0.0);
  for (const Term& t : f.terms()) {
    if (t.proposal) continue;
    const double c = term_scale(t, ctx);
    if (t.weight == WeightKind::Ones) {
      for (double& v : s) v += c;
    } else if (t.weight == WeightKind::Indicator) {
      const LogDistribution& a = dist(t.lhs);
      const LogDistribution& b = dist(t.rhs);
      for (std::size_t x = 0; x < n; ++x) {
        if (indicator(t, x, a, b)) s[x] += c;
      }
    }
  }
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  if (*hi - *lo > 1e-9 * std::max(1.0, std::abs(*hi)) || !(*lo > 0.0)) {
    throw Error(ErrorCode::NormalizationViolation,
                "kl_optimal mode needs a token-independent positive weight sum sum_i lambda_i*f'_i(x); got values in [" +
                    format_number(*lo) + ", " + format_number(*hi) + "] (rebalance the formula or use raw mode)");
  }
  return *lo;
}

}  // namespace detail

/// Evaluates each distinct provider once for `ctx`. Supersede collapses to its
/// authoritative side.
inline LogDistribution evaluate(const Formula& f, std::span<const TokenId> ctx, CallCounter* counter = nullptr) {
  validate_context(ctx, f.vocab_size());
  std::vector<std::optional<LogDistribution>> cache(f.providers().size());
  for (const Unit& u : f.units()) {
    for (std::size_t p : u.sources) {
      if (cache[p]) continue;
      const Provider& provider = *f.providers()[p];
      if (auto limit = provider.max_context(); limit && ctx.size() > *limit) {
        throw Error(ErrorCode::ContextTooLong, "context of " + std::to_string(ctx.size()) + " tokens exceeds the limit of provider '" +
                                                   provider.name() + "' (" + std::to_string(*limit) + ")");
      }
      cache[p] = provider.next_logdist(ctx);
      if (cache[p]->size() != f.vocab_size()) throw Error(ErrorCode::VocabMismatch, "provider '" + provider.name() + "' returned the wrong size");
      if (counter && provider.is_model()) counter->add(p);
    }
  }
  const auto dist = [&](std::size_t p) -> const LogDistribution& { return *cache[p]; };

  std::vector<std::vector<double>> contributions;
  contributions.reserve(f.units().size());
  for (std::size_t u = 0; u < f.units().size(); ++u) contributions.push_back(unit_contribution(f, u, false, ctx, dist));
  std::vector<const std::vector<double>*> refs;
  for (const auto& c : contributions) refs.push_back(&c);

  const double s = f.mode() == NormalizationMode::KlOptimal ? detail::checked_weight_sum(f, ctx, dist) : 1.0;
  return combine_contributions(refs, s, f.vocab_size(), f.floor());
}

/// Distinct provider evaluations one evaluate() performs, by provider name.
inline std::map<std::string, std::size_t> count_provider_calls(const Formula& f) {
  std::map<std::string, std::size_t> out;
  for (const Unit& u : f.units()) {
    for (std::size_t p : u.sources) {
      if (f.providers()[p]->is_model()) out[f.providers()[p]->name()] = 1;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rewrites and presets
// ---------------------------------------------------------------------------

/// Replaces the first term's weight f'_1 by f'_1 - sum_{i>=2} f'_i so the
/// per-token weight sum becomes the constant lambda_1.
inline Formula rebalance_weights(const Formula& f) {
  const auto first = std::find_if(f.terms_.begin(), f.terms_.end(), [](const Term& t) { return !t.proposal; });
  if (first == f.terms_.end() || first->weight != WeightKind::Ones || first->scale) {
    throw Error(ErrorCode::RebalanceUnsupported, "the first term must be a plain model term with a constant coefficient");
  }
  const std::size_t base = first->source;
  const std::size_t first_index = static_cast<std::size_t>(first - f.terms_.begin());
  Formula out = f;
  for (std::size_t i = first_index + 1; i < f.terms_.size(); ++i) {
    const Term& t = f.terms_[i];
    if (t.proposal || t.weight == WeightKind::Classifier) continue;
    Term offset = t;
    offset.coefficient = -t.coefficient;
    offset.source = base;
    out.units_[offset.unit].terms.push_back(out.terms_.size());
    auto& sources = out.units_[offset.unit].sources;
    if (std::find(sources.begin(), sources.end(), base) == sources.end()) {
      sources.push_back(base);
      std::sort(sources.begin(), sources.end());
    }
    out.terms_.push_back(std::move(offset));
  }
  out.rebalanced_ = true;
  return out;
}

namespace detail {

inline ExprPtr substitute_source(const ExprPtr& e, const std::string& target, const ExprPtr& replacement) {
  if (e->kind == Expr::Kind::Source) return e->name == target ? replacement : e;
  if (e->operands.empty()) return e;
  auto copy = std::make_shared<Expr>(*e);
  for (Summand& s : copy->operands) s.expr = substitute_source(s.expr, target, replacement);
  return copy;
}

}  // namespace detail

/// Replaces every use of `target` (the big model under attribute a2) by
/// log M_a1 + log m_a2 - log m_a1. Inside union/intersection the replacement is
/// not a single source and is rejected as UnsupportedComposition.
inline Formula attribute_transfer_rewrite(const Formula& f, const std::string& target, const ProviderPtr& big_a1,
                                          const ProviderPtr& small_a1, const ProviderPtr& small_a2) {
  Registry registry = f.registry();
  for (const ProviderPtr& p : {big_a1, small_a1, small_a2}) {
    if (p->vocab_size() != f.vocab_size()) {
      throw Error(ErrorCode::VocabMismatch, "provider '" + p->name() + "' uses a different vocabulary size");
    }
    const ProviderPtr existing = registry.provider(p->name());
    if (!existing) {
      registry.add(p);
    } else if (existing != p) {
      throw Error(ErrorCode::InvalidArgument, "registry already holds a different provider named '" + p->name() + "'");
    }
  }
  const ExprPtr replacement = Expr::sum({{1.0, Expr::source(big_a1->name())}, {1.0, Expr::source(small_a2->name())},
                                         {-1.0, Expr::source(small_a1->name())}});
  Formula out = make_formula(detail::substitute_source(f.expression(), target, replacement), registry, f.mode());
  return out.with_classifier_top_k(f.classifier_top_k());
}

/// Prior-work formulas expressed as model arithmetic, all in raw mode.
///   dexperts(M, mp, mn; l)        M + l*(mp - mn)
///   preadd / cfg(M, Ma; l)        M + l*Ma
///   cognac(M, A1, A2; l1, l2)     M + l1*A1 - l2*A2
///   fudge(M, C)                   M + classifier(C)
///   fudge_scaled(M, C; l)         M + l*classifier(C)
inline ExprPtr preset_expression(std::string_view name, std::span<const std::string> sources, std::span<const double> strengths) {
  const auto arity = [&](std::size_t n_sources, std::size_t n_strengths) {
    if (sources.size() != n_sources || strengths.size() != n_strengths) {
      throw Error(ErrorCode::PresetArity, "preset '" + std::string(name) + "' takes " + std::to_string(n_sources) + " sources and " +
                                              std::to_string(n_strengths) + " strengths");
    }
  };
  const auto src = [&](std::size_t i) { return Expr::source(sources[i]); };
  if (name == "dexperts") {
    arity(3, 1);
    return Expr::sum({{1.0, src(0)}, {strengths[0], Expr::sum({{1.0, src(1)}, {-1.0, src(2)}})}});
  }
  if (name == "preadd" || name == "cfg") {
    arity(2, 1);
    return Expr::sum({{1.0, src(0)}, {strengths[0], src(1)}});
  }
  if (name == "cognac") {
    arity(3, 2);
    return Expr::sum({{1.0, src(0)}, {strengths[0], src(1)}, {-strengths[1], src(2)}});
  }
  if (name == "fudge") {
    arity(2, 0);
    return Expr::sum({{1.0, src(0)}, {1.0, Expr::classifier(sources[1])}});
  }
  if (name == "fudge_scaled") {
    arity(2, 1);
    return Expr::sum({{1.0, src(0)}, {strengths[0], Expr::classifier(sources[1])}});
  }
  throw Error(ErrorCode::InvalidArgument, "unknown preset '" + std::string(name) + "'");
}

inline Formula preset(std::string_view name, std::span<const std::string> sources, std::span<const double> strengths,
                      const Registry& registry) {
  return make_formula(preset_expression(name, sources, strengths), registry, NormalizationMode::Raw);
}

}  // namespace modarith
