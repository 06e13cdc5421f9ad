#pragma once

// Brute-force reference solutions. Nothing here calls the formula evaluator:
// each oracle minimizes the defining objective over the probability simplex
// numerically, and the comparisons live in the test suites and `modarith test`.

#include "modarith/core_dist.hpp"

#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace modarith::oracles {

// Objective J(P) and its gradient dJ/dP on the simplex.
using Objective = std::function<double(std::span<const double>)>;
using Gradient = std::function<void(std::span<const double>, std::span<double>)>;

struct MinimizeOptions {
  std::size_t max_iterations = 200000;
  double gradient_tolerance = 1e-13;
};

namespace detail {

inline std::vector<double> softmax(std::span<const double> theta) {
  std::vector<double> p(theta.begin(), theta.end());
  const double m = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) z += (v = std::exp(v - m));
  for (double& v : p) v /= z;
  return p;
}

inline double xlogx(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

}  // namespace detail

/// Gradient descent on softmax logits with backtracking line search.
inline std::vector<double> minimize_on_simplex(std::size_t n, const Objective& value, const Gradient& gradient,
                                               const MinimizeOptions& opts = {}) {
  std::vector<double> theta(n, 0.0);
  std::vector<double> p = detail::softmax(theta);
  double current = value(p);
  std::vector<double> g(n);
  std::vector<double> d(n);
  double step = 1.0;
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    gradient(p, g);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += p[i] * g[i];
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = p[i] * (g[i] - mean);
      norm += d[i] * d[i];
    }
    if (std::sqrt(norm) < opts.gradient_tolerance) break;
    bool moved = false;
    while (step > 1e-20) {
      std::vector<double> trial(theta);
      for (std::size_t i = 0; i < n; ++i) trial[i] -= step * d[i];
      std::vector<double> q = detail::softmax(trial);
      const double v = value(q);
      if (v <= current - 0.5 * step * norm) {
        theta = std::move(trial);
        p = std::move(q);
        current = v;
        moved = true;
        step *= 2.0;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
  }
  return p;
}

/// Exhaustive grid over the 3-token simplex, refined around the best point.
inline std::vector<double> grid_minimize_simplex3(const Objective& value, std::size_t levels = 6) {
  double best_v = kInfinity;
  double b0 = 1.0 / 3.0;
  double b1 = 1.0 / 3.0;
  const auto visit = [&](double p0, double p1) {
    const double p2 = 1.0 - p0 - p1;
    if (p0 < 0.0 || p1 < 0.0 || p2 < -1e-15) return;
    const std::vector<double> p{p0, p1, std::max(p2, 0.0)};
    const double v = value(p);
    if (v < best_v) {
      best_v = v;
      b0 = p0;
      b1 = p1;
    }
  };
  double h = 0.02;
  for (std::size_t i = 0; i <= 50; ++i) {
    for (std::size_t j = 0; i + j <= 50; ++j) visit(static_cast<double>(i) * h, static_cast<double>(j) * h);
  }
  for (std::size_t level = 0; level < levels; ++level) {
    const double c0 = b0;
    const double c1 = b1;
    const double fine = h / 10.0;
    for (int i = -10; i <= 10; ++i) {
      for (int j = -10; j <= 10; ++j) visit(c0 + i * fine, c1 + j * fine);
    }
    h = fine;
  }
  return {b0, b1, std::max(1.0 - b0 - b1, 0.0)};
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// sum_i sum_x P(x) w_i(x) log(P(x) / Q_i(x)) with explicit probabilities.
struct WeightedKlObjective {
  std::vector<std::vector<double>> q;  // q[i][x]
  std::vector<std::vector<double>> w;  // w[i][x]

  double operator()(std::span<const double> p) const {
    double total = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      for (std::size_t x = 0; x < p.size(); ++x) {
        if (p[x] > 0.0 && w[i][x] != 0.0) total += w[i][x] * (detail::xlogx(p[x]) - p[x] * std::log(q[i][x]));
      }
    }
    return total;
  }

  void gradient(std::span<const double> p, std::span<double> g) const {
    for (std::size_t x = 0; x < p.size(); ++x) {
      g[x] = 0.0;
      for (std::size_t i = 0; i < q.size(); ++i) g[x] += w[i][x] * (std::log(p[x]) + 1.0 - std::log(q[i][x]));
    }
  }
};

/// argmin_P sum_i lambda_i KL(P || Q_i) with constant positive lambdas.
inline std::vector<double> linear_oracle(const std::vector<std::vector<double>>& q, const std::vector<double>& lambdas) {
  WeightedKlObjective obj;
  obj.q = q;
  for (double l : lambdas) obj.w.emplace_back(q.front().size(), l);
  return minimize_on_simplex(q.front().size(), obj, [&](auto p, auto g) { obj.gradient(p, g); });
}

/// argmin_P KL^{I1}(P || Q1) + KL^{I2}(P || Q2), I1 = [Q1 > Q2]; the
/// intersection objective swaps the indicators. Three tokens, by grid search.
inline std::vector<double> union_oracle(const std::vector<double>& q1, const std::vector<double>& q2, bool intersection = false) {
  WeightedKlObjective obj;
  obj.q = {q1, q2};
  std::vector<double> i1(q1.size());
  std::vector<double> i2(q1.size());
  for (std::size_t x = 0; x < q1.size(); ++x) {
    const bool first = q1[x] > q2[x];
    i1[x] = (first != intersection) ? 1.0 : 0.0;
    i2[x] = 1.0 - i1[x];
  }
  obj.w = {i1, i2};
  return grid_minimize_simplex3(obj);
}

/// argmin_P KL(P || M) - lambda * sum_x P(x) log C(ctx + x).
inline std::vector<double> classifier_oracle(const std::vector<double>& m, const std::vector<double>& scores, double lambda) {
  const auto value = [&](std::span<const double> p) {
    double total = 0.0;
    for (std::size_t x = 0; x < p.size(); ++x) {
      if (p[x] > 0.0) total += detail::xlogx(p[x]) - p[x] * std::log(m[x]) - lambda * p[x] * std::log(scores[x]);
    }
    return total;
  };
  const auto gradient = [&](std::span<const double> p, std::span<double> g) {
    for (std::size_t x = 0; x < p.size(); ++x) g[x] = std::log(p[x]) + 1.0 - std::log(m[x]) - lambda * std::log(scores[x]);
  };
  return minimize_on_simplex(m.size(), value, gradient);
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

/// Dirichlet(1) draw mixed with 10% uniform so no entry is tiny.
inline std::vector<double> random_distribution(std::size_t n, RngStream& rng) {
  std::vector<double> p(n);
  double z = 0.0;
  for (double& v : p) z += (v = -std::log(1.0 - rng.next_uniform()));
  for (double& v : p) v = 0.9 * v / z + 0.1 / static_cast<double>(n);
  return p;
}

inline double tv(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

}  // namespace modarith::oracles
