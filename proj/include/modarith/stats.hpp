#pragma once

// Goodness-of-fit and summary statistics for the sampling checks.

#include "modarith/core_dist.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <span>
#include <vector>

namespace modarith {

struct ChiSquareResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t dof = 0;
  std::size_t merged_bins = 0;  // bins pooled because their expected count was below 5
};

/// Pearson goodness-of-fit of `observed` counts against `expected`
/// probabilities. Bins expecting fewer than 5 draws are pooled; a draw in a
/// zero-probability bin gives p = 0.
inline ChiSquareResult chi_square_gof(std::span<const std::size_t> observed, std::span<const double> expected) {
  if (observed.size() != expected.size()) throw Error(ErrorCode::InvalidArgument, "observed and expected differ in size");
  double n = 0.0;
  for (std::size_t c : observed) n += static_cast<double>(c);
  if (n <= 0.0) throw Error(ErrorCode::InvalidArgument, "no observations");

  ChiSquareResult r;
  std::vector<std::pair<double, double>> bins;  // (observed, expected count)
  double pool_o = 0.0;
  double pool_e = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double o = static_cast<double>(observed[i]);
    const double e = expected[i] * n;
    if (expected[i] <= 0.0) {
      if (o > 0.0) {
        r.statistic = kInfinity;
        r.p_value = 0.0;
        return r;
      }
      continue;
    }
    if (e < 5.0) {
      pool_o += o;
      pool_e += e;
      ++r.merged_bins;
    } else {
      bins.emplace_back(o, e);
    }
  }
  if (r.merged_bins > 0) {
    if (pool_e < 5.0 && !bins.empty()) {
      auto smallest = std::min_element(bins.begin(), bins.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
      smallest->first += pool_o;
      smallest->second += pool_e;
    } else {
      bins.emplace_back(pool_o, pool_e);
    }
  }
  if (bins.size() < 2) return r;
  for (const auto& [o, e] : bins) r.statistic += (o - e) * (o - e) / e;
  r.dof = bins.size() - 1;
  r.p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(static_cast<double>(r.dof)), r.statistic));
  return r;
}

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};

/// Sample mean and standard error (n - 1 denominator; 0 for a single value).
inline MeanStderr mean_stderr(std::span<const double> values) {
  MeanStderr m;
  m.n = values.size();
  if (values.empty()) return m;
  for (double v : values) m.mean += v;
  m.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.stderr_ = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
  }
  return m;
}

}  // namespace modarith
