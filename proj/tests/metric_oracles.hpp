// Quadratic-time reference versions of the ranking metrics, shared by the
// unit tests and the acceptance run.
#ifndef LMM_TESTS_METRIC_ORACLES_HPP
#define LMM_TESTS_METRIC_ORACLES_HPP

#include <algorithm>
#include <functional>
#include <set>
#include <vector>

#include "lmm/metrics.hpp"

namespace lmm::testing {

/// Up to 200 scores drawn from a small grid so ties are common; both classes present.
inline std::vector<metrics::Scored> random_scored(Rng& rng) {
  const std::size_t n = 2 + rng.below(199);
  const std::size_t levels = 1 + rng.below(30);
  const double prevalence = 0.05 + 0.9 * rng.uniform();
  std::vector<metrics::Scored> s(n);
  for (auto& x : s) {
    x.score = static_cast<double>(rng.below(levels)) / static_cast<double>(levels);
    x.label = rng.bernoulli(prevalence);
  }
  s[0].label = true;
  s[1].label = false;
  return s;
}

/// Every (positive, negative) pair: a win counts 2 half-units, a tie 1.
inline double brute_auroc(const std::vector<metrics::Scored>& s) {
  std::uint64_t half_units = 0, pos = 0, neg = 0;
  for (const auto& a : s) {
    if (a.label) ++pos;
    else ++neg;
  }
  for (const auto& p : s) {
    if (!p.label) continue;
    for (const auto& q : s) {
      if (q.label) continue;
      half_units += p.score > q.score ? 2 : (p.score == q.score ? 1 : 0);
    }
  }
  return static_cast<double>(half_units) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

/// For each distinct score held by a positive, from high to low: the share of
/// positives at exactly that score times precision counting everything scored
/// at or above it.
inline double brute_auprc(const std::vector<metrics::Scored>& s) {
  std::set<double, std::greater<>> thresholds;
  std::size_t total_pos = 0;
  for (const auto& x : s) {
    if (x.label) {
      thresholds.insert(x.score);
      ++total_pos;
    }
  }
  KahanSum ap;
  for (double t : thresholds) {
    std::size_t at = 0, tp = 0, seen = 0;
    for (const auto& x : s) {
      if (x.score >= t) {
        ++seen;
        tp += x.label ? 1 : 0;
      }
      if (x.score == t && x.label) ++at;
    }
    ap.add(static_cast<double>(at) / static_cast<double>(total_pos) * static_cast<double>(tp) /
           static_cast<double>(seen));
  }
  return ap.value();
}

}  // namespace lmm::testing

#endif  // LMM_TESTS_METRIC_ORACLES_HPP
