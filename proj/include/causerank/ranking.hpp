#pragma once

#include "causerank/core.hpp"
#include "causerank/scoring.hpp"

#include <array>
#include <numeric>

namespace causerank {

inline constexpr std::size_t kDefaultTopK = 20;

struct RankedReport {
  std::vector<ScoreReport> entries;   // best first, at most k
  std::vector<ScoreReport> failures;  // families that could not be scored
  std::size_t k = kDefaultTopK;
  std::size_t scored = 0;             // successful hypotheses before the cutoff
};

enum class Label { Cause, Effect, Irrelevant };

inline std::string_view label_name(Label l) {
  switch (l) {
    case Label::Cause: return "cause";
    case Label::Effect: return "effect";
    case Label::Irrelevant: return "irrelevant";
  }
  return "irrelevant";
}

inline Label parse_label(std::string_view s) {
  if (s == "cause") return Label::Cause;
  if (s == "effect") return Label::Effect;
  if (s == "irrelevant") return Label::Irrelevant;
  throw Error(Errc::InvalidArgument, "unknown label '" + std::string(s) + "'");
}

using ScenarioLabels = std::map<std::string, Label>;

/// Sorts by score descending (ties by family key ascending) and keeps the top k.
/// Failed reports are moved to the failure tail.
inline RankedReport rank(std::vector<ScoreReport> reports, std::size_t k = kDefaultTopK) {
  RankedReport out;
  out.k = k;
  for (auto& r : reports) (r.failed ? out.failures : out.entries).push_back(std::move(r));
  std::stable_sort(out.entries.begin(), out.entries.end(), [](const ScoreReport& a, const ScoreReport& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.hypothesis.x < b.hypothesis.x;
  });
  std::sort(out.failures.begin(), out.failures.end(),
            [](const ScoreReport& a, const ScoreReport& b) { return a.hypothesis.x < b.hypothesis.x; });
  out.scored = out.entries.size();
  if (out.entries.size() > k) out.entries.resize(k);
  return out;
}

/// 1-based rank of the first cause within the report, if any.
inline std::optional<std::size_t> first_cause_rank(const RankedReport& ranked, const ScenarioLabels& labels) {
  for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
    auto it = labels.find(ranked.entries[i].hypothesis.x);
    if (it != labels.end() && it->second == Label::Cause) return i + 1;
  }
  return std::nullopt;
}

enum class Discount { Reciprocal, Log };

/// 1/r for the first cause at rank r within the top-20 cutoff, 0 when there is none.
inline double discounted_gain(const RankedReport& ranked, const ScenarioLabels& labels,
                              Discount discount = Discount::Reciprocal, std::size_t cutoff = kDefaultTopK) {
  auto r = first_cause_rank(ranked, labels);
  if (!r || *r > cutoff) return 0.0;
  const double rank = static_cast<double>(*r);
  return discount == Discount::Reciprocal ? 1.0 / rank : 1.0 / std::log2(1.0 + rank);
}

inline int success_at_k(const RankedReport& ranked, const ScenarioLabels& labels, std::size_t k) {
  auto r = first_cause_rank(ranked, labels);
  return (r && *r <= k) ? 1 : 0;
}

inline constexpr double kFailureGain = 0.001;
inline constexpr std::array<std::size_t, 4> kSuccessCutoffs{1, 5, 10, 20};

struct Summary {
  double arithmetic_mean = 0;
  double harmonic_mean = 0;
  double stdev = 0;  // sample standard deviation
  std::array<double, 4> success_rate{};  // fraction of scenarios, at kSuccessCutoffs
};

/// Summary rows over per-scenario gains (0 = failure). Failures enter the harmonic
/// mean as 0.001; success@k follows from the gain (rank = 1/gain).
inline Summary summarize(const std::vector<double>& gains) {
  Summary s;
  if (gains.empty()) return s;
  const double n = static_cast<double>(gains.size());
  s.arithmetic_mean = std::accumulate(gains.begin(), gains.end(), 0.0) / n;
  double inv = 0;
  for (double g : gains) inv += 1.0 / (g > 0 ? g : kFailureGain);
  s.harmonic_mean = n / inv;
  if (gains.size() > 1) {
    double ss = 0;
    for (double g : gains) ss += (g - s.arithmetic_mean) * (g - s.arithmetic_mean);
    s.stdev = std::sqrt(ss / (n - 1));
  }
  for (std::size_t c = 0; c < kSuccessCutoffs.size(); ++c) {
    double hits = 0;
    for (double g : gains)
      if (g > 0 && std::round(1.0 / g) <= static_cast<double>(kSuccessCutoffs[c])) hits += 1;
    s.success_rate[c] = hits / n;
  }
  return s;
}

/// Asymptotic cost units for scoring a hypothesis with the given family widths.
struct CostInputs {
  double t = 0;
  double nx = 0;
  double ny = 0;
  double nz = 0;
};

inline double regression_cost(double t, double n_in, double n_out) {
  return n_out * std::min(t * n_in * n_in, t * t * n_in);
}

inline double estimate_cost(const CostInputs& c, const ScoringConfig& config) {
  const double k = config.k_folds;
  const double l = static_cast<double>(config.lambda_grid.size());
  switch (config.method) {
    case Method::CorrMean:
    case Method::CorrMax: return c.nx * c.ny * c.t;
    case Method::L2:
      return k * l * (regression_cost(c.t, c.nx, c.ny) + regression_cost(c.t, c.ny, c.nz) + regression_cost(c.t, c.nz, c.nx));
    case Method::L2Proj: {
      const double d = config.proj_dim.value_or(50);
      return k * l * c.t * d * (c.nx + c.ny + c.nz + d);
    }
  }
  return 0;
}

inline double estimate_cost(const Hypothesis& h, const FamilyTable& table, const ScoringConfig& config) {
  CostInputs c;
  c.t = static_cast<double>(table.index().size());
  c.nx = static_cast<double>(table.at(h.x).cols());
  c.ny = static_cast<double>(table.at(h.y).cols());
  for (const auto& z : h.z) c.nz += static_cast<double>(table.at(z).cols());
  return estimate_cost(c, config);
}

}  // namespace causerank
