#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace causerank {

// Dense matrices are stored row-major: row t is one time slot.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Errc {
  UnknownFamily,
  OverlappingMetrics,
  EmptyFamily,
  MalformedRow,
  UnknownFormat,
  AllMissing,
  SyntaxError,
  UnknownFunction,
  EmptyResult,
  DuplicateFamilyKey,
  NumericalFailure,
  DegenerateTarget,
  DomainError,
  BadPeriod,
  InvalidOverride,
  NotScored,
  InvalidArgument,
  NotFound,
  Io,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::UnknownFamily: return "UnknownFamily";
    case Errc::OverlappingMetrics: return "OverlappingMetrics";
    case Errc::EmptyFamily: return "EmptyFamily";
    case Errc::MalformedRow: return "MalformedRow";
    case Errc::UnknownFormat: return "UnknownFormat";
    case Errc::AllMissing: return "AllMissing";
    case Errc::SyntaxError: return "SyntaxError";
    case Errc::UnknownFunction: return "UnknownFunction";
    case Errc::EmptyResult: return "EmptyResult";
    case Errc::DuplicateFamilyKey: return "DuplicateFamilyKey";
    case Errc::NumericalFailure: return "NumericalFailure";
    case Errc::DegenerateTarget: return "DegenerateTarget";
    case Errc::DomainError: return "DomainError";
    case Errc::BadPeriod: return "BadPeriod";
    case Errc::InvalidOverride: return "InvalidOverride";
    case Errc::NotScored: return "NotScored";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::NotFound: return "NotFound";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// splitmix64 finaliser; combines a master seed with a salt.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// One observation of a tagged metric. Timestamps are epoch minutes.
struct MetricRecord {
  std::int64_t ts = 0;
  std::string metric;
  std::map<std::string, std::string> tags;
  double value = 0.0;

  bool operator==(const MetricRecord&) const = default;
};

/// Canonical series identity, "metric{k=v,k=v}" with tags in key order.
inline std::string series_id(std::string_view metric, const std::map<std::string, std::string>& tags) {
  std::string out(metric);
  out += '{';
  bool first = true;
  for (const auto& [k, v] : tags) {
    if (!first) out += ',';
    first = false;
    out += k;
    out += '=';
    out += v;
  }
  out += '}';
  return out;
}

/// Regular time grid [start_ts, end_ts] (inclusive) with an optional highlighted sub-range.
struct TimeIndex {
  std::int64_t start_ts = 0;
  std::int64_t end_ts = 1;
  std::int64_t step = 1;
  std::optional<std::pair<std::int64_t, std::int64_t>> highlight;

  TimeIndex() = default;
  TimeIndex(std::int64_t start, std::int64_t end, std::int64_t step_minutes = 1,
            std::optional<std::pair<std::int64_t, std::int64_t>> hl = std::nullopt)
      : start_ts(start), end_ts(end), step(step_minutes), highlight(hl) {
    if (start_ts >= end_ts) throw Error(Errc::InvalidArgument, "time index requires start < end");
    if (step < 1) throw Error(Errc::InvalidArgument, "time index step must be >= 1");
    if (highlight && (highlight->first > highlight->second || highlight->first < start_ts ||
                      highlight->second > end_ts)) {
      throw Error(Errc::InvalidArgument, "highlight range must lie inside the total range");
    }
  }

  std::size_t size() const { return static_cast<std::size_t>((end_ts - start_ts) / step) + 1; }
  std::int64_t at(std::size_t slot) const { return start_ts + static_cast<std::int64_t>(slot) * step; }

  // Slot containing ts (floor), or nullopt when outside the grid.
  std::optional<std::size_t> slot_of(std::int64_t ts) const {
    if (ts < start_ts || ts > end_ts) return std::nullopt;
    auto slot = static_cast<std::size_t>((ts - start_ts) / step);
    if (slot >= size()) return std::nullopt;
    return slot;
  }

  bool same_grid(const TimeIndex& o) const {
    return start_ts == o.start_ts && end_ts == o.end_ts && step == o.step;
  }
};

/// A named group of univariate metrics sampled on a shared TimeIndex.
struct FeatureFamily {
  std::string key;
  std::vector<std::string> feature_names;
  // Underlying univariate metric (series id) per feature; used for overlap checks.
  std::vector<std::string> feature_metrics;
  Matrix matrix;
  std::string provenance;

  std::size_t rows() const { return static_cast<std::size_t>(matrix.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(matrix.cols()); }

  std::set<std::string> metric_set() const {
    return {feature_metrics.begin(), feature_metrics.end()};
  }

  void check(const TimeIndex& index) const {
    if (feature_names.empty()) throw Error(Errc::EmptyFamily, "family '" + key + "' has no features");
    if (feature_metrics.size() != feature_names.size())
      throw Error(Errc::InvalidArgument, "family '" + key + "' metric list does not match features");
    if (rows() != index.size() || cols() != feature_names.size())
      throw Error(Errc::InvalidArgument, "family '" + key + "' matrix shape does not match its index");
    std::set<std::string> seen(feature_names.begin(), feature_names.end());
    if (seen.size() != feature_names.size())
      throw Error(Errc::InvalidArgument, "family '" + key + "' has duplicate feature names");
    if (!matrix.allFinite()) throw Error(Errc::InvalidArgument, "family '" + key + "' has non-finite cells");
  }
};

/// A collection of families aligned on one TimeIndex, looked up by key.
class FamilyTable {
 public:
  FamilyTable() = default;
  explicit FamilyTable(TimeIndex index) : index_(std::move(index)) {}

  const TimeIndex& index() const { return index_; }
  const std::vector<FeatureFamily>& families() const { return families_; }
  std::size_t size() const { return families_.size(); }

  void add(FeatureFamily family) {
    family.check(index_);
    if (lookup_.count(family.key)) throw Error(Errc::DuplicateFamilyKey, family.key);
    lookup_.emplace(family.key, families_.size());
    families_.push_back(std::move(family));
  }

  bool contains(const std::string& key) const { return lookup_.count(key) != 0; }

  const FeatureFamily& at(const std::string& key) const {
    auto it = lookup_.find(key);
    if (it == lookup_.end()) throw Error(Errc::UnknownFamily, key);
    return families_[it->second];
  }

  // Restrict every family to the rows of a sub-range of the current grid.
  FamilyTable crop(const TimeIndex& sub) const {
    if (sub.step != index_.step || sub.start_ts < index_.start_ts || sub.end_ts > index_.end_ts ||
        (sub.start_ts - index_.start_ts) % index_.step != 0) {
      throw Error(Errc::InvalidArgument, "crop range must be aligned with and inside the table range");
    }
    auto first = static_cast<Eigen::Index>(*index_.slot_of(sub.start_ts));
    auto count = static_cast<Eigen::Index>(sub.size());
    FamilyTable out(sub);
    for (const auto& f : families_) {
      FeatureFamily c = f;
      c.matrix = f.matrix.middleRows(first, count);
      out.add(std::move(c));
    }
    return out;
  }

 private:
  TimeIndex index_;
  std::vector<FeatureFamily> families_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

struct Hypothesis {
  std::string x;
  std::string y;
  std::vector<std::string> z;

  bool operator==(const Hypothesis&) const = default;
};

enum class Method { CorrMean, CorrMax, L2, L2Proj };

inline std::string method_name(Method m, std::optional<int> proj_dim = std::nullopt) {
  switch (m) {
    case Method::CorrMean: return "corrmean";
    case Method::CorrMax: return "corrmax";
    case Method::L2: return "l2";
    case Method::L2Proj: return "l2-p" + std::to_string(proj_dim.value_or(50));
  }
  return "unknown";
}

/// Observed series (Y, or its residual given Z) and the fitted E[Y|X,Z], first output only.
struct PlotData {
  std::vector<double> observed;
  std::vector<double> predicted;
};

struct ScoreReport {
  Hypothesis hypothesis;
  double score = 0.0;
  Method method = Method::L2;
  std::optional<int> proj_dim;
  double p_value = 1.0;
  PlotData plot;
  std::int64_t timing_ms = 0;
  // Free-form flags such as "p>=n" or a failure note; empty when clean.
  std::vector<std::string> diagnostics;
  bool failed = false;
  bool significant = false;  // rejected by Benjamini-Hochberg over the run
};

/// Checks that every family resolves, X and Y are non-empty, and the metric sets
/// of X, Y and Z are pairwise disjoint.
inline void validate_hypothesis(const Hypothesis& h, const FamilyTable& table) {
  const auto& x = table.at(h.x);
  const auto& y = table.at(h.y);
  if (x.feature_names.empty()) throw Error(Errc::EmptyFamily, h.x);
  if (y.feature_names.empty()) throw Error(Errc::EmptyFamily, h.y);

  std::set<std::string> zm;
  for (const auto& key : h.z) {
    const auto& z = table.at(key);
    for (const auto& m : z.feature_metrics) zm.insert(m);
  }
  auto overlap = [](const std::set<std::string>& a, const std::set<std::string>& b) -> std::optional<std::string> {
    for (const auto& m : a)
      if (b.count(m)) return m;
    return std::nullopt;
  };
  auto xm = x.metric_set();
  auto ym = y.metric_set();
  if (auto m = overlap(xm, ym)) throw Error(Errc::OverlappingMetrics, *m);
  if (auto m = overlap(xm, zm)) throw Error(Errc::OverlappingMetrics, *m);
  if (auto m = overlap(ym, zm)) throw Error(Errc::OverlappingMetrics, *m);
}

// Concatenate the columns of several families into one T x sum(F) matrix.
inline Matrix hstack(const FamilyTable& table, const std::vector<std::string>& keys) {
  Eigen::Index cols = 0;
  for (const auto& k : keys) cols += table.at(k).matrix.cols();
  Matrix out(static_cast<Eigen::Index>(table.index().size()), cols);
  Eigen::Index c = 0;
  for (const auto& k : keys) {
    const auto& m = table.at(k).matrix;
    out.middleCols(c, m.cols()) = m;
    c += m.cols();
  }
  return out;
}

}  // namespace causerank
