#pragma once

#include "causerank/core.hpp"
#include "causerank/query.hpp"
#include "causerank/ranking.hpp"
#include "causerank/scoring.hpp"
#include "causerank/stats.hpp"
#include "causerank/table_io.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <exception>
#include <mutex>
#include <thread>

namespace causerank {

inline constexpr double kSignificanceLevel = 0.05;

inline const std::vector<std::string>& valid_method_names() {
  static const std::vector<std::string> names{"corrmean", "corrmax", "l2", "l2-proj", "l2-p50", "l2-p500"};
  return names;
}

/// Parses a method name; "l2-pN" fixes the projection dimension, "l2-proj" takes it from proj_dim.
inline std::pair<Method, std::optional<int>> parse_method(std::string_view name, std::optional<int> proj_dim = std::nullopt) {
  if (name == "corrmean") return {Method::CorrMean, std::nullopt};
  if (name == "corrmax") return {Method::CorrMax, std::nullopt};
  if (name == "l2") return {Method::L2, std::nullopt};
  if (name == "l2-proj") return {Method::L2Proj, proj_dim.value_or(50)};
  if (name.starts_with("l2-p")) {
    int d = 0;
    auto digits = name.substr(4);
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), d);
    if (ec == std::errc() && ptr == digits.data() + digits.size() && d > 0) return {Method::L2Proj, d};
  }
  std::string valid;
  for (const auto& n : valid_method_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw Error(Errc::InvalidArgument, "unknown method '" + std::string(name) + "'; valid methods: " + valid);
}

// ---------------------------------------------------------------------------
// Pseudocauses

enum class PseudocauseKind { Seasonal, Trend, Custom };

inline std::string_view pseudocause_kind_name(PseudocauseKind k) {
  switch (k) {
    case PseudocauseKind::Seasonal: return "seasonal";
    case PseudocauseKind::Trend: return "trend";
    case PseudocauseKind::Custom: return "custom";
  }
  return "custom";
}

inline PseudocauseKind parse_pseudocause_kind(std::string_view s) {
  if (s == "seasonal") return PseudocauseKind::Seasonal;
  if (s == "trend") return PseudocauseKind::Trend;
  if (s == "custom" || s == "custom-series") return PseudocauseKind::Custom;
  throw Error(Errc::InvalidArgument, "unknown pseudocause kind '" + std::string(s) + "' (seasonal, trend, custom)");
}

struct Pseudocause {
  std::string key;
  std::string source;
  PseudocauseKind kind = PseudocauseKind::Seasonal;
  int param = 0;  // period for seasonal, window for trend
  Vector series;
};

/// Mean-per-phase profile of y for a period (in grid steps), tiled over the whole series.
inline Vector seasonal_profile(const Vector& y, int period) {
  const auto t = y.size();
  if (period < 2 || period > t / 2) throw Error(Errc::BadPeriod, "period " + std::to_string(period) + " outside [2, T/2]");
  std::vector<double> sum(static_cast<std::size_t>(period), 0.0);
  std::vector<double> count(static_cast<std::size_t>(period), 0.0);
  for (Eigen::Index i = 0; i < t; ++i) {
    sum[static_cast<std::size_t>(i % period)] += y(i);
    count[static_cast<std::size_t>(i % period)] += 1;
  }
  Vector out(t);
  for (Eigen::Index i = 0; i < t; ++i) out(i) = sum[static_cast<std::size_t>(i % period)] / count[static_cast<std::size_t>(i % period)];
  return out;
}

/// Centered moving average; the window is truncated at the edges.
inline Vector moving_average(const Vector& y, int window) {
  const auto t = y.size();
  if (window < 2 || window > t / 2) throw Error(Errc::BadPeriod, "window " + std::to_string(window) + " outside [2, T/2]");
  const Eigen::Index before = (window - 1) / 2;
  const Eigen::Index after = window - 1 - before;
  Vector prefix(t + 1);
  prefix(0) = 0;
  for (Eigen::Index i = 0; i < t; ++i) prefix(i + 1) = prefix(i) + y(i);
  Vector out(t);
  for (Eigen::Index i = 0; i < t; ++i) {
    const auto lo = std::max<Eigen::Index>(0, i - before);
    const auto hi = std::min<Eigen::Index>(t - 1, i + after);
    out(i) = (prefix(hi + 1) - prefix(lo)) / static_cast<double>(hi - lo + 1);
  }
  return out;
}

inline std::string default_pseudocause_key(const std::string& source, PseudocauseKind kind, int param) {
  std::string key = "pseudocause/" + std::string(pseudocause_kind_name(kind)) + "(" + source;
  if (kind != PseudocauseKind::Custom) key += "," + std::to_string(param);
  return key + ")";
}

/// Builds a pseudocause from the first output of `source`.
inline Pseudocause make_pseudocause(const FeatureFamily& source, PseudocauseKind kind, int param,
                                    const std::vector<double>& custom = {}, std::string key = {}) {
  if (source.cols() == 0) throw Error(Errc::EmptyFamily, source.key);
  const Vector y = source.matrix.col(0);
  Pseudocause pc;
  pc.source = source.key;
  pc.kind = kind;
  pc.param = param;
  switch (kind) {
    case PseudocauseKind::Seasonal: pc.series = seasonal_profile(y, param); break;
    case PseudocauseKind::Trend: pc.series = moving_average(y, param); break;
    case PseudocauseKind::Custom:
      if (static_cast<Eigen::Index>(custom.size()) != y.size())
        throw Error(Errc::InvalidArgument, "custom pseudocause needs " + std::to_string(y.size()) + " values");
      pc.series = Eigen::Map<const Vector>(custom.data(), static_cast<Eigen::Index>(custom.size()));
      if (!pc.series.allFinite()) throw Error(Errc::InvalidArgument, "custom pseudocause has non-finite values");
      break;
  }
  pc.key = key.empty() ? default_pseudocause_key(source.key, kind, param) : std::move(key);
  return pc;
}

inline FeatureFamily pseudocause_family(const Pseudocause& pc) {
  FeatureFamily f;
  f.key = pc.key;
  f.feature_names = {pc.key + "{}"};
  f.feature_metrics = f.feature_names;  // a derived metric, disjoint from its source
  f.matrix = Matrix(pc.series.size(), 1);
  f.matrix.col(0) = pc.series;
  f.provenance = "pseudocause";
  return f;
}

// ---------------------------------------------------------------------------
// Sessions

using TimeRange = std::pair<std::int64_t, std::int64_t>;

struct RunRecord {
  std::size_t number = 0;
  std::string token;
  RankedReport report;
  std::vector<std::pair<std::string, std::string>> excluded;
  std::set<std::string> scored;  // every family that produced a score, including those past the cutoff
};

struct Session {
  std::string id;
  std::string dataset;
  std::string target;
  std::vector<std::string> condition;
  std::string search = "*";
  ScoringConfig config;
  std::optional<TimeRange> range;
  std::optional<TimeRange> highlight;
  std::size_t top_k = kDefaultTopK;
  unsigned workers = 0;  // 0 = hardware concurrency
  std::vector<Pseudocause> pseudocauses;
  std::vector<RunRecord> runs;
  std::optional<std::string> parent;
};

/// Scoring grid of a session: the table grid restricted to the session range, with the highlight attached.
inline TimeIndex session_index(const Session& s, const TimeIndex& base) {
  TimeIndex idx = base;
  if (s.range) {
    auto first = base.slot_of(s.range->first);
    auto last = base.slot_of(s.range->second);
    if (!first || !last || *first >= *last)
      throw Error(Errc::InvalidArgument, "session range must lie inside the dataset range and span >= 2 slots");
    idx = TimeIndex(base.at(*first), base.at(*last), base.step);
  }
  if (s.highlight) {
    if (s.highlight->first > s.highlight->second || s.highlight->first < idx.start_ts || s.highlight->second > idx.end_ts)
      throw Error(Errc::InvalidArgument, "highlight range must lie inside the total range");
    idx.highlight = s.highlight;
  }
  return idx;
}

/// Family lookup over the dataset table cropped to a session, plus the session's pseudocauses.
class SessionFamilies {
 public:
  SessionFamilies(const Session& s, const FamilyTable& base) : base_(base), index_(session_index(s, base.index())) {
    first_ = static_cast<Eigen::Index>(*base.index().slot_of(index_.start_ts));
    for (const auto& pc : s.pseudocauses) {
      if (base.contains(pc.key)) throw Error(Errc::DuplicateFamilyKey, pc.key);
      Pseudocause cur = pc;
      if (pc.kind != PseudocauseKind::Custom) cur = make_pseudocause(crop(get(pc.source)), pc.kind, pc.param, {}, pc.key);
      if (static_cast<std::size_t>(cur.series.size()) != index_.size())
        throw Error(Errc::InvalidArgument, "pseudocause '" + pc.key + "' does not match the session range");
      extra_.emplace(pc.key, pseudocause_family(cur));
    }
  }

  const TimeIndex& index() const { return index_; }
  bool contains(const std::string& key) const { return extra_.count(key) || base_.contains(key); }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& f : base_.families()) out.push_back(f.key);
    for (const auto& [k, f] : extra_) out.push_back(k);
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Table holding just the families of one hypothesis, on the session grid.
  FamilyTable subtable(const Hypothesis& h) const {
    FamilyTable t(index_);
    std::set<std::string> seen;
    auto add = [&](const std::string& key) {
      if (seen.insert(key).second) t.add(crop(get(key)));
    };
    add(h.x);
    add(h.y);
    for (const auto& z : h.z) add(z);
    return t;
  }

  // Metadata-only lookup (the matrix may be on the uncropped grid).
  const FeatureFamily& get(const std::string& key) const {
    auto it = extra_.find(key);
    return it != extra_.end() ? it->second : base_.at(key);
  }

 private:
  FeatureFamily crop(const FeatureFamily& f) const {
    if (f.rows() == index_.size()) return f;
    FeatureFamily c = f;
    c.matrix = f.matrix.middleRows(first_, static_cast<Eigen::Index>(index_.size()));
    return c;
  }

  const FamilyTable& base_;
  TimeIndex index_;
  Eigen::Index first_ = 0;
  std::map<std::string, FeatureFamily> extra_;
};

/// Checks the session against its dataset: families resolve, the target is not conditioned on,
/// target and conditioning metrics are disjoint, ranges and config are valid.
inline void validate_session(const Session& s, const FamilyTable& base) {
  s.config.validate();
  if (s.top_k < 1) throw Error(Errc::InvalidArgument, "top_k must be >= 1");
  Glob{s.search};
  SessionFamilies fams(s, base);
  if (s.target.empty()) throw Error(Errc::InvalidArgument, "session needs a target family");
  if (!fams.contains(s.target)) throw Error(Errc::UnknownFamily, s.target);
  std::set<std::string> seen;
  for (const auto& c : s.condition) {
    if (!fams.contains(c)) throw Error(Errc::UnknownFamily, c);
    if (c == s.target) throw Error(Errc::OverlappingMetrics, "target '" + c + "' is also in the conditioning set");
    if (!seen.insert(c).second) throw Error(Errc::InvalidArgument, "conditioning family '" + c + "' listed twice");
  }
  const auto ym = fams.get(s.target).metric_set();
  for (const auto& c : s.condition)
    for (const auto& m : fams.get(c).feature_metrics)
      if (ym.count(m)) throw Error(Errc::OverlappingMetrics, m);
}

namespace detail {

inline unsigned pool_width(unsigned requested) {
  if (requested > 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) over `width` threads; the first exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, unsigned width, Fn&& fn) {
  width = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, width), std::max<std::size_t>(n, 1)));
  if (width == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (unsigned w = 0; w < width; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

inline ScoringConfig hypothesis_config(const ScoringConfig& base, const std::string& family) {
  ScoringConfig c = base;
  c.seed = mix_seed(base.seed, stable_hash(family));
  return c;
}

/// Scores every hypothesis of the session in parallel, ranks them and appends the run.
/// A family that fails to score lands in the failure tail with score 0 and the error text.
inline const RunRecord& run_search(Session& session, const FamilyTable& base, std::string token = {}) {
  validate_session(session, base);
  const SessionFamilies fams(session, base);
  const Glob search(session.search);

  RunRecord run;
  run.number = session.runs.size() + 1;
  run.token = std::move(token);
  std::vector<Hypothesis> hyps;
  for (const auto& key : fams.keys()) {
    if (!search.matches(key)) continue;
    if (key == session.target) {
      run.excluded.emplace_back(key, "target");
      continue;
    }
    if (std::find(session.condition.begin(), session.condition.end(), key) != session.condition.end()) {
      run.excluded.emplace_back(key, "condition");
      continue;
    }
    hyps.push_back(Hypothesis{key, session.target, session.condition});
  }

  // Most expensive hypotheses first so long jobs do not trail at the end.
  std::vector<double> cost(hyps.size(), 0.0);
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    CostInputs c;
    c.t = static_cast<double>(fams.index().size());
    c.nx = static_cast<double>(fams.get(hyps[i].x).cols());
    c.ny = static_cast<double>(fams.get(hyps[i].y).cols());
    for (const auto& z : hyps[i].z) c.nz += static_cast<double>(fams.get(z).cols());
    cost[i] = estimate_cost(c, session.config);
  }
  std::vector<std::size_t> order(hyps.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return cost[a] > cost[b]; });

  std::vector<ScoreReport> reports(hyps.size());
  std::vector<char> invalid(hyps.size(), 0);
  detail::parallel_for(hyps.size(), detail::pool_width(session.workers), [&](std::size_t slot) {
    const std::size_t i = order[slot];
    const auto& h = hyps[i];
    const auto start = std::chrono::steady_clock::now();
    ScoreReport r;
    try {
      const FamilyTable t = fams.subtable(h);
      try {
        validate_hypothesis(h, t);
      } catch (const Error& e) {
        if (e.code() != Errc::OverlappingMetrics) throw;
        invalid[i] = 1;
        reports[i].hypothesis = h;
        reports[i].diagnostics = {e.what()};
        return;
      }
      r = score_hypothesis(h, t, hypothesis_config(session.config, h.x));
      if (!std::isfinite(r.score)) throw Error(Errc::NumericalFailure, "non-finite score");
    } catch (const std::exception& e) {
      r = ScoreReport{};
      r.hypothesis = h;
      r.method = session.config.method;
      r.proj_dim = session.config.method == Method::L2Proj ? session.config.proj_dim : std::nullopt;
      r.failed = true;
      r.diagnostics = {e.what()};
    }
    r.plot = {};
    r.timing_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
    reports[i] = std::move(r);
  });

  std::vector<ScoreReport> valid;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    if (invalid[i]) {
      run.excluded.emplace_back(reports[i].hypothesis.x, reports[i].diagnostics.front());
      continue;
    }
    valid.push_back(std::move(reports[i]));
  }
  std::vector<double> pvals;
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i].failed) continue;
    pvals.push_back(valid[i].p_value);
    ok.push_back(i);
    run.scored.insert(valid[i].hypothesis.x);
  }
  for (auto j : stats::benjamini_hochberg(pvals, kSignificanceLevel)) valid[ok[j]].significant = true;
  std::sort(run.excluded.begin(), run.excluded.end());
  run.report = rank(std::move(valid), session.top_k);
  session.runs.push_back(std::move(run));
  return session.runs.back();
}

struct SessionOverrides {
  std::optional<std::vector<std::string>> condition;
  std::optional<std::string> search;
  std::optional<TimeRange> range;
  std::optional<TimeRange> highlight;
  std::optional<ScoringConfig> config;
  std::vector<Pseudocause> add_pseudocauses;
};

/// Child session with the parent's settings, the overrides applied and no runs.
inline Session fork_session(const Session& parent, const SessionOverrides& o, std::string id, const FamilyTable& base) {
  Session child = parent;
  child.id = std::move(id);
  child.parent = parent.id;
  child.runs.clear();
  if (o.condition) child.condition = *o.condition;
  if (o.search) child.search = *o.search;
  if (o.range) {
    child.range = o.range;
    if (!o.highlight) child.highlight.reset();
  }
  if (o.highlight) child.highlight = o.highlight;
  if (o.config) child.config = *o.config;
  for (const auto& pc : o.add_pseudocauses) child.pseudocauses.push_back(pc);
  if (o.range) {
    for (const auto& pc : child.pseudocauses)
      if (pc.kind == PseudocauseKind::Custom)
        throw Error(Errc::InvalidOverride, "custom pseudocause '" + pc.key + "' is tied to the parent range");
  }
  try {
    validate_session(child, base);
  } catch (const Error& e) {
    throw Error(Errc::InvalidOverride, e.what());
  }
  return child;
}

/// Observed Y|Z and predicted E[Y|X,Z] for a family scored in the latest run (recomputed).
inline PlotData plot_series(const Session& session, const FamilyTable& base, const std::string& family) {
  if (session.runs.empty() || !session.runs.back().scored.count(family))
    throw Error(Errc::NotScored, "family '" + family + "' was not scored in the latest run");
  const SessionFamilies fams(session, base);
  const Hypothesis h{family, session.target, session.condition};
  return score_hypothesis(h, fams.subtable(h), hypothesis_config(session.config, family)).plot;
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::json config_to_json(const ScoringConfig& c) {
  nlohmann::json j = {{"method", method_name(c.method, c.proj_dim)},
                      {"k_folds", c.k_folds},
                      {"lambda_grid", c.lambda_grid},
                      {"proj_samples", c.proj_samples},
                      {"seed", c.seed}};
  if (c.proj_dim) j["proj_dim"] = *c.proj_dim;
  return j;
}

inline ScoringConfig config_from_json(const nlohmann::json& j) {
  ScoringConfig c;
  std::optional<int> proj;
  if (j.contains("proj_dim") && !j["proj_dim"].is_null()) proj = j["proj_dim"].get<int>();
  auto [m, d] = parse_method(j.value("method", std::string("l2")), proj);
  c.method = m;
  c.proj_dim = d;
  c.k_folds = j.value("k_folds", c.k_folds);
  if (j.contains("lambda_grid")) c.lambda_grid = j["lambda_grid"].get<std::vector<double>>();
  c.proj_samples = j.value("proj_samples", c.proj_samples);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

inline nlohmann::json range_to_json(const std::optional<TimeRange>& r) {
  if (!r) return nullptr;
  return {r->first, r->second};
}

inline std::optional<TimeRange> range_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    const auto dots = s.find("..");
    if (dots == std::string::npos) throw Error(Errc::InvalidArgument, "range must look like a..b");
    auto a = detail::parse_int(s.substr(0, dots));
    auto b = detail::parse_int(s.substr(dots + 2));
    if (!a || !b) throw Error(Errc::InvalidArgument, "range bounds must be integers");
    return TimeRange{*a, *b};
  }
  if (!j.is_array() || j.size() != 2) throw Error(Errc::InvalidArgument, "range must be [start, end]");
  return TimeRange{j[0].get<std::int64_t>(), j[1].get<std::int64_t>()};
}

inline nlohmann::json pseudocause_to_json(const Pseudocause& pc) {
  nlohmann::json j = {{"key", pc.key}, {"source", pc.source}, {"kind", pseudocause_kind_name(pc.kind)}, {"param", pc.param}};
  if (pc.kind == PseudocauseKind::Custom) j["series"] = std::vector<double>(pc.series.data(), pc.series.data() + pc.series.size());
  return j;
}

inline Pseudocause pseudocause_from_json(const nlohmann::json& j) {
  Pseudocause pc;
  pc.key = j.at("key").get<std::string>();
  pc.source = j.at("source").get<std::string>();
  pc.kind = parse_pseudocause_kind(j.at("kind").get<std::string>());
  pc.param = j.value("param", 0);
  if (j.contains("series")) {
    auto v = j["series"].get<std::vector<double>>();
    pc.series = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  return pc;
}

/// Session settings (no run history).
inline nlohmann::json session_to_json(const Session& s) {
  nlohmann::json pcs = nlohmann::json::array();
  for (const auto& pc : s.pseudocauses) pcs.push_back(pseudocause_to_json(pc));
  return {{"id", s.id},
          {"dataset", s.dataset},
          {"target", s.target},
          {"condition", s.condition},
          {"search", s.search},
          {"config", config_to_json(s.config)},
          {"range", range_to_json(s.range)},
          {"highlight", range_to_json(s.highlight)},
          {"top_k", s.top_k},
          {"workers", s.workers},
          {"pseudocauses", pcs},
          {"parent", s.parent ? nlohmann::json(*s.parent) : nlohmann::json(nullptr)}};
}

inline Session session_from_json(const nlohmann::json& j) {
  Session s;
  s.id = j.value("id", std::string());
  s.dataset = j.value("dataset", std::string());
  s.target = j.value("target", std::string());
  if (j.contains("condition")) s.condition = j["condition"].get<std::vector<std::string>>();
  s.search = j.value("search", std::string("*"));
  s.config = config_from_json(j.value("config", nlohmann::json::object()));
  s.range = range_from_json(j.value("range", nlohmann::json()));
  s.highlight = range_from_json(j.value("highlight", nlohmann::json()));
  s.top_k = j.value("top_k", kDefaultTopK);
  s.workers = j.value("workers", 0u);
  if (j.contains("pseudocauses"))
    for (const auto& pj : j["pseudocauses"]) s.pseudocauses.push_back(pseudocause_from_json(pj));
  if (j.contains("parent") && !j["parent"].is_null()) s.parent = j["parent"].get<std::string>();
  return s;
}

inline nlohmann::json entry_to_json(const ScoreReport& r, std::size_t rank, bool with_timing) {
  nlohmann::json j = {{"rank", rank},
                      {"family", r.hypothesis.x},
                      {"score", r.score},
                      {"p_value", r.p_value},
                      {"significant", r.significant},
                      {"diagnostics", r.diagnostics}};
  if (with_timing) j["timing_ms"] = r.timing_ms;
  return j;
}

/// The ranked report as JSON. Without timing the output is a pure function of
/// (dataset, session settings, seed); the CLI and the HTTP API both emit this object.
inline nlohmann::json report_to_json(const Session& s, const RunRecord& run, const TimeIndex& index,
                                     bool with_timing = false) {
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < run.report.entries.size(); ++i) entries.push_back(entry_to_json(run.report.entries[i], i + 1, with_timing));
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : run.report.failures) {
    nlohmann::json fj = {{"family", f.hypothesis.x}, {"score", 0.0}, {"error", f.diagnostics.empty() ? "" : f.diagnostics.front()}};
    if (with_timing) fj["timing_ms"] = f.timing_ms;
    failures.push_back(fj);
  }
  nlohmann::json excluded = nlohmann::json::array();
  for (const auto& [k, why] : run.excluded) excluded.push_back({{"family", k}, {"reason", why}});
  return {{"target", s.target},
          {"condition", s.condition},
          {"search", s.search},
          {"method", method_name(s.config.method, s.config.proj_dim)},
          {"seed", s.config.seed},
          {"range", {index.start_ts, index.end_ts}},
          {"highlight", range_to_json(index.highlight)},
          {"k", run.report.k},
          {"scored", run.report.scored},
          {"entries", entries},
          {"failures", failures},
          {"excluded", excluded}};
}

/// One JSON object per line: the ranked entries in order, then the failures.
inline std::string report_to_jsonl(const nlohmann::json& report) {
  std::string out;
  for (const auto& e : report.at("entries")) out += e.dump() + "\n";
  for (const auto& f : report.at("failures")) {
    nlohmann::json fj = f;
    fj["failed"] = true;
    out += fj.dump() + "\n";
  }
  return out;
}

inline RunRecord run_from_json(const nlohmann::json& j, const Session& s) {
  RunRecord run;
  run.number = j.at("run").get<std::size_t>();
  run.token = j.value("token", std::string());
  const auto& r = j.at("report");
  run.report.k = r.value("k", kDefaultTopK);
  run.report.scored = r.value("scored", std::size_t{0});
  auto base = [&](const nlohmann::json& e) {
    ScoreReport sr;
    sr.hypothesis = Hypothesis{e.at("family").get<std::string>(), s.target, s.condition};
    sr.method = s.config.method;
    sr.proj_dim = s.config.proj_dim;
    sr.timing_ms = e.value("timing_ms", std::int64_t{0});
    return sr;
  };
  for (const auto& e : r.at("entries")) {
    auto sr = base(e);
    sr.score = e.at("score").get<double>();
    sr.p_value = e.at("p_value").get<double>();
    sr.significant = e.value("significant", false);
    sr.diagnostics = e.value("diagnostics", std::vector<std::string>{});
    run.report.entries.push_back(std::move(sr));
  }
  for (const auto& e : r.at("failures")) {
    auto sr = base(e);
    sr.failed = true;
    sr.diagnostics = {e.value("error", std::string())};
    run.report.failures.push_back(std::move(sr));
  }
  for (const auto& e : r.at("excluded")) run.excluded.emplace_back(e.at("family").get<std::string>(), e.at("reason").get<std::string>());
  if (j.contains("scored_families")) {
    for (const auto& k : j["scored_families"]) run.scored.insert(k.get<std::string>());
  }
  return run;
}

}  // namespace causerank
