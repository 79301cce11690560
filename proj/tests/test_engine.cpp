#include "causerank/engine.hpp"
#include "causerank/synth.hpp"

#include <gtest/gtest.h>

using namespace causerank;

namespace {

synth::Scenario small_scenario(synth::Kind kind = synth::Kind::Univariate, std::uint64_t seed = 1) {
  synth::ScenarioSpec spec;
  spec.kind = kind;
  spec.t = 300;
  spec.n_families = 12;
  spec.features_mean = 4;
  spec.features_max = 8;
  spec.seed = seed;
  return synth::generate(spec);
}

Session session_for(const synth::Scenario& sc, Method m = Method::L2) {
  Session s;
  s.id = "t";
  s.target = sc.target;
  s.condition = sc.condition;
  s.config.method = m;
  if (m == Method::L2Proj) s.config.proj_dim = 3;
  s.config.seed = 9;
  s.workers = 1;
  return s;
}

FeatureFamily single(const std::string& key, const std::string& metric, const Vector& v) {
  FeatureFamily f;
  f.key = key;
  f.feature_names = {key + "{}"};
  f.feature_metrics = {metric};
  f.matrix = Matrix(v.size(), 1);
  f.matrix.col(0) = v;
  return f;
}

}  // namespace

TEST(Method, ParseNames) {
  EXPECT_EQ(parse_method("l2").first, Method::L2);
  EXPECT_EQ(parse_method("corrmax").first, Method::CorrMax);
  auto [m, d] = parse_method("l2-p500");
  EXPECT_EQ(m, Method::L2Proj);
  EXPECT_EQ(d, std::optional<int>(500));
  EXPECT_EQ(parse_method("l2-proj", 7).second, std::optional<int>(7));
  EXPECT_EQ(parse_method("l2-proj").second, std::optional<int>(50));
  try {
    parse_method("lasso");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidArgument);
    EXPECT_NE(std::string(e.what()).find("corrmean"), std::string::npos);
  }
  EXPECT_THROW(parse_method("l2-p0"), Error);
  EXPECT_THROW(parse_method("l2-px"), Error);
  for (const auto& n : valid_method_names()) EXPECT_NO_THROW(parse_method(n));
}

TEST(Pseudocause, SeasonalProfileIsPhaseMean) {
  Vector y(8);
  y << 1, 10, 3, 20, 5, 30, 7, 40;
  const Vector p = seasonal_profile(y, 2);
  Vector expected(8);
  expected << 4, 25, 4, 25, 4, 25, 4, 25;
  EXPECT_EQ(p, expected);
  EXPECT_THROW(seasonal_profile(y, 1), Error);
  EXPECT_THROW(seasonal_profile(y, 5), Error);
  EXPECT_NO_THROW(seasonal_profile(y, 4));
}

TEST(Pseudocause, MovingAverageTruncatesAtEdges) {
  Vector y(6);
  y << 1, 2, 3, 4, 5, 6;
  const Vector ma = moving_average(y, 3);
  Vector expected(6);
  expected << 1.5, 2, 3, 4, 5, 5.5;
  EXPECT_LT((ma - expected).cwiseAbs().maxCoeff(), 1e-12);
  try {
    moving_average(y, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::BadPeriod);
  }
}

TEST(Pseudocause, KeysAndCustomSeries) {
  Vector y = Vector::LinSpaced(10, 0, 9);
  const auto src = single("target", "target-metric", y);
  auto pc = make_pseudocause(src, PseudocauseKind::Seasonal, 3);
  EXPECT_EQ(pc.key, "pseudocause/seasonal(target,3)");
  EXPECT_EQ(make_pseudocause(src, PseudocauseKind::Trend, 2).key, "pseudocause/trend(target,2)");
  const std::vector<double> custom(10, 1.5);
  auto c = make_pseudocause(src, PseudocauseKind::Custom, 0, custom, "my-series");
  EXPECT_EQ(c.key, "my-series");
  EXPECT_EQ(c.series, Vector::Constant(10, 1.5));
  EXPECT_THROW(make_pseudocause(src, PseudocauseKind::Custom, 0, std::vector<double>(9, 0.0)), Error);
  const auto fam = pseudocause_family(pc);
  EXPECT_EQ(fam.key, pc.key);
  EXPECT_FALSE(fam.metric_set().count("target-metric"));
  EXPECT_THROW(parse_pseudocause_kind("daily"), Error);
}

TEST(RunSearch, ExcludesTargetAndConditionAndRanksPlantFirst) {
  auto sc = small_scenario();
  Session s = session_for(sc);
  const auto& run = run_search(s, sc.table);
  ASSERT_FALSE(run.report.entries.empty());
  EXPECT_EQ(run.report.entries.front().hypothesis.x, sc.roles.at("planted"));
  EXPECT_EQ(run.report.scored, sc.table.size() - 1);
  ASSERT_EQ(run.excluded.size(), 1u);
  EXPECT_EQ(run.excluded[0], (std::pair<std::string, std::string>{"target", "target"}));
  for (const auto& e : run.report.entries) EXPECT_NE(e.hypothesis.x, sc.target);
  EXPECT_TRUE(run.report.entries.front().significant);
  EXPECT_EQ(s.runs.size(), 1u);
  EXPECT_EQ(run.number, 1u);
}

TEST(RunSearch, ConditioningAndSearchGlob) {
  auto sc = small_scenario(synth::Kind::Chain);
  Session s = session_for(sc);
  s.condition = {sc.roles.at("chain-effect")};
  s.search = "fam_*";
  const auto& run = run_search(s, sc.table);
  std::set<std::string> reasons;
  for (const auto& [k, why] : run.excluded) reasons.insert(why);
  EXPECT_EQ(reasons, (std::set<std::string>{"condition"}));
  EXPECT_EQ(run.report.entries.front().hypothesis.x, sc.roles.at("chain-cause"));
  for (const auto& e : run.report.entries) EXPECT_EQ(e.hypothesis.z, s.condition);
}

TEST(RunSearch, OverlappingFamiliesAreExcludedNotFailed) {
  auto sc = small_scenario();
  auto copy = sc.table.at(sc.target);
  copy.key = "target-copy";
  sc.table.add(copy);
  Session s = session_for(sc);
  const auto& run = run_search(s, sc.table);
  bool found = false;
  for (const auto& [k, why] : run.excluded)
    if (k == "target-copy") found = true;
  EXPECT_TRUE(found);
  EXPECT_TRUE(run.report.failures.empty());
}

TEST(RunSearch, FailuresGoToTailWithScoreZero) {
  auto sc = small_scenario();
  FamilyTable t(sc.table.index());
  for (const auto& f : sc.table.families()) {
    if (f.key == sc.target) t.add(single("flat", "flat", Vector::Constant(static_cast<Eigen::Index>(f.rows()), 2.0)));
    else t.add(f);
  }
  Session s = session_for(sc);
  s.target = "flat";
  const auto& run = run_search(s, t);
  EXPECT_TRUE(run.report.entries.empty());
  EXPECT_EQ(run.report.failures.size(), t.size() - 1);
  for (const auto& f : run.report.failures) {
    EXPECT_EQ(f.score, 0.0);
    ASSERT_FALSE(f.diagnostics.empty());
  }
  const auto j = report_to_json(s, run, t.index());
  EXPECT_EQ(j["failures"].size(), t.size() - 1);
  EXPECT_EQ(j["failures"][0]["score"], 0.0);
}

TEST(RunSearch, SerialAndParallelReportsAreIdentical) {
  auto sc = small_scenario(synth::Kind::Univariate, 4);
  for (Method m : {Method::CorrMean, Method::L2, Method::L2Proj}) {
    Session a = session_for(sc, m);
    Session b = a;
    b.workers = 4;
    const auto ja = report_to_json(a, run_search(a, sc.table), sc.table.index()).dump();
    const auto jb = report_to_json(b, run_search(b, sc.table), sc.table.index()).dump();
    EXPECT_EQ(ja, jb) << method_name(m);
    Session c = session_for(sc, m);
    EXPECT_EQ(report_to_json(c, run_search(c, sc.table), sc.table.index()).dump(), ja);
  }
}

TEST(RunSearch, SeedChangesProjectionScores) {
  auto sc = small_scenario(synth::Kind::Univariate, 5);
  Session a = session_for(sc, Method::L2Proj);
  Session b = a;
  b.config.seed = 10;
  const auto& ra = run_search(a, sc.table);
  const auto& rb = run_search(b, sc.table);
  bool any_diff = false;
  for (std::size_t i = 0; i < ra.report.entries.size(); ++i)
    any_diff |= ra.report.entries[i].score != rb.report.entries[i].score;
  EXPECT_TRUE(any_diff);
}

TEST(RunSearch, RangeAndHighlightCropTheGrid) {
  auto sc = small_scenario();
  Session s = session_for(sc);
  s.range = TimeRange{50, 249};
  s.highlight = TimeRange{100, 120};
  const auto index = session_index(s, sc.table.index());
  EXPECT_EQ(index.size(), 200u);
  const auto& run = run_search(s, sc.table);
  const auto j = report_to_json(s, run, index);
  EXPECT_EQ(j["range"], nlohmann::json({50, 249}));
  EXPECT_EQ(j["highlight"], nlohmann::json({100, 120}));
  s.range = TimeRange{50, 5000};
  EXPECT_THROW(run_search(s, sc.table), Error);
}

TEST(RunSearch, SeasonalPseudocauseConditioning) {
  synth::ScenarioSpec spec;
  spec.kind = synth::Kind::SeasonalSpike;
  spec.t = 600;
  spec.n_families = 10;
  spec.features_mean = 3;
  spec.features_max = 5;
  spec.seed = 2;
  auto sc = synth::generate(spec);
  Session s = session_for(sc);
  auto pc = make_pseudocause(sc.table.at(sc.target), PseudocauseKind::Seasonal, 60);
  s.condition.push_back(pc.key);
  s.pseudocauses.push_back(pc);
  const auto& run = run_search(s, sc.table);
  EXPECT_EQ(run.report.entries.front().hypothesis.x, sc.roles.at("spike-cause"));
  bool excluded = false;
  for (const auto& [k, why] : run.excluded) excluded |= k == pc.key && why == "condition";
  EXPECT_TRUE(excluded);
}

TEST(Session, ValidationErrors) {
  auto sc = small_scenario();
  Session s = session_for(sc);
  s.target = "nope";
  EXPECT_THROW(validate_session(s, sc.table), Error);
  s = session_for(sc);
  s.condition = {sc.target};
  try {
    validate_session(s, sc.table);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::OverlappingMetrics);
  }
  s = session_for(sc);
  s.top_k = 0;
  EXPECT_THROW(validate_session(s, sc.table), Error);
}

TEST(Fork, OverridesAndValidation) {
  auto sc = small_scenario(synth::Kind::Chain);
  Session parent = session_for(sc);
  run_search(parent, sc.table);
  SessionOverrides o;
  o.condition = std::vector<std::string>{sc.roles.at("chain-effect")};
  o.range = TimeRange{0, 199};
  auto child = fork_session(parent, o, "child", sc.table);
  EXPECT_EQ(child.parent, std::optional<std::string>("t"));
  EXPECT_TRUE(child.runs.empty());
  EXPECT_EQ(child.condition, *o.condition);
  EXPECT_EQ(child.config.seed, parent.config.seed);
  SessionOverrides bad;
  bad.condition = std::vector<std::string>{"missing"};
  try {
    fork_session(parent, bad, "c2", sc.table);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidOverride);
  }
  Session with_custom = parent;
  auto pc = make_pseudocause(sc.table.at(sc.target), PseudocauseKind::Custom, 0, std::vector<double>(300, 1.0), "custom");
  with_custom.pseudocauses.push_back(pc);
  SessionOverrides ranged;
  ranged.range = TimeRange{0, 99};
  EXPECT_THROW(fork_session(with_custom, ranged, "c3", sc.table), Error);
}

TEST(Plot, RequiresScoredFamily) {
  auto sc = small_scenario();
  Session s = session_for(sc);
  const auto planted = sc.roles.at("planted");
  try {
    plot_series(s, sc.table, planted);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotScored);
  }
  run_search(s, sc.table);
  const auto plot = plot_series(s, sc.table, planted);
  EXPECT_EQ(plot.observed.size(), 300u);
  EXPECT_EQ(plot.predicted.size(), 300u);
  EXPECT_THROW(plot_series(s, sc.table, sc.target), Error);
}

TEST(Serialisation, SessionAndRunRoundTrip) {
  auto sc = small_scenario();
  Session s = session_for(sc, Method::L2Proj);
  s.condition = {};
  s.range = TimeRange{10, 200};
  s.pseudocauses.push_back(make_pseudocause(sc.table.at(sc.target), PseudocauseKind::Trend, 5));
  const auto j = session_to_json(s);
  const auto back = session_from_json(j);
  EXPECT_EQ(session_to_json(back), j);
  EXPECT_EQ(range_from_json("3..9"), std::optional<TimeRange>(TimeRange{3, 9}));
  EXPECT_THROW(range_from_json("3-9"), Error);

  const auto& run = run_search(s, sc.table);
  const auto report = report_to_json(s, run, session_index(s, sc.table.index()));
  nlohmann::json stored = {{"run", 1}, {"token", "tok"}, {"report", report}, {"scored_families", run.scored}};
  const auto restored = run_from_json(stored, s);
  EXPECT_EQ(report_to_json(s, restored, session_index(s, sc.table.index())), report);
  EXPECT_EQ(restored.scored, run.scored);
}

TEST(Serialisation, JsonlHasOneObjectPerEntry) {
  auto sc = small_scenario();
  Session s = session_for(sc);
  s.top_k = 5;
  const auto& run = run_search(s, sc.table);
  const auto text = report_to_jsonl(report_to_json(s, run, sc.table.index()));
  std::istringstream in(text);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line); ++n) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["rank"], n + 1);
    EXPECT_TRUE(j.contains("family"));
    EXPECT_TRUE(j.contains("score"));
  }
  EXPECT_EQ(n, 5u);
}
