// Acceptance checks. Prints one PASS/FAIL line per criterion.
//   acceptance                 run every criterion
//   acceptance --criterion N   run criterion N only

#include "causerank/cli.hpp"
#include "causerank/engine.hpp"
#include "causerank/ranking.hpp"
#include "causerank/scoring.hpp"
#include "causerank/stats.hpp"
#include "causerank/synth.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sys/wait.h>

using namespace causerank;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> g;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = g(rng);
  return m;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double variance_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

// In-sample OLS r^2 of y on X (X already holds an intercept column).
double ols_r2(const Matrix& x, const Vector& y) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(x);
  const Eigen::VectorXd qty = qr.householderQ().adjoint() * y;
  const double explained_plus_mean = qty.head(x.cols()).squaredNorm();
  const double mean_part = y.sum() * y.sum() / static_cast<double>(y.size());
  const double tss = y.squaredNorm() - mean_part;
  return (explained_plus_mean - mean_part) / tss;
}

// 200 null OLS fits at (n, p) = (1000, 500), shared by criteria 1 and 2.
const std::vector<double>& null_r2_samples() {
  static const std::vector<double> samples = [] {
    const int n = 1000, p = 500, trials = 200;
    std::vector<double> out;
    for (int t = 0; t < trials; ++t) {
      std::mt19937_64 rng(mix_seed(1001, static_cast<std::uint64_t>(t)));
      Matrix x = gaussian(rng, n, p);
      x.col(0).setOnes();
      const Matrix y = gaussian(rng, n, 1);
      out.push_back(ols_r2(x, y.col(0)));
    }
    return out;
  }();
  return samples;
}

Verdict c1_null_beta() {
  const auto& r2 = null_r2_samples();
  const auto model = stats::null_r2_model(1000, 500);
  const double m = mean_of(r2);
  const double d = stats::ks_statistic(r2, [&](double x) { return model.cdf(x); });
  const double pk = stats::ks_pvalue(d, r2.size());
  return {std::abs(m - 0.4995) <= 0.02 && pk >= 0.01,
          fmt("mean r2 %.4f (target 0.4995 +/- 0.02), KS D=%.4f p=%.3f (need >= 0.01) vs Beta(%.1f, %.1f)", m, d, pk,
              model.a, model.b)};
}

Verdict c2_wherry() {
  std::vector<double> adj;
  for (double r : null_r2_samples()) adj.push_back(stats::wherry_adjust(r, 1000, 500));
  const double m = mean_of(adj);
  const double v = variance_of(adj);
  const double target = stats::adj_null_variance(1000, 500);
  return {std::abs(m) <= 0.05 && std::abs(v / target - 1) <= 0.30,
          fmt("adjusted mean %.4f (|.| <= 0.05), variance %.3e vs %.3e (ratio %.3f, need within 30%%)", m, v, target, v / target)};
}

Verdict c3_ridge_null() {
  ScoringConfig cfg;
  std::vector<double> scores;
  std::size_t zeros = 0;
  for (int t = 0; t < 100; ++t) {
    std::mt19937_64 rng(mix_seed(3003, static_cast<std::uint64_t>(t)));
    const Matrix x = gaussian(rng, 1000, 500);
    const Matrix y = gaussian(rng, 1000, 1);
    scores.push_back(cv_score(x, y, cfg));
    zeros += scores.back() == 0.0;
  }
  const double m = mean_of(scores);
  return {m <= 0.05, fmt("mean cv_score %.4f over 100 null trials (need <= 0.05); %zu exactly 0, max %.4f", m, zeros,
                         *std::max_element(scores.begin(), scores.end()))};
}

Verdict c4_residual_identity() {
  std::mt19937_64 rng(4004);
  std::uniform_int_distribution<int> dim(1, 20);
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const Eigen::Index t = 200;
    const Matrix x = gaussian(rng, t, dim(rng));
    const Matrix y = gaussian(rng, t, dim(rng));
    const Matrix z = gaussian(rng, t, dim(rng));
    // Residuals from the library's ridge solver in the lambda -> 0 limit.
    const Matrix rx = ridge_fit(z, x, 1e-14).residuals;
    const Matrix ry = ridge_fit(z, y, 1e-14).residuals;
    const Eigen::MatrixXd lhs = rx.transpose() * ry;
    const Eigen::MatrixXd ztz = z.transpose() * z;
    const Eigen::MatrixXd rhs =
        x.transpose() * y - x.transpose() * z * ztz.colPivHouseholderQr().solve(Eigen::MatrixXd(z.transpose() * y));
    worst = std::max(worst, (lhs - rhs).norm() / rhs.norm());
  }
  return {worst <= 1e-8, fmt("max relative error %.3e over 50 instances (need <= 1e-8)", worst)};
}

Verdict c5_conditional_independence() {
  ScoringConfig cfg;
  const int trials = 40;
  int null_ok = 0, planted_ok = 0;
  std::vector<double> planted;
  for (int t = 0; t < trials; ++t) {
    std::mt19937_64 rng(mix_seed(5005, static_cast<std::uint64_t>(t)));
    const Eigen::Index n = 2000;
    const Matrix z = gaussian(rng, n, 2);
    // X and Y depend on Z only, so Sigma_xy = Sigma_xz Sigma_zz^-1 Sigma_zy.
    const Matrix x = z * Eigen::Vector2d(0.8, -0.5) + gaussian(rng, n, 1);
    const Matrix y = z * Eigen::Vector2d(0.3, 0.9) + gaussian(rng, n, 1);
    null_ok += conditional_score(x, y, z, cfg) <= 0.05;
    // Partial dependence: Var(Y | Z) = 2, of which X's innovation explains 1.
    const Matrix u = gaussian(rng, n, 1);
    const Matrix x2 = z * Eigen::Vector2d(0.8, -0.5) + u;
    const Matrix y2 = z * Eigen::Vector2d(0.3, 0.9) + u + gaussian(rng, n, 1);
    const double s = conditional_score(x2, y2, z, cfg);
    planted.push_back(s);
    planted_ok += s >= 0.35 && s <= 0.65;
  }
  return {null_ok >= 38 && planted_ok >= 36,
          fmt("independent: %d/40 <= 0.05 (need >= 38); planted partial r2 0.5: %d/40 in [0.35, 0.65] (need >= 36), mean %.3f",
              null_ok, planted_ok, mean_of(planted))};
}

Session scenario_session(const synth::Scenario& sc, const std::string& method, std::uint64_t seed) {
  Session s;
  s.id = "acceptance";
  s.target = sc.target;
  s.condition = sc.condition;
  std::tie(s.config.method, s.config.proj_dim) = parse_method(method);
  s.config.seed = seed;
  return s;
}

std::size_t rank_of(const RunRecord& run, const std::string& family) {
  for (std::size_t i = 0; i < run.report.entries.size(); ++i)
    if (run.report.entries[i].hypothesis.x == family) return i + 1;
  return std::numeric_limits<std::size_t>::max();
}

Verdict c6_planted_rank() {
  int corrmax = 0, proj = 0;
  for (int t = 0; t < 20; ++t) {
    synth::ScenarioSpec spec;
    spec.kind = synth::Kind::Univariate;
    spec.n_families = 100;
    spec.seed = mix_seed(6006, static_cast<std::uint64_t>(t));
    const auto sc = synth::generate(spec);
    for (const char* m : {"corrmax", "l2-p50"}) {
      Session s = scenario_session(sc, m, 6);
      const auto& run = run_search(s, sc.table);
      const bool first = discounted_gain(run.report, sc.labels) == 1.0;
      (std::string(m) == "corrmax" ? corrmax : proj) += first;
    }
  }
  return {corrmax >= 18 && proj >= 18, fmt("planted family at rank 1: corrmax %d/20, l2-p50 %d/20 (need >= 18 each)", corrmax, proj)};
}

Verdict c7_joint_power() {
  int both = 0, l2_hits = 0, corr_misses = 0;
  for (int t = 0; t < 20; ++t) {
    synth::ScenarioSpec spec;
    spec.kind = synth::Kind::Joint;
    spec.n_families = 100;
    spec.n_effects = 6;
    spec.seed = mix_seed(7007, static_cast<std::uint64_t>(t));
    const auto sc = synth::generate(spec);
    Session a = scenario_session(sc, "l2", 7);
    Session b = scenario_session(sc, "corrmax", 7);
    const int l2 = success_at_k(run_search(a, sc.table).report, sc.labels, 5);
    const int cm = success_at_k(run_search(b, sc.table).report, sc.labels, 5);
    l2_hits += l2;
    corr_misses += cm == 0;
    both += l2 == 1 && cm == 0;
  }
  return {both >= 16, fmt("l2 success@5 = 1 and corrmax success@5 = 0 in %d/20 (need >= 16); l2 hits %d, corrmax misses %d",
                          both, l2_hits, corr_misses)};
}

Verdict c8_pseudocause_lift() {
  int ok = 0;
  std::string ranks;
  for (int t = 0; t < 20; ++t) {
    synth::ScenarioSpec spec;
    spec.kind = synth::Kind::SeasonalSpike;
    spec.n_families = 100;
    spec.seed = mix_seed(8008, static_cast<std::uint64_t>(t));
    const auto sc = synth::generate(spec);
    const auto cause = sc.roles.at("spike-cause");
    Session plain = scenario_session(sc, "l2", 8);
    const auto before = rank_of(run_search(plain, sc.table), cause);
    Session cond = scenario_session(sc, "l2", 8);
    auto pc = make_pseudocause(sc.table.at(sc.target), PseudocauseKind::Seasonal, spec.period);
    cond.condition.push_back(pc.key);
    cond.pseudocauses.push_back(std::move(pc));
    const auto after = rank_of(run_search(cond, sc.table), cause);
    ok += after < before || (after == 1 && before == 1);
    if (t < 5) ranks += fmt(" %zu->%zu", before, after);
  }
  return {ok >= 18, fmt("spike-cause rank improved or held at 1 in %d/20 (need >= 18); first ranks%s", ok, ranks.c_str())};
}

Verdict c9_chain() {
  ScoringConfig cfg;
  int ok = 0;
  double worst_cond = 0, min_marg = 1;
  for (int t = 0; t < 20; ++t) {
    synth::ScenarioSpec spec;
    spec.kind = synth::Kind::Chain;
    spec.n_families = 0;
    spec.seed = mix_seed(9009, static_cast<std::uint64_t>(t));
    const auto sc = synth::generate(spec);
    const auto& z = sc.table.at(sc.roles.at("chain-cause")).matrix;
    const auto& x = sc.table.at(sc.roles.at("chain-effect")).matrix;
    const auto& y = sc.table.at(sc.target).matrix;
    const double cond = conditional_score(z, x, y, cfg);
    const double marg = cv_score(z, x, cfg);
    worst_cond = std::max(worst_cond, cond);
    min_marg = std::min(min_marg, marg);
    ok += cond <= 0.05 && marg >= 0.3;
  }
  return {ok >= 18, fmt("score(Z,X|Y) <= 0.05 and score(Z,X) >= 0.3 in %d/20 (need >= 18); worst conditional %.4f, min marginal %.3f",
                        ok, worst_cond, min_marg)};
}

Verdict c10_chebyshev() {
  std::string d;
  bool pass = true;
  for (double s : {0.1, 0.3, 1.0}) {
    const double ratio = stats::chebyshev_pvalue(s, 1440, 50) / (4.9e-5 / (s * s));
    pass &= std::abs(ratio - 1) <= 0.02;
    d += fmt(" s=%.1f ratio %.4f;", s, ratio);
  }
  return {pass, "p-value / (4.9e-5/s^2) within 2%:" + d};
}

Verdict c11_summary_arithmetic() {
  // Reference per-scenario gains; 0 marks a failure.
  const std::vector<std::string> methods{"CorrMean", "CorrMax", "L2", "L2-P50", "L2-P500"};
  const std::vector<std::vector<double>> gains{
      {.167, .143, 1, 0, 0, 0, 0, 0, .05, 0, .333},
      {1, .071, 1, 0, 1, 0, .111, 1, .053, .5, .083},
      {.143, 0, .2, .333, .1, .333, 1, .25, .5, 1, 0},
      {1, .077, 1, .167, 1, .167, 0, 1, .062, .333, 0},
      {.333, 0, 1, .333, .077, .5, .2, 1, .25, .25, 0},
  };
  const std::vector<double> expected_hm{0.002, 0.004, 0.009, 0.009, 0.009};
  const std::vector<double> expected_avg{0.154, 0.438, 0.351, 0.437, 0.359};
  bool pass = true;
  std::string d;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const auto s = summarize(gains[m]);
    const bool hm_ok = std::abs(s.harmonic_mean - expected_hm[m]) <= 0.001 + 1e-12;
    const bool avg_ok = std::abs(s.arithmetic_mean - expected_avg[m]) <= 0.001 + 1e-12;
    pass &= hm_ok && avg_ok;
    d += fmt(" %s hm %.4f/%.3f%s avg %.4f/%.3f%s;", methods[m].c_str(), s.harmonic_mean, expected_hm[m], hm_ok ? "" : "(x)",
             s.arithmetic_mean, expected_avg[m], avg_ok ? "" : "(x)");
  }
  return {pass, "computed/expected:" + d};
}

Verdict c12_projection_stability() {
  const Eigen::Index t = 1440, width = 10000;
  std::mt19937_64 rng(12012);
  const Matrix factors = gaussian(rng, t, 5);
  const Matrix loadings = gaussian(rng, 5, width);
  Matrix x = factors * loadings + 0.5 * gaussian(rng, t, width);
  const Matrix y = factors * Eigen::VectorXd::Ones(5) / std::sqrt(5.0) + 0.7 * gaussian(rng, t, 1);

  FamilyTable table(TimeIndex(0, t - 1));
  auto fam = [](const std::string& key, Matrix m) {
    FeatureFamily f;
    f.key = key;
    for (Eigen::Index j = 0; j < m.cols(); ++j) f.feature_names.push_back(key + "{f=" + std::to_string(j) + "}");
    f.feature_metrics = f.feature_names;
    f.matrix = std::move(m);
    return f;
  };
  table.add(fam("wide", std::move(x)));
  table.add(fam("target", y));

  const bool deterministic = random_project(table.at("wide").matrix, 50, 99) == random_project(table.at("wide").matrix, 50, 99);
  auto spread_of = [&](int samples) {
    std::vector<double> scores;
    for (std::uint64_t seed : {1, 2, 3}) {
      ScoringConfig cfg;
      cfg.method = Method::L2Proj;
      cfg.proj_dim = 50;
      cfg.proj_samples = samples;
      cfg.seed = seed;
      scores.push_back(score_hypothesis({"wide", "target", {}}, table, cfg).score);
    }
    return std::pair{scores, *std::max_element(scores.begin(), scores.end()) - *std::min_element(scores.begin(), scores.end())};
  };
  const auto [scores, spread] = spread_of(ScoringConfig{}.proj_samples);
  const auto single = spread_of(1).second;
  return {deterministic && spread < 0.05,
          fmt("l2-p50 scores %.4f %.4f %.4f, spread %.4f (need < 0.05; single draw %.4f); random_project deterministic: %s",
              scores[0], scores[1], scores[2], spread, single, deterministic ? "yes" : "no")};
}

Verdict c13_parallel_determinism() {
  synth::ScenarioSpec spec;
  spec.kind = synth::Kind::Univariate;
  spec.n_families = 60;
  spec.features_mean = 30;
  spec.features_max = 120;
  spec.n_effects = 3;
  spec.seed = 13013;
  const auto sc = synth::generate(spec);
  bool pass = true;
  std::string d;
  for (const char* m : {"l2", "l2-p50", "corrmean"}) {
    std::string reports[3];
    int i = 0;
    for (unsigned workers : {1u, 8u, 1u}) {
      Session s = scenario_session(sc, m, 42);
      s.workers = workers;
      const auto& run = run_search(s, sc.table);
      reports[i++] = report_to_jsonl(report_to_json(s, run, sc.table.index()));
    }
    const bool same = reports[0] == reports[1] && reports[0] == reports[2];
    pass &= same;
    d += fmt(" %s %s (%zu bytes);", m, same ? "identical" : "DIFFERENT", reports[0].size());
  }
  return {pass, "serial vs 8 workers vs serial rerun:" + d};
}

int spawn(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict c14_throughput() {
  const auto dir = fs::temp_directory_path() / "causerank-acceptance-14";
  fs::create_directories(dir);
  const auto table_path = (dir / "wide.cft").string();
  {
    const Eigen::Index t = 1440;
    FamilyTable table(TimeIndex(0, t - 1));
    std::mt19937_64 rng(14014);
    Matrix target = gaussian(rng, t, 1);
    for (int i = 0; i < 1000; ++i) {
      FeatureFamily f;
      f.key = fmt("fam_%04d", i);
      for (int j = 0; j < 100; ++j) f.feature_names.push_back(f.key + fmt("{f=%02d}", j));
      f.feature_metrics = f.feature_names;
      f.matrix = gaussian(rng, t, 100);
      if (i == 417) f.matrix.col(3) += target;
      table.add(std::move(f));
    }
    FeatureFamily y;
    y.key = "target";
    y.feature_names = {"target{}"};
    y.feature_metrics = y.feature_names;
    y.matrix = target;
    table.add(std::move(y));
    save_family_table(table, table_path);
  }
  const auto out = (dir / "report.jsonl").string();
  const auto start = std::chrono::steady_clock::now();
  const int code = spawn(std::string(CAUSERANK_CLI) + " rank " + table_path + " --target target --method l2-p50 --out " + out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::string first;
  {
    std::ifstream in(out);
    std::getline(in, first);
  }
  fs::remove_all(dir);
  const bool found = first.find("fam_0417") != std::string::npos;
  return {code == 0 && secs < 600 && found,
          fmt("rank over 1000 x 100 x 1440 with l2-p50 took %.1f s on %u core(s) (need < 600 s), exit %d, planted family first: %s",
              secs, std::thread::hardware_concurrency(), code, found ? "yes" : "no")};
}

const std::vector<std::pair<std::string, std::function<Verdict()>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Verdict()>>> all{
      {"null r2 follows Beta((p-1)/2, (n-p)/2)", c1_null_beta},
      {"Wherry adjustment centres the null", c2_wherry},
      {"cross-validated ridge is ~0 under the null", c3_ridge_null},
      {"residual-orthogonality identity", c4_residual_identity},
      {"conditional independence scores ~0", c5_conditional_independence},
      {"planted univariate cause ranks first", c6_planted_rank},
      {"joint cause found by l2, missed by corrmax", c7_joint_power},
      {"seasonal pseudocause lifts the spike cause", c8_pseudocause_lift},
      {"chain: Z independent of X given Y", c9_chain},
      {"Chebyshev bound worked example", c10_chebyshev},
      {"summary arithmetic on reference gains", c11_summary_arithmetic},
      {"projection stability on a 10k-feature family", c12_projection_stability},
      {"serial and parallel reports are byte-identical", c13_parallel_determinism},
      {"desk-scale rank throughput", c14_throughput},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"causerank acceptance checks"};
  std::optional<int> only;
  app.add_option("--criterion", only, "run a single criterion (1-14)")->check(CLI::Range(1, 14));
  CLI11_PARSE(app, argc, argv);

  int failures = 0;
  for (std::size_t i = 0; i < criteria().size(); ++i) {
    if (only && static_cast<std::size_t>(*only) != i + 1) continue;
    const auto& [name, fn] = criteria()[i];
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %2zu: %s  %s  [%s] (%.1fs)\n", i + 1, v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !v.pass;
  }
  return failures == 0 ? 0 : 1;
}
