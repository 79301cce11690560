#pragma once

#include "causerank/core.hpp"
#include "causerank/ranking.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <numbers>
#include <random>

namespace causerank::synth {

enum class Kind { Null, Univariate, Joint, SeasonalSpike, Chain };

inline std::string_view kind_name(Kind k) {
  switch (k) {
    case Kind::Null: return "null";
    case Kind::Univariate: return "univariate";
    case Kind::Joint: return "joint";
    case Kind::SeasonalSpike: return "seasonal-spike";
    case Kind::Chain: return "chain";
  }
  return "null";
}

inline Kind parse_kind(std::string_view s) {
  for (auto k : {Kind::Null, Kind::Univariate, Kind::Joint, Kind::SeasonalSpike, Kind::Chain})
    if (kind_name(k) == s) return k;
  throw Error(Errc::InvalidArgument, "unknown scenario '" + std::string(s) + "' (null, univariate, joint, seasonal-spike, chain)");
}

struct ScenarioSpec {
  Kind kind = Kind::Univariate;
  std::size_t n_families = 100;  // irrelevant noise families
  double features_mean = 10;
  std::size_t features_max = 40;
  std::size_t t = 1440;
  double noise = 0.5;
  std::uint64_t seed = 0;
  std::size_t n_effects = 0;

  // joint-of-m plant: m features with per-feature correlation and joint r^2 to the target
  int joint_m = 10;
  double joint_corr = 0.15;
  double joint_r2 = 0.6;

  // seasonal + spike plant
  int period = 60;
  double seasonal_amplitude = 3.0;
  double spike_amplitude = 4.0;
  double spike_rate = 0.02;

  void validate() const {
    if (t < 100) throw Error(Errc::InvalidArgument, "scenario T must be >= 100");
    if (features_max < 1 || features_mean < 1) throw Error(Errc::InvalidArgument, "families need >= 1 feature");
    if (kind == Kind::Joint) {
      if (joint_m < 2) throw Error(Errc::InvalidArgument, "joint plant needs m >= 2");
      const double s = joint_m * joint_corr * joint_corr / joint_r2;
      if (!(s > 0) || !(s <= 1.0 + 1e-12)) throw Error(Errc::InvalidArgument, "joint plant correlations are infeasible");
    }
    if (kind == Kind::SeasonalSpike && (period < 2 || static_cast<std::size_t>(period) > t / 2))
      throw Error(Errc::InvalidArgument, "seasonal period must lie in [2, T/2]");
  }
};

struct Scenario {
  FamilyTable table;
  std::string target;
  std::vector<std::string> condition;
  ScenarioLabels labels;
  // Named roles ("planted", "confounder", "chain-cause", ...) to family keys.
  std::map<std::string, std::string> roles;
  // Closed-form population quantities of the generating model.
  std::map<std::string, double> population;
};

namespace detail {

inline std::string family_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fam_%03zu", i);
  return buf;
}

inline FeatureFamily make_family(const std::string& key, const Matrix& m) {
  FeatureFamily f;
  f.key = key;
  f.provenance = "synth";
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%02ld", static_cast<long>(j));
    const auto name = series_id(key, {{"f", buf}});
    f.feature_names.push_back(name);
    f.feature_metrics.push_back(name);
  }
  f.matrix = m;
  return f;
}

class Generator {
 public:
  explicit Generator(std::uint64_t seed) : rng_(seed) {}

  Matrix normal(std::size_t rows, std::size_t cols) {
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = gauss_(rng_);
    return m;
  }

  Vector normal_vec(std::size_t n) { return normal(n, 1).col(0); }

  std::size_t family_size(double mean, std::size_t max) {
    const double s = 0.8;
    std::lognormal_distribution<double> ln(std::log(mean) - 0.5 * s * s, s);
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(ln(rng_))), 1, max);
  }

  double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(rng_); }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> gauss_{0.0, 1.0};
};

// Lays out noise families plus the planted families at random slots so that key order carries no signal.
inline std::vector<std::string> assign_keys(Generator& g, std::size_t n_noise, std::size_t n_planted) {
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < n_noise + n_planted; ++i) keys.push_back(family_name(i));
  for (std::size_t i = keys.size(); i > 1; --i) std::swap(keys[i - 1], keys[g.index(i)]);
  return keys;
}

}  // namespace detail

/// Every family, target included, is iid standard normal.
inline Scenario gen_null(const ScenarioSpec& spec) {
  spec.validate();
  detail::Generator g(spec.seed);
  Scenario sc;
  sc.table = FamilyTable(TimeIndex(0, static_cast<std::int64_t>(spec.t) - 1));
  sc.target = "target";
  sc.table.add(detail::make_family(sc.target, g.normal(spec.t, 1)));
  for (std::size_t i = 0; i < spec.n_families; ++i) {
    const auto key = detail::family_name(i);
    sc.table.add(detail::make_family(key, g.normal(spec.t, g.family_size(spec.features_mean, spec.features_max))));
    sc.labels[key] = Label::Irrelevant;
  }
  return sc;
}

namespace detail {

inline void add_noise_families(Scenario& sc, Generator& g, const ScenarioSpec& spec, const std::vector<std::string>& keys,
                               std::size_t from) {
  for (std::size_t i = from; i < keys.size(); ++i) {
    sc.table.add(make_family(keys[i], g.normal(spec.t, g.family_size(spec.features_mean, spec.features_max))));
    sc.labels[keys[i]] = Label::Irrelevant;
  }
}

// Univariate effect families e = c * y / sd(y) + sqrt(1 - c^2) * noise with c in [0.3, 0.45].
inline void add_effects(Scenario& sc, Generator& g, const ScenarioSpec& spec, const Vector& y, double y_sd,
                        const std::vector<std::string>& keys, std::size_t from) {
  for (std::size_t e = 0; e < spec.n_effects; ++e) {
    const double c = g.uniform(0.3, 0.45);
    const Vector eps = g.normal_vec(spec.t);
    Matrix m(static_cast<Eigen::Index>(spec.t), 1);
    m.col(0) = c * y / y_sd + std::sqrt(1 - c * c) * eps;
    const auto& key = keys[from + e];
    sc.table.add(make_family(key, m));
    sc.labels[key] = Label::Effect;
    sc.roles["effect-" + std::to_string(e)] = key;
    sc.population["effect_corr_" + std::to_string(e)] = c;
  }
}

}  // namespace detail

/// Target driven by one planted family (one feature for the univariate plant, or a
/// joint-of-m block whose features are individually weak), plus optional effect families.
inline Scenario gen_planted_cause(const ScenarioSpec& spec) {
  spec.validate();
  detail::Generator g(spec.seed);
  Scenario sc;
  sc.table = FamilyTable(TimeIndex(0, static_cast<std::int64_t>(spec.t) - 1));
  sc.target = "target";
  const auto keys = detail::assign_keys(g, spec.n_families, 1 + spec.n_effects);
  const auto& planted = keys[0];
  sc.roles["planted"] = planted;

  Vector y;
  double y_sd = 1;
  if (spec.kind == Kind::Joint) {
    // Equicorrelated block: with unit variances and correlation rho, corr(x_i, y) = c and
    // r^2(y | x) = m c^2 / (1 + (m - 1) rho).
    const int m = spec.joint_m;
    const double s = m * spec.joint_corr * spec.joint_corr / spec.joint_r2;  // 1 + (m-1) rho
    const double rho = (s - 1) / (m - 1);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Constant(m, m, rho);
    cov.diagonal().setOnes();
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw Error(Errc::InvalidArgument, "joint plant covariance is not positive definite");
    const Matrix x = g.normal(spec.t, static_cast<std::size_t>(m)) * Eigen::MatrixXd(llt.matrixU());
    const double sigma2 = m * s * (1 - spec.joint_r2) / spec.joint_r2;
    y = x.rowwise().sum() + std::sqrt(sigma2) * g.normal_vec(spec.t);
    y_sd = std::sqrt(m * s + sigma2);
    sc.table.add(detail::make_family(planted, x));
    sc.population["feature_corr"] = s / y_sd;
    sc.population["joint_r2"] = m * s / (m * s + sigma2);
    sc.population["feature_rho"] = rho;
  } else {
    const auto f = g.family_size(spec.features_mean, spec.features_max);
    const Matrix x = g.normal(spec.t, f);
    const auto j = static_cast<Eigen::Index>(g.index(f));
    y = x.col(j) + spec.noise * g.normal_vec(spec.t);
    y_sd = std::sqrt(1 + spec.noise * spec.noise);
    sc.table.add(detail::make_family(planted, x));
    sc.population["feature_corr"] = 1 / y_sd;
    sc.population["joint_r2"] = 1 / (y_sd * y_sd);
  }
  sc.labels[planted] = Label::Cause;
  Matrix ym(static_cast<Eigen::Index>(spec.t), 1);
  ym.col(0) = y;
  sc.table.add(detail::make_family(sc.target, ym));
  detail::add_effects(sc, g, spec, y, y_sd, keys, 1);
  detail::add_noise_families(sc, g, spec, keys, 1 + spec.n_effects);
  return sc;
}

/// Target = seasonal sinusoid + spike train. A confounder family tracks the season;
/// the spike family drives the spikes (the cause of the residual variation).
inline Scenario gen_seasonal_spike(const ScenarioSpec& spec) {
  spec.validate();
  detail::Generator g(spec.seed);
  Scenario sc;
  sc.table = FamilyTable(TimeIndex(0, static_cast<std::int64_t>(spec.t) - 1));
  sc.target = "target";
  const auto keys = detail::assign_keys(g, spec.n_families, 2);
  const auto& spike_key = keys[0];
  const auto& season_key = keys[1];
  sc.roles["spike-cause"] = spike_key;
  sc.roles["seasonal-confounder"] = season_key;

  const auto t = static_cast<Eigen::Index>(spec.t);
  Vector season(t), spikes(t);
  for (Eigen::Index i = 0; i < t; ++i) {
    season(i) = std::sin(2 * std::numbers::pi * static_cast<double>(i) / spec.period);
    spikes(i) = g.bernoulli(spec.spike_rate) ? 1.0 : 0.0;
  }
  Matrix y(t, 1), s(t, 1), c(t, 1);
  y.col(0) = spec.seasonal_amplitude * season + spec.spike_amplitude * spikes + spec.noise * g.normal_vec(spec.t);
  s.col(0) = spikes + 0.05 * g.normal_vec(spec.t);
  c.col(0) = season + 0.3 * g.normal_vec(spec.t);
  sc.table.add(detail::make_family(sc.target, y));
  sc.table.add(detail::make_family(spike_key, s));
  sc.table.add(detail::make_family(season_key, c));
  sc.labels[spike_key] = Label::Cause;
  sc.labels[season_key] = Label::Irrelevant;
  sc.population["seasonal_variance"] = spec.seasonal_amplitude * spec.seasonal_amplitude / 2;
  sc.population["spike_variance"] = spec.spike_amplitude * spec.spike_amplitude * spec.spike_rate * (1 - spec.spike_rate);
  detail::add_noise_families(sc, g, spec, keys, 2);
  return sc;
}

/// Chain Z -> Y -> X with independent noise at each stage: Z is labelled cause, X effect.
inline Scenario gen_chain(const ScenarioSpec& spec) {
  spec.validate();
  detail::Generator g(spec.seed);
  Scenario sc;
  sc.table = FamilyTable(TimeIndex(0, static_cast<std::int64_t>(spec.t) - 1));
  sc.target = "target";
  const auto keys = detail::assign_keys(g, spec.n_families, 2);
  const auto& zkey = keys[0];
  const auto& xkey = keys[1];
  sc.roles["chain-cause"] = zkey;
  sc.roles["chain-effect"] = xkey;

  const auto t = static_cast<Eigen::Index>(spec.t);
  Matrix z(t, 1), y(t, 1), x(t, 1);
  z.col(0) = g.normal_vec(spec.t);
  y.col(0) = z.col(0) + spec.noise * g.normal_vec(spec.t);
  x.col(0) = y.col(0) + spec.noise * g.normal_vec(spec.t);
  sc.table.add(detail::make_family(sc.target, y));
  sc.table.add(detail::make_family(zkey, z));
  sc.table.add(detail::make_family(xkey, x));
  sc.labels[zkey] = Label::Cause;
  sc.labels[xkey] = Label::Effect;
  const double n2 = spec.noise * spec.noise;
  // cov(Z, X) = 1, var(X) = 1 + 2 n^2
  sc.population["zx_r2"] = 1 / (1 + 2 * n2);
  sc.population["zy_r2"] = 1 / (1 + n2);
  sc.population["zx_given_y_partial_r2"] = 0;
  detail::add_noise_families(sc, g, spec, keys, 2);
  return sc;
}

inline Scenario generate(const ScenarioSpec& spec) {
  switch (spec.kind) {
    case Kind::Null: return gen_null(spec);
    case Kind::Univariate:
    case Kind::Joint: return gen_planted_cause(spec);
    case Kind::SeasonalSpike: return gen_seasonal_spike(spec);
    case Kind::Chain: return gen_chain(spec);
  }
  throw Error(Errc::InvalidArgument, "unknown scenario kind");
}

inline nlohmann::json spec_to_json(const ScenarioSpec& s) {
  return {{"kind", kind_name(s.kind)}, {"n_families", s.n_families}, {"features_mean", s.features_mean},
          {"features_max", s.features_max}, {"t", s.t}, {"noise", s.noise}, {"seed", s.seed},
          {"n_effects", s.n_effects}, {"joint_m", s.joint_m}, {"joint_corr", s.joint_corr},
          {"joint_r2", s.joint_r2}, {"period", s.period}, {"seasonal_amplitude", s.seasonal_amplitude},
          {"spike_amplitude", s.spike_amplitude}, {"spike_rate", s.spike_rate}};
}

inline ScenarioSpec spec_from_json(const nlohmann::json& j) {
  ScenarioSpec s;
  s.kind = parse_kind(j.value("kind", std::string("univariate")));
  s.n_families = j.value("n_families", s.n_families);
  s.features_mean = j.value("features_mean", s.features_mean);
  s.features_max = j.value("features_max", s.features_max);
  s.t = j.value("t", s.t);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  s.n_effects = j.value("n_effects", s.n_effects);
  s.joint_m = j.value("joint_m", s.joint_m);
  s.joint_corr = j.value("joint_corr", s.joint_corr);
  s.joint_r2 = j.value("joint_r2", s.joint_r2);
  s.period = j.value("period", s.period);
  s.seasonal_amplitude = j.value("seasonal_amplitude", s.seasonal_amplitude);
  s.spike_amplitude = j.value("spike_amplitude", s.spike_amplitude);
  s.spike_rate = j.value("spike_rate", s.spike_rate);
  return s;
}

/// Flattens a scenario table into records: metric = family key, tag f = feature number.
/// `FAMILY BY name SELECT avg(value)` over these records rebuilds the same families.
inline std::vector<MetricRecord> to_records(const FamilyTable& table) {
  std::vector<MetricRecord> out;
  const auto& index = table.index();
  for (const auto& f : table.families()) {
    for (std::size_t j = 0; j < f.cols(); ++j) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%02zu", j);
      for (std::size_t t = 0; t < f.rows(); ++t)
        out.push_back(MetricRecord{index.at(t), f.key, {{"f", buf}},
                                   f.matrix(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j))});
    }
  }
  return out;
}

inline nlohmann::json labels_to_json(const ScenarioLabels& labels) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, l] : labels) j[k] = label_name(l);
  return j;
}

inline ScenarioLabels labels_from_json(const nlohmann::json& j) {
  ScenarioLabels out;
  for (const auto& [k, v] : j.items()) out[k] = parse_label(v.get<std::string>());
  return out;
}

}  // namespace causerank::synth
