#pragma once

#include "causerank/core.hpp"
#include "causerank/stats.hpp"

#include <random>

namespace causerank {

inline std::vector<double> default_lambda_grid() {
  // Five geometric points over [1e-3, 1e6].
  std::vector<double> grid;
  for (int i = 0; i < 5; ++i) grid.push_back(std::pow(10.0, -3.0 + 9.0 * i / 4.0));
  return grid;
}

struct ScoringConfig {
  Method method = Method::L2;
  int k_folds = 5;
  std::vector<double> lambda_grid = default_lambda_grid();
  std::optional<int> proj_dim;
  int proj_samples = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (k_folds < 2) throw Error(Errc::InvalidArgument, "k_folds must be >= 2");
    if (lambda_grid.empty()) throw Error(Errc::InvalidArgument, "lambda grid must not be empty");
    for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
      if (!(lambda_grid[i] > 0)) throw Error(Errc::InvalidArgument, "lambda grid values must be positive");
      if (i > 0 && !(lambda_grid[i] > lambda_grid[i - 1]))
        throw Error(Errc::InvalidArgument, "lambda grid must be ascending");
    }
    if (proj_dim && *proj_dim < 1) throw Error(Errc::InvalidArgument, "proj_dim must be >= 1");
    if (method == Method::L2Proj && !proj_dim) throw Error(Errc::InvalidArgument, "projection method needs proj_dim");
    if (proj_samples < 1) throw Error(Errc::InvalidArgument, "proj_samples must be >= 1");
  }
};

struct RegressionResult {
  Matrix coefficients;  // F_x x F_y
  Matrix predictions;   // T x F_y
  Matrix residuals;     // T x F_y, Y - predictions
  double cv_r2 = 0;     // training r^2 for a plain fit, cross-validated r^2 for ridge_cv_fit
  double chosen_lambda = 0;
};

namespace detail {

inline bool degenerate_column(double sum_sq_centered, double sum_sq_raw, Eigen::Index n) {
  return sum_sq_centered <= 1e-20 * (sum_sq_raw + static_cast<double>(n) * 1e-300) || sum_sq_centered == 0.0;
}

// Mean r^2 over outputs with non-zero variance; nullopt when every output is constant.
inline std::optional<double> mean_r2(const Eigen::MatrixXd& actual, const Eigen::MatrixXd& predicted) {
  double total = 0;
  int used = 0;
  for (Eigen::Index j = 0; j < actual.cols(); ++j) {
    const auto col = actual.col(j);
    const double mean = col.mean();
    const double tss = (col.array() - mean).square().sum();
    if (degenerate_column(tss, col.squaredNorm(), col.size())) continue;
    const double rss = (col - predicted.col(j)).squaredNorm();
    total += 1 - rss / tss;
    ++used;
  }
  if (used == 0) return std::nullopt;
  return total / used;
}

inline double in_sample_r2(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& predictions) {
  return mean_r2(Y, predictions).value_or(0.0);
}

}  // namespace detail

/// Pearson correlation between every column of X and every column of Y.
/// Columns with zero variance correlate 0 with everything.
inline Matrix pearson_matrix(const Matrix& X, const Matrix& Y) {
  if (X.rows() != Y.rows()) throw Error(Errc::InvalidArgument, "pearson_matrix: row counts differ");
  if (X.rows() < 2) throw Error(Errc::InvalidArgument, "pearson_matrix needs T >= 2");
  Eigen::MatrixXd xc = X.rowwise() - X.colwise().mean();
  Eigen::MatrixXd yc = Y.rowwise() - Y.colwise().mean();
  auto norms = [](const Eigen::MatrixXd& centered, const Matrix& raw) {
    Eigen::VectorXd inv(centered.cols());
    for (Eigen::Index j = 0; j < centered.cols(); ++j) {
      const double ss = centered.col(j).squaredNorm();
      inv(j) = detail::degenerate_column(ss, raw.col(j).squaredNorm(), raw.rows()) ? 0.0 : 1.0 / std::sqrt(ss);
    }
    return inv;
  };
  const Eigen::VectorXd ix = norms(xc, X);
  const Eigen::VectorXd iy = norms(yc, Y);
  Matrix rho = xc.transpose() * yc;
  rho = ix.asDiagonal() * rho * iy.asDiagonal();
  return rho.cwiseMax(-1.0).cwiseMin(1.0);
}

inline double corr_mean(const Matrix& X, const Matrix& Y) { return pearson_matrix(X, Y).cwiseAbs().mean(); }
inline double corr_max(const Matrix& X, const Matrix& Y) { return pearson_matrix(X, Y).cwiseAbs().maxCoeff(); }

/// Minimises (1/T)||Y - X b||^2 + lambda ||b||^2 on X and Y exactly as given (no centering).
inline RegressionResult ridge_fit(const Matrix& X, const Matrix& Y, double lambda) {
  if (!(lambda > 0)) throw Error(Errc::InvalidArgument, "ridge_fit requires lambda > 0");
  if (X.rows() != Y.rows()) throw Error(Errc::InvalidArgument, "ridge_fit: row counts differ");
  const double t = static_cast<double>(X.rows());
  Eigen::MatrixXd gram = X.transpose() * X;
  gram.diagonal().array() += t * lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) throw Error(Errc::NumericalFailure, "regularised normal matrix is not positive definite");
  RegressionResult r;
  r.coefficients = llt.solve(X.transpose() * Y);
  r.predictions = X * r.coefficients;
  r.residuals = Y - r.predictions;
  r.cv_r2 = detail::in_sample_r2(Y, r.predictions);
  r.chosen_lambda = lambda;
  return r;
}

/// Contiguous validation block [begin, end); training is every other row.
struct Fold {
  Eigen::Index begin = 0;
  Eigen::Index end = 0;
};

/// k contiguous time blocks; k shrinks to floor(T/2) (minimum 2) for short series.
inline std::vector<Fold> make_folds(Eigen::Index t, int k) {
  if (t < 4) throw Error(Errc::InvalidArgument, "cross-validation needs at least 4 rows");
  const Eigen::Index kk = std::max<Eigen::Index>(2, std::min<Eigen::Index>(k, t / 2));
  std::vector<Fold> folds;
  for (Eigen::Index f = 0; f < kk; ++f) folds.push_back({f * t / kk, (f + 1) * t / kk});
  return folds;
}

/// Column statistics from training rows; zero-variance columns keep unit scale.
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Standardizer fit(const Eigen::MatrixXd& m, bool scale_columns) {
    Standardizer s;
    s.mean = m.colwise().mean();
    s.scale = Eigen::RowVectorXd::Ones(m.cols());
    if (scale_columns && m.rows() > 1) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double ss = (m.col(j).array() - s.mean(j)).square().sum();
        const double sd = std::sqrt(ss / static_cast<double>(m.rows()));
        if (!detail::degenerate_column(ss, m.col(j).squaredNorm(), m.rows())) s.scale(j) = sd;
      }
    }
    return s;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& m) const {
    return (m.rowwise() - mean).array().rowwise() / scale.array();
  }
};

/// Ridge solutions for many penalties from one eigendecomposition. Uses the primal
/// Gram matrix when p <= n and the dual kernel matrix otherwise.
class RidgePath {
 public:
  RidgePath(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) : n_(static_cast<double>(X.rows())) {
    primal_ = X.cols() <= X.rows();
    if (primal_) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X.transpose() * X);
      if (es.info() != Eigen::Success) throw Error(Errc::NumericalFailure, "eigendecomposition failed");
      eig_ = es.eigenvalues().cwiseMax(0.0);
      basis_ = es.eigenvectors();
      proj_ = basis_.transpose() * (X.transpose() * Y);
    } else {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X * X.transpose());
      if (es.info() != Eigen::Success) throw Error(Errc::NumericalFailure, "eigendecomposition failed");
      eig_ = es.eigenvalues().cwiseMax(0.0);
      basis_ = X.transpose() * es.eigenvectors();
      proj_ = es.eigenvectors().transpose() * Y;
    }
  }

  Eigen::MatrixXd coefficients(double lambda) const {
    const Eigen::VectorXd inv = (eig_.array() + n_ * lambda).inverse();
    return basis_ * (inv.asDiagonal() * proj_);
  }

  const Eigen::VectorXd& eigenvalues() const { return eig_; }

 private:
  double n_;
  bool primal_ = true;
  Eigen::VectorXd eig_;
  Eigen::MatrixXd basis_;
  Eigen::MatrixXd proj_;
};

struct CvResult {
  double score = 0;                 // clamped to [0, 1]
  double raw = 0;                   // best mean validation r^2 before clamping
  double best_lambda = 0;
  std::vector<double> lambda_r2;    // mean validation r^2 per grid point
  bool degenerate = false;          // every target column constant
};

/// k-fold blocked cross-validation of ridge over the lambda grid. Predictors are
/// z-scored and targets centered with training-fold statistics only.
inline CvResult cross_validate(const Matrix& X, const Matrix& Y, const ScoringConfig& config) {
  if (X.rows() != Y.rows()) throw Error(Errc::InvalidArgument, "cross_validate: row counts differ");
  CvResult out;
  out.best_lambda = config.lambda_grid.front();
  {
    const Eigen::MatrixXd yd = Y;
    bool any = false;
    for (Eigen::Index j = 0; j < yd.cols() && !any; ++j) {
      const double ss = (yd.col(j).array() - yd.col(j).mean()).square().sum();
      any = !detail::degenerate_column(ss, yd.col(j).squaredNorm(), yd.rows());
    }
    if (!any) {
      out.degenerate = true;
      return out;
    }
  }

  const auto folds = make_folds(X.rows(), config.k_folds);
  const std::size_t grid = config.lambda_grid.size();
  std::vector<double> sum(grid, 0.0);
  std::vector<int> count(grid, 0);

  for (const auto& fold : folds) {
    const Eigen::Index nval = fold.end - fold.begin;
    const Eigen::Index ntr = X.rows() - nval;
    Eigen::MatrixXd xtr(ntr, X.cols()), ytr(ntr, Y.cols());
    xtr.topRows(fold.begin) = X.topRows(fold.begin);
    xtr.bottomRows(X.rows() - fold.end) = X.bottomRows(X.rows() - fold.end);
    ytr.topRows(fold.begin) = Y.topRows(fold.begin);
    ytr.bottomRows(Y.rows() - fold.end) = Y.bottomRows(Y.rows() - fold.end);
    const Eigen::MatrixXd xval = X.middleRows(fold.begin, nval);
    const Eigen::MatrixXd yval = Y.middleRows(fold.begin, nval);

    const auto sx = Standardizer::fit(xtr, true);
    const auto sy = Standardizer::fit(ytr, false);
    const Eigen::MatrixXd xs = sx.apply(xtr);
    const Eigen::MatrixXd xv = sx.apply(xval);
    const RidgePath path(xs, sy.apply(ytr));

    for (std::size_t l = 0; l < grid; ++l) {
      const Eigen::MatrixXd pred = (xv * path.coefficients(config.lambda_grid[l])).rowwise() + sy.mean;
      if (auto r2 = detail::mean_r2(yval, pred)) {
        sum[l] += *r2;
        count[l] += 1;
      }
    }
  }

  bool found = false;
  double best = 0;
  for (std::size_t l = 0; l < grid; ++l) {
    const double v = count[l] > 0 ? sum[l] / count[l] : -std::numeric_limits<double>::infinity();
    out.lambda_r2.push_back(v);
    // strict '>' keeps the smaller lambda on ties
    if (!found || v > best) {
      best = v;
      out.best_lambda = config.lambda_grid[l];
      found = true;
    }
  }
  out.raw = best;
  out.score = std::isfinite(best) ? std::clamp(best, 0.0, 1.0) : 0.0;
  return out;
}

/// Cross-validated ridge r^2 of Y on X, clamped to [0, 1].
inline double cv_score(const Matrix& X, const Matrix& Y, const ScoringConfig& config) {
  auto cv = cross_validate(X, Y, config);
  if (cv.degenerate) throw Error(Errc::DegenerateTarget, "every target output has zero variance");
  return cv.score;
}

/// Ridge fit on standardised X and centered Y for one penalty; outputs in the original scale.
inline RegressionResult fit_standardized(const Matrix& X, const Matrix& Y, double lambda) {
  const Eigen::MatrixXd xd = X;
  const Eigen::MatrixXd yd = Y;
  const auto sx = Standardizer::fit(xd, true);
  const auto sy = Standardizer::fit(yd, false);
  const Eigen::MatrixXd xs = sx.apply(xd);
  const RidgePath path(xs, sy.apply(yd));
  const Eigen::MatrixXd beta = path.coefficients(lambda);
  RegressionResult r;
  // Coefficients expressed against the raw predictor scale.
  r.coefficients = sx.scale.transpose().cwiseInverse().asDiagonal() * beta;
  r.predictions = (xs * beta).rowwise() + sy.mean;
  r.residuals = Y - r.predictions;
  r.cv_r2 = detail::in_sample_r2(yd, r.predictions);
  r.chosen_lambda = lambda;
  return r;
}

/// Chooses lambda by blocked cross-validation, then refits on all rows.
inline RegressionResult ridge_cv_fit(const Matrix& X, const Matrix& Y, const ScoringConfig& config) {
  const auto cv = cross_validate(X, Y, config);
  if (cv.degenerate) {
    // Constant targets: the best predictor is the mean.
    RegressionResult r;
    r.coefficients = Matrix::Zero(X.cols(), Y.cols());
    r.predictions = Matrix(Y.rows(), Y.cols());
    r.predictions.rowwise() = Y.colwise().mean();
    r.residuals = Y - r.predictions;
    r.chosen_lambda = config.lambda_grid.back();
    return r;
  }
  auto r = fit_standardized(X, Y, cv.best_lambda);
  r.cv_r2 = cv.score;
  return r;
}

/// Multiplies M (T x n) by an n x d matrix of iid standard normals when n > d.
inline Matrix random_project(const Matrix& M, int d, std::uint64_t seed) {
  if (d < 1) throw Error(Errc::InvalidArgument, "projection dimension must be >= 1");
  if (M.cols() <= d) return M;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd p(M.cols(), d);
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) = normal(rng);
  return M * p;
}

struct ConditionalFit {
  double score = 0;
  double chosen_lambda = 0;
  bool fully_explained = false;  // Z leaves (numerically) nothing of Y
  PlotData plot;
};

namespace detail {

inline std::vector<double> first_column(const Matrix& m) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index t = 0; t < m.rows(); ++t) out[static_cast<std::size_t>(t)] = m(t, 0);
  return out;
}

inline std::pair<Matrix, Matrix> residualize(const Matrix& X, const Matrix& Y, const Matrix& Z,
                                             const ScoringConfig& config) {
  if (Z.cols() == 0) return {X, Y};
  return {ridge_cv_fit(Z, X, config).residuals, ridge_cv_fit(Z, Y, config).residuals};
}

// True when Y lies (numerically) in the span of Z plus an intercept. Tested with an
// unpenalised least-squares fit, since ridge shrinkage always leaves some residual.
inline bool fully_explained(const Matrix& Y, const Matrix& Z) {
  const Eigen::MatrixXd yc = Y.rowwise() - Y.colwise().mean();
  const Eigen::MatrixXd zc = Z.rowwise() - Z.colwise().mean();
  if (yc.squaredNorm() == 0) return true;
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(zc);
  const Eigen::MatrixXd rc = yc - zc * qr.solve(yc);
  return rc.squaredNorm() <= 1e-10 * yc.squaredNorm();
}

}  // namespace detail

/// r^2 of Y on X given Z: residualise X and Y on Z, then cross-validate the residuals.
inline ConditionalFit conditional_fit(const Matrix& X, const Matrix& Y, const Matrix& Z, const ScoringConfig& config,
                                      bool with_plot = true) {
  ConditionalFit out;
  if (Z.cols() > 0 && detail::fully_explained(Y, Z)) {
    const Matrix ry = ridge_cv_fit(Z, Y, config).residuals;
    out.fully_explained = true;
    if (with_plot) {
      out.plot.observed = detail::first_column(ry);
      out.plot.predicted.assign(out.plot.observed.size(), 0.0);
    }
    return out;
  }
  auto [rx, ry] = detail::residualize(X, Y, Z, config);
  const auto cv = cross_validate(rx, ry, config);
  if (cv.degenerate) throw Error(Errc::DegenerateTarget, "every target output has zero variance");
  out.score = cv.score;
  out.chosen_lambda = cv.best_lambda;
  if (with_plot) {
    const auto fit = fit_standardized(rx, ry, cv.best_lambda);
    out.plot.observed = detail::first_column(ry);
    out.plot.predicted = detail::first_column(fit.predictions);
  }
  return out;
}

inline double conditional_score(const Matrix& X, const Matrix& Y, const Matrix& Z, const ScoringConfig& config) {
  return conditional_fit(X, Y, Z, config, false).score;
}

namespace detail {

// Observed Y (first output) against its best single-feature linear fit.
inline PlotData best_feature_plot(const Matrix& X, const Matrix& Y, const Matrix& rho) {
  Eigen::Index best = 0;
  rho.col(0).cwiseAbs().maxCoeff(&best);
  const auto x = X.col(best);
  const auto y = Y.col(0);
  const double xm = x.mean(), ym = y.mean();
  const double sxx = (x.array() - xm).square().sum();
  const double sxy = ((x.array() - xm) * (y.array() - ym)).sum();
  const double slope = sxx > 0 ? sxy / sxx : 0.0;
  PlotData plot;
  for (Eigen::Index t = 0; t < Y.rows(); ++t) {
    plot.observed.push_back(y(t));
    plot.predicted.push_back(ym + slope * (x(t) - xm));
  }
  return plot;
}

}  // namespace detail

inline std::size_t effective_predictors(std::size_t fx, const ScoringConfig& config) {
  if (config.method == Method::L2Proj && config.proj_dim) return std::min<std::size_t>(fx, static_cast<std::size_t>(*config.proj_dim));
  return fx;
}

/// Scores one validated hypothesis with the configured method and attaches a Chebyshev p-value.
inline ScoreReport score_hypothesis(const Hypothesis& h, const FamilyTable& table, const ScoringConfig& config) {
  config.validate();
  const Matrix& x = table.at(h.x).matrix;
  const Matrix& y = table.at(h.y).matrix;
  const Matrix z = hstack(table, h.z);

  ScoreReport report;
  report.hypothesis = h;
  report.method = config.method;
  if (config.method == Method::L2Proj) report.proj_dim = config.proj_dim;

  switch (config.method) {
    case Method::CorrMean:
    case Method::CorrMax: {
      auto [rx, ry] = detail::residualize(x, y, z, config);
      const Matrix rho = pearson_matrix(rx, ry);
      report.score = config.method == Method::CorrMean ? rho.cwiseAbs().mean() : rho.cwiseAbs().maxCoeff();
      report.plot = detail::best_feature_plot(rx, ry, rho);
      break;
    }
    case Method::L2: {
      auto fit = conditional_fit(x, y, z, config);
      report.score = fit.score;
      report.plot = std::move(fit.plot);
      if (fit.fully_explained) report.diagnostics.push_back("target fully explained by conditioning set");
      break;
    }
    case Method::L2Proj: {
      const int d = *config.proj_dim;
      const bool needs_projection = x.cols() > d || y.cols() > d || z.cols() > d;
      const int samples = needs_projection ? config.proj_samples : 1;
      double total = 0;
      for (int s = 0; s < samples; ++s) {
        const auto base = mix_seed(config.seed, static_cast<std::uint64_t>(s));
        const Matrix px = random_project(x, d, mix_seed(base, 1));
        const Matrix py = random_project(y, d, mix_seed(base, 2));
        const Matrix pz = z.cols() > 0 ? random_project(z, d, mix_seed(base, 3)) : z;
        auto fit = conditional_fit(px, py, pz, config, s + 1 == samples);
        total += fit.score;
        if (s + 1 == samples) report.plot = std::move(fit.plot);
      }
      report.score = total / samples;
      break;
    }
  }
  report.score = std::clamp(report.score, 0.0, 1.0);

  const double n = static_cast<double>(table.index().size());
  double p = 0;
  double s = report.score;
  if (config.method == Method::CorrMean || config.method == Method::CorrMax) {
    p = 2;
    s = report.score * report.score;
  } else {
    p = std::max<double>(2.0, static_cast<double>(effective_predictors(table.at(h.x).cols(), config)));
  }
  if (p >= n) {
    report.p_value = 1.0;
    report.diagnostics.push_back("p>=n: p-value bound not valid");
  } else if (s > 0) {
    report.p_value = stats::chebyshev_pvalue(s, n, p);
  } else {
    report.p_value = 1.0;
  }
  return report;
}

}  // namespace causerank
