#include "trajcluster/features.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <ostream>

#include "trajcluster/distance.hpp"

namespace trajcluster::features {

void FeatureConfig::validate() const {
  if (n_features() == 0)
    throw ValidationError("feature config: no features enabled");
  if (linear && !intercept)
    throw ValidationError("feature config: linear term requires intercept");
  if (quadratic && !linear)
    throw ValidationError("feature config: quadratic term requires linear");
}

int FeatureConfig::n_polynomial_terms() const {
  return int(intercept) + int(linear) + int(quadratic);
}

int FeatureConfig::n_features() const {
  return n_polynomial_terms() + int(residual_sd) + int(log_attempts) +
         int(lag1_autocorr);
}

std::vector<std::string> FeatureConfig::names() const {
  std::vector<std::string> out;
  if (intercept) out.push_back("b_intercept");
  if (linear) out.push_back("b_linear");
  if (quadratic) out.push_back("b_quad");
  if (residual_sd) out.push_back("resid_sd");
  if (log_attempts) out.push_back("log_attempts");
  if (lag1_autocorr) out.push_back("ac1");
  return out;
}

FeatureConfig feature_config_from_list(const std::string& comma_list) {
  FeatureConfig cfg;
  cfg.intercept = cfg.linear = cfg.quadratic = false;
  cfg.log_attempts = false;
  std::string cur;
  auto apply = [&](const std::string& name) {
    if (name.empty()) return;
    if (name == "b0") cfg.intercept = true;
    else if (name == "b1") cfg.linear = true;
    else if (name == "b2") cfg.quadratic = true;
    else if (name == "sd") cfg.residual_sd = true;
    else if (name == "logN") cfg.log_attempts = true;
    else if (name == "ac1") cfg.lag1_autocorr = true;
    else throw ValidationError("unknown feature: " + name +
                               " (expected b0,b1,b2,sd,logN,ac1)");
  };
  for (char c : comma_list) {
    if (c == ',') {
      apply(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  apply(cur);
  cfg.validate();
  return cfg;
}

namespace {

// Orthonormal polynomial columns over the subject's times under
// <f,g> = (1/n) sum f(t_j) g(t_j), by modified Gram-Schmidt on {1, t, t^2}.
Eigen::MatrixXd orthonormal_basis(const std::vector<double>& times, int q,
                                  const std::string& subject_id) {
  const int n = int(times.size());
  Eigen::MatrixXd raw(n, q);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < q; ++k) raw(j, k) = std::pow(times[std::size_t(j)], k);

  Eigen::MatrixXd ortho = raw;
  for (int k = 0; k < q; ++k) {
    for (int m = 0; m < k; ++m) {
      const double proj = ortho.col(k).dot(ortho.col(m)) / double(n);
      ortho.col(k) -= proj * ortho.col(m);
    }
    const double norm = std::sqrt(ortho.col(k).squaredNorm() / double(n));
    if (norm < 1e-12)
      throw ValidationError("subject " + subject_id +
                            ": zero time-variance, polynomial term " +
                            std::to_string(k) + " not identifiable");
    ortho.col(k) /= norm;
  }
  return ortho;
}

}  // namespace

Eigen::VectorXd its_features(const Trajectory& trajectory,
                             const FeatureConfig& config, bool* degenerate) {
  config.validate();
  trajectory.validate();
  if (degenerate) *degenerate = false;
  const int n = int(trajectory.size());
  const int q = config.n_polynomial_terms();
  if (config.residual_sd && n < q + 1)
    throw ValidationError("subject " + trajectory.subject_id + ": " +
                          std::to_string(n) +
                          " points, need >= " + std::to_string(q + 1) +
                          " for residual sd");
  if (n < q)
    throw ValidationError("subject " + trajectory.subject_id +
                          ": too few points for " + std::to_string(q) +
                          " polynomial terms");

  const Eigen::Map<const Eigen::VectorXd> y(trajectory.values.data(), n);
  Eigen::VectorXd coef;
  Eigen::VectorXd resid = y;
  if (q > 0) {
    const Eigen::MatrixXd basis =
        orthonormal_basis(trajectory.times, q, trajectory.subject_id);
    coef = basis.transpose() * y / double(n);
    resid = y - basis * coef;
  }

  Eigen::VectorXd out(config.n_features());
  int k = 0;
  for (int m = 0; m < q; ++m) out(k++) = coef(m);
  if (config.residual_sd)
    out(k++) = std::sqrt(resid.squaredNorm() / double(n - q));
  if (config.log_attempts) {
    int attempts = 0;
    for (double v : trajectory.values)
      if (v > config.attempt_threshold) ++attempts;
    out(k++) = std::log1p(double(attempts));
  }
  if (config.lag1_autocorr) {
    const double denom = resid.squaredNorm();
    if (denom < 1e-24) {
      out(k++) = 0.0;
      if (degenerate) *degenerate = true;
    } else {
      double num = 0.0;
      for (int j = 1; j < n; ++j) num += resid(j) * resid(j - 1);
      out(k++) = num / denom;
    }
  }
  return out;
}

FeatureMatrix extract_features(const Dataset& ds, const FeatureConfig& config) {
  ds.validate();
  config.validate();
  FeatureMatrix fm;
  fm.names = config.names();
  fm.values.resize(Eigen::Index(ds.n_subjects()),
                   Eigen::Index(config.n_features()));
  for (std::size_t i = 0; i < ds.n_subjects(); ++i) {
    fm.subject_ids.push_back(ds.trajectories[i].subject_id);
    fm.values.row(Eigen::Index(i)) =
        its_features(ds.trajectories[i], config).transpose();
  }
  return fm;
}

FeatureMatrix standardize(const FeatureMatrix& fm) {
  if (fm.values.rows() < 2)
    throw ValidationError("standardize: need >= 2 rows");
  FeatureMatrix out = fm;
  out.standardized = true;
  out.constant_columns.clear();
  const double n = double(fm.values.rows());
  for (Eigen::Index c = 0; c < fm.values.cols(); ++c) {
    const double mean = fm.values.col(c).mean();
    const double sd = std::sqrt(
        (fm.values.col(c).array() - mean).square().sum() / (n - 1.0));
    if (sd < 1e-12) {
      out.values.col(c).setZero();
      out.constant_columns.push_back(int(c));
    } else {
      out.values.col(c) = (fm.values.col(c).array() - mean) / sd;
    }
  }
  return out;
}

FeatureClusterResult feature_cluster(const FeatureMatrix& fm, int G,
                                     int n_starts, std::uint64_t seed) {
  const auto d = dist::pairwise_row_distances(fm.values);
  auto km = dist::k_medoids(d, G, n_starts, seed);
  return {std::move(km.partition), std::move(km.medoids), km.total_cost};
}

void save_features(const FeatureMatrix& fm, std::ostream& out) {
  out << "subject_id";
  for (const auto& name : fm.names) out << ',' << name;
  out << '\n';
  for (Eigen::Index i = 0; i < fm.values.rows(); ++i) {
    out << fm.subject_ids[std::size_t(i)];
    for (Eigen::Index c = 0; c < fm.values.cols(); ++c)
      out << ',' << format_double(fm.values(i, c));
    out << '\n';
  }
}

}  // namespace trajcluster::features
