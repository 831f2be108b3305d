#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "trajcluster/core.hpp"

namespace trajcluster::features {

// Which per-trajectory features to extract. The polynomial terms are
// coefficients on an orthonormal basis built from {1, t, t^2} under the
// subject's own empirical inner product <f,g> = mean_j f(t_j) g(t_j), so the
// intercept feature equals the trajectory mean.
struct FeatureConfig {
  bool intercept = true;
  bool linear = true;
  bool quadratic = true;
  bool residual_sd = false;
  bool log_attempts = true;
  bool lag1_autocorr = false;
  double attempt_threshold = 0.0;  // attempted iff value > threshold

  void validate() const;
  std::vector<std::string> names() const;
  int n_polynomial_terms() const;
  int n_features() const;
};

FeatureConfig feature_config_from_list(const std::string& comma_list);

struct FeatureMatrix {
  std::vector<std::string> subject_ids;
  std::vector<std::string> names;
  Eigen::MatrixXd values;  // N x p
  bool standardized = false;
  std::vector<int> constant_columns;  // flagged during standardization
};

// Features of a single trajectory, in the order of config.names().
// residual SD uses the n_i - q denominator; log attempts is
// log(1 + #attempted); lag-1 autocorrelation is the sample form with
// denominator n_i over the OLS residuals. `degenerate`, when given, is set
// if the residuals vanish and the autocorrelation was reported as 0.
Eigen::VectorXd its_features(const Trajectory& trajectory,
                             const FeatureConfig& config,
                             bool* degenerate = nullptr);

FeatureMatrix extract_features(const Dataset& ds, const FeatureConfig& config);

// Column-wise (x - mean)/sd with divisor N-1; constant columns map to 0 and
// are flagged. Idempotent.
FeatureMatrix standardize(const FeatureMatrix& fm);

struct FeatureClusterResult {
  Partition partition;
  std::vector<int> medoids;
  double total_cost = 0.0;
};

// Euclidean distances over feature rows, then k-medoids.
FeatureClusterResult feature_cluster(const FeatureMatrix& fm, int G,
                                     int n_starts, std::uint64_t seed);

// Feature export CSV: subject_id plus one column per feature.
void save_features(const FeatureMatrix& fm, std::ostream& out);

}  // namespace trajcluster::features
