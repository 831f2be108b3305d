#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "trajcluster/core.hpp"

namespace trajcluster::mixture {

// Trajectory basis: plain polynomial columns (1, t, ..., t^d) or a clamped
// cubic B-spline with equally spaced interior knots over [t_min, t_max].
struct Basis {
  enum class Kind { Polynomial, BSpline };
  Kind kind = Kind::Polynomial;
  int degree = 2;          // polynomial only; B-splines are cubic
  int interior_knots = 6;  // B-spline only
  double t_min = 0.0;
  double t_max = 1.0;  // knot span; fitters set this from the data

  int n_columns() const;
  void validate() const;
};

Basis polynomial_basis(int degree);
Basis bspline_basis(int interior_knots);
// "poly:D" or "bspline:3:K" (cubic with K interior knots).
Basis basis_from_string(const std::string& text);
std::string to_string(const Basis& basis);

// Design matrix (n x q) at the given times. B-spline times must lie within
// the knot span; columns are ordered low-to-high (power order for
// polynomials, knot order for splines) and cubic B-spline rows sum to 1.
Eigen::MatrixXd basis_matrix(const std::vector<double>& times,
                             const Basis& basis);

// Random-effect structure of a GMM: none (GBTM), a random intercept, a
// diagonal covariance over all basis terms, or an unstructured covariance
// over all basis terms.
enum class RandomEffectSpec { None, Intercept, BasisDiagonal, BasisFull };
enum class MixVariance { PerCluster, Tied };

RandomEffectSpec re_spec_from_string(const std::string& name);
std::string to_string(RandomEffectSpec spec);

struct MixtureModel {
  int G = 1;
  Eigen::VectorXd proportions;         // G
  Eigen::MatrixXd coefficients;        // G x q
  Eigen::VectorXd residual_variances;  // G (equal entries when tied)
  RandomEffectSpec re_spec = RandomEffectSpec::None;
  // Diagonal of the random-effect covariance, G x q_re (q_re = 1 for
  // intercept, q otherwise); 0x0 when re_spec is None.
  Eigen::MatrixXd re_variances;
  // Full covariance per cluster; for intercept/diagonal structures this is
  // the diagonal embedding of re_variances.
  std::vector<Eigen::MatrixXd> re_covariances;
  bool tied_variances = false;
  Basis basis;
  double loglik = 0.0;
  int n_params = 0;
  long long n_obs = 0;

  double bic() const;  // n_params * log(n_obs) - 2 * loglik
};

struct MixtureFit {
  MixtureModel model;
  PosteriorMatrix posterior;  // N x G, rows ordered as the dataset
};

struct FitOptions {
  int n_starts = 20;
  std::uint64_t seed = 0;
  MixVariance variance_mode = MixVariance::PerCluster;
  // Upper bound on every random-effect variance; 0 pins the random effects
  // and reduces a GMM to the corresponding GBTM.
  double re_variance_cap = std::numeric_limits<double>::infinity();
};

// Fixed-effects-only mixture: cluster densities are products of independent
// normals around the cluster curve. EM with random one-hot initialization
// per start; the best of n_starts by log-likelihood wins. Clusters are
// reported in descending order of their curve level at the basis-domain
// midpoint.
MixtureFit gbtm_fit(const Dataset& ds, Basis basis, int G,
                    const FitOptions& options);

// Mixture of mixed models: random effects are integrated out analytically,
// so the cluster density of subject i is a multivariate normal with
// covariance Z_i Sigma_g Z_i' + sigma2_g I. The M-step combines
// responsibility-weighted GLS for the coefficients with a bounded
// coordinate search over the variance components; the observed
// log-likelihood is non-decreasing (asserted).
MixtureFit gmm_fit(const Dataset& ds, Basis basis, RandomEffectSpec re_spec,
                   int G, const FitOptions& options);

// Membership probabilities of a (possibly partial) trajectory under a
// fitted model, computed in log space. An empty trajectory returns the
// prior proportions.
Eigen::VectorXd posterior(const MixtureModel& model,
                          const Trajectory& trajectory);

// Fixed-part cluster curves evaluated at the given times (G x |times|).
Eigen::MatrixXd cluster_means(const MixtureModel& model,
                              const std::vector<double>& times);

nlohmann::json to_json(const MixtureModel& model);
MixtureModel model_from_json(const nlohmann::json& j);

}  // namespace trajcluster::mixture
