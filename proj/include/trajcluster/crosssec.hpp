#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "trajcluster/core.hpp"

namespace trajcluster::crosssec {

struct KmlResult {
  Eigen::MatrixXd centroids;  // G x n
  Partition partition;
  double wss = 0.0;
  double bic_approx = 0.0;
  int starts_used = 0;
};

// Lloyd iterations from k-means++ seeding; best (lowest WSS) of n_starts.
// An emptied cluster is reseeded at the point farthest from its centroid.
KmlResult kml_fit(const AlignedMatrix& aligned, int G, int n_starts,
                  std::uint64_t seed);

// Spherical-Gaussian approximation: sigma^2 = WSS/(N*n) (floored at 1e-12),
// p = G*n + 1, BIC = p*log(N*n) - 2*logL.
double kml_bic(const KmlResult& result, const AlignedMatrix& aligned);

enum class LpaVariance { PerTime, Tied };

struct LpaModel {
  Eigen::VectorXd proportions;  // G
  Eigen::MatrixXd means;        // G x n
  Eigen::MatrixXd sds;          // G x n (tied mode: constant across columns)
  double loglik = 0.0;
  int n_params = 0;
};

struct LpaFit {
  LpaModel model;
  PosteriorMatrix posterior;  // N x G
};

// EM over per-time normal profiles with local independence. Fitted sds are
// floored at 1e-3 (data units). Starts whose smallest cluster receives
// responsibility mass below 1e-3*N are discarded; if every start collapses
// the fit fails.
LpaFit llpa_fit(const AlignedMatrix& aligned, int G, int n_starts,
                std::uint64_t seed,
                LpaVariance variance_mode = LpaVariance::PerTime);

}  // namespace trajcluster::crosssec
