#include "trajcluster/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>

#include "trajcluster/parallel.hpp"
#include "trajcluster/rng.hpp"

namespace trajcluster::mixture {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kLoglikTol = 1e-8;
constexpr int kEmMaxIter = 500;
constexpr double kSigmaFloor = 1e-6;  // residual variance floor
constexpr double kDegenerateFraction = 1e-3;
constexpr double kKnotTol = 1e-9;
constexpr std::uint64_t kMixStream = 0x6d69782d656d2121ULL;
}  // namespace

// --- Basis -------------------------------------------------------------------

int Basis::n_columns() const {
  return kind == Kind::Polynomial ? degree + 1 : interior_knots + 4;
}

void Basis::validate() const {
  if (kind == Kind::Polynomial) {
    if (degree < 0) throw ValidationError("basis: polynomial degree < 0");
  } else {
    if (interior_knots < 0)
      throw ValidationError("basis: negative interior knot count");
    if (!(t_max > t_min))
      throw ValidationError("basis: empty B-spline knot span");
  }
}

Basis polynomial_basis(int degree) {
  Basis b;
  b.kind = Basis::Kind::Polynomial;
  b.degree = degree;
  b.validate();
  return b;
}

Basis bspline_basis(int interior_knots) {
  Basis b;
  b.kind = Basis::Kind::BSpline;
  b.interior_knots = interior_knots;
  b.validate();
  return b;
}

Basis basis_from_string(const std::string& text) {
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  if (kind == "poly") {
    if (colon == std::string::npos)
      throw ValidationError("basis: expected poly:D");
    return polynomial_basis(std::stoi(text.substr(colon + 1)));
  }
  if (kind == "bspline") {
    // bspline:3:K -- the spline degree is fixed at 3.
    if (colon == std::string::npos)
      throw ValidationError("basis: expected bspline:3:K");
    const std::string rest = text.substr(colon + 1);
    const auto colon2 = rest.find(':');
    if (colon2 == std::string::npos || rest.substr(0, colon2) != "3")
      throw ValidationError("basis: expected bspline:3:K (cubic only)");
    return bspline_basis(std::stoi(rest.substr(colon2 + 1)));
  }
  throw ValidationError("basis: unknown kind '" + text + "'");
}

std::string to_string(const Basis& basis) {
  if (basis.kind == Basis::Kind::Polynomial)
    return "poly:" + std::to_string(basis.degree);
  return "bspline:3:" + std::to_string(basis.interior_knots);
}

namespace {

std::vector<double> clamped_knots(const Basis& basis) {
  const int m = basis.interior_knots;
  std::vector<double> knots;
  for (int k = 0; k < 4; ++k) knots.push_back(basis.t_min);
  for (int k = 1; k <= m; ++k)
    knots.push_back(basis.t_min +
                    (basis.t_max - basis.t_min) * double(k) / double(m + 1));
  for (int k = 0; k < 4; ++k) knots.push_back(basis.t_max);
  return knots;
}

// Cox-de Boor evaluation of all cubic B-spline columns at one point.
Eigen::RowVectorXd bspline_row(const std::vector<double>& knots, int n_basis,
                               double t) {
  constexpr int degree = 3;
  std::vector<double> b(knots.size() - 1, 0.0);
  // Degree-0 seed: indicator of the knot interval (right end closed on the
  // final interval so t = t_max is covered).
  int last = -1;
  for (std::size_t k = 0; k + 1 < knots.size(); ++k)
    if (knots[k] < knots[k + 1]) last = int(k);
  for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
    const bool inside = (t >= knots[k] && t < knots[k + 1]) ||
                        (int(k) == last && t == knots[k + 1]);
    b[k] = inside ? 1.0 : 0.0;
  }
  for (int d = 1; d <= degree; ++d) {
    for (std::size_t k = 0; k + d + 1 < knots.size(); ++k) {
      double left = 0.0, right = 0.0;
      if (knots[k + d] > knots[k])
        left = (t - knots[k]) / (knots[k + d] - knots[k]) * b[k];
      if (knots[k + d + 1] > knots[k + 1])
        right = (knots[k + d + 1] - t) / (knots[k + d + 1] - knots[k + 1]) *
                b[k + 1];
      b[k] = left + right;
    }
  }
  Eigen::RowVectorXd row(n_basis);
  for (int k = 0; k < n_basis; ++k) row(k) = b[std::size_t(k)];
  return row;
}

}  // namespace

Eigen::MatrixXd basis_matrix(const std::vector<double>& times,
                             const Basis& basis) {
  basis.validate();
  const int n = int(times.size());
  const int q = basis.n_columns();
  Eigen::MatrixXd X(n, q);
  if (basis.kind == Basis::Kind::Polynomial) {
    for (int j = 0; j < n; ++j) {
      double p = 1.0;
      for (int k = 0; k < q; ++k) {
        X(j, k) = p;
        p *= times[std::size_t(j)];
      }
    }
    return X;
  }
  const auto knots = clamped_knots(basis);
  for (int j = 0; j < n; ++j) {
    const double t = times[std::size_t(j)];
    if (t < basis.t_min - kKnotTol || t > basis.t_max + kKnotTol)
      throw ValidationError("basis: time " + format_double(t) +
                            " outside knot span [" +
                            format_double(basis.t_min) + ", " +
                            format_double(basis.t_max) + "]");
    X.row(j) = bspline_row(knots, q, std::clamp(t, basis.t_min, basis.t_max));
  }
  return X;
}

RandomEffectSpec re_spec_from_string(const std::string& name) {
  if (name == "none") return RandomEffectSpec::None;
  if (name == "intercept") return RandomEffectSpec::Intercept;
  if (name == "basis") return RandomEffectSpec::BasisDiagonal;
  if (name == "basis-full") return RandomEffectSpec::BasisFull;
  throw ValidationError("unknown random-effect spec: " + name);
}

std::string to_string(RandomEffectSpec spec) {
  switch (spec) {
    case RandomEffectSpec::None: return "none";
    case RandomEffectSpec::Intercept: return "intercept";
    case RandomEffectSpec::BasisDiagonal: return "basis";
    case RandomEffectSpec::BasisFull: return "basis-full";
  }
  return "?";
}

double MixtureModel::bic() const {
  return double(n_params) * std::log(double(n_obs)) - 2.0 * loglik;
}

// --- EM driver ---------------------------------------------------------------

namespace {

// Subjects sharing one design matrix are processed as a block; per-subject
// data reduce to the sufficient statistics (X'y, y'y, 1'y).
struct Block {
  Eigen::MatrixXd X;   // n x q
  Eigen::MatrixXd C;   // X'X
  Eigen::VectorXd u;   // X'1
  int n = 0;
  std::vector<int> subjects;          // dataset row of each member
  std::vector<Eigen::VectorXd> xty;   // per member
  std::vector<double> yty;
  std::vector<double> sumy;
};

struct Prepared {
  std::vector<Block> blocks;
  int n_subjects = 0;
  long long n_obs = 0;
  double data_variance = 1.0;  // scale for variance searches
};

Prepared prepare(const Dataset& ds, const Basis& basis) {
  Prepared prep;
  prep.n_subjects = int(ds.n_subjects());
  std::map<std::vector<double>, std::size_t> block_of;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < prep.n_subjects; ++i) {
    const auto& traj = ds.trajectories[std::size_t(i)];
    auto [it, inserted] = block_of.try_emplace(traj.times, prep.blocks.size());
    if (inserted) {
      Block blk;
      blk.X = basis_matrix(traj.times, basis);
      blk.C = blk.X.transpose() * blk.X;
      blk.u = blk.X.transpose() * Eigen::VectorXd::Ones(blk.X.rows());
      blk.n = int(traj.size());
      prep.blocks.push_back(std::move(blk));
    }
    Block& blk = prep.blocks[it->second];
    const Eigen::Map<const Eigen::VectorXd> y(traj.values.data(),
                                              Eigen::Index(traj.size()));
    blk.subjects.push_back(i);
    blk.xty.push_back(blk.X.transpose() * y);
    blk.yty.push_back(y.squaredNorm());
    blk.sumy.push_back(y.sum());
    prep.n_obs += long(traj.size());
    sum += y.sum();
    sumsq += y.squaredNorm();
  }
  const double n = double(prep.n_obs);
  const double mean = sum / n;
  prep.data_variance = std::max(sumsq / n - mean * mean, 1e-8);
  return prep;
}

bool has_re(RandomEffectSpec spec) { return spec != RandomEffectSpec::None; }
bool re_on_basis(RandomEffectSpec spec) {
  return spec == RandomEffectSpec::BasisDiagonal ||
         spec == RandomEffectSpec::BasisFull;
}

// Symmetric PSD square root (eigenvalues clipped at zero).
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& cov) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * lam.asDiagonal() *
         eig.eigenvectors().transpose();
}

// Per-(block, cluster) constants of the marginal covariance
// V = Z Sigma Z' + sigma2 I, via Sherman-Morrison for a random intercept
// and Woodbury otherwise. `sqrt_cov` is the symmetric square root of the
// random-effect covariance on the basis columns.
struct ClusterKernel {
  double sigma2 = 1.0;
  double logdet = 0.0;    // log|V|
  double shrink = 0.0;    // intercept: tau2 / (sigma2 + n tau2)
  Eigen::MatrixXd gain;   // basis modes: (Sigma^-1 + C/sigma2)^-1
};

ClusterKernel make_kernel(const Block& blk, RandomEffectSpec spec,
                          double sigma2, const Eigen::MatrixXd& sqrt_cov) {
  ClusterKernel k;
  k.sigma2 = sigma2;
  switch (spec) {
    case RandomEffectSpec::None:
      k.logdet = double(blk.n) * std::log(sigma2);
      break;
    case RandomEffectSpec::Intercept: {
      const double t2 = sqrt_cov(0, 0) * sqrt_cov(0, 0);
      k.shrink = t2 / (sigma2 + double(blk.n) * t2);
      k.logdet = double(blk.n - 1) * std::log(sigma2) +
                 std::log(sigma2 + double(blk.n) * t2);
      break;
    }
    case RandomEffectSpec::BasisDiagonal:
    case RandomEffectSpec::BasisFull: {
      Eigen::MatrixXd m = sqrt_cov * blk.C * sqrt_cov / sigma2;
      m.diagonal().array() += 1.0;
      const Eigen::LLT<Eigen::MatrixXd> llt(m);
      if (llt.info() != Eigen::Success)
        throw Error("gmm_fit: covariance factorization failed");
      double logdet_m = 0.0;
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        logdet_m += 2.0 * std::log(llt.matrixL()(r, r));
      k.logdet = double(blk.n) * std::log(sigma2) + logdet_m;
      const Eigen::MatrixXd minv =
          llt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
      k.gain = sqrt_cov * minv * sqrt_cov;
      break;
    }
  }
  return k;
}

// log N(y; X beta, V) for one subject, from the sufficient statistics.
double subject_logdens(const Block& blk, std::size_t member,
                       const Eigen::VectorXd& beta,
                       const Eigen::VectorXd& c_beta, RandomEffectSpec spec,
                       const ClusterKernel& k) {
  const double ss = blk.yty[member] - 2.0 * beta.dot(blk.xty[member]) +
                    beta.dot(c_beta);
  double quad = ss / k.sigma2;
  if (spec == RandomEffectSpec::Intercept) {
    const double s1 = blk.sumy[member] - beta.dot(blk.u);
    quad = (ss - k.shrink * s1 * s1) / k.sigma2;
  } else if (re_on_basis(spec)) {
    const Eigen::VectorXd d = blk.xty[member] - c_beta;
    quad = (ss - d.dot(k.gain * d) / k.sigma2) / k.sigma2;
  }
  return -0.5 * (double(blk.n) * kLog2Pi + k.logdet + quad);
}

// Responsibility-weighted residual statistics of one (block, cluster) pair,
// collapsed so a variance-component evaluation costs O(q^3) per block.
struct BlockStats {
  double mass = 0.0;    // sum of z
  double t_ss = 0.0;    // sum z * |y - X beta|^2
  double t_s1sq = 0.0;  // sum z * (1'(y - X beta))^2   (intercept)
  Eigen::MatrixXd dd;   // sum z * d d' with d = X'(y - X beta)  (basis modes)
};

struct EmState {
  int G = 1;
  RandomEffectSpec spec = RandomEffectSpec::None;
  MixVariance variance_mode = MixVariance::PerCluster;
  double re_cap = std::numeric_limits<double>::infinity();
  int q = 0;
  int q_re = 0;

  Eigen::VectorXd pi;
  Eigen::MatrixXd beta;                // G x q
  Eigen::VectorXd sigma2;              // G
  std::vector<Eigen::MatrixXd> cov;    // G random-effect covariances

  Eigen::MatrixXd z;  // N x G responsibilities
  double loglik = -std::numeric_limits<double>::infinity();
  bool degenerate = false;
};

// Q-contribution of one cluster's variance components given frozen
// responsibilities and coefficients, from the collapsed block stats.
double variance_objective(const Prepared& prep,
                          const std::vector<BlockStats>& stats,
                          RandomEffectSpec spec, double sigma2,
                          const Eigen::MatrixXd& sqrt_cov) {
  double q_val = 0.0;
  for (std::size_t bi = 0; bi < prep.blocks.size(); ++bi) {
    const Block& blk = prep.blocks[bi];
    const BlockStats& st = stats[bi];
    if (st.mass <= 0.0) continue;
    const ClusterKernel k = make_kernel(blk, spec, sigma2, sqrt_cov);
    double quad = st.t_ss / sigma2;
    if (spec == RandomEffectSpec::Intercept)
      quad = (st.t_ss - k.shrink * st.t_s1sq) / sigma2;
    else if (re_on_basis(spec))
      quad = (st.t_ss - (k.gain.array() * st.dd.array()).sum() / sigma2) /
             sigma2;
    q_val += -0.5 * (st.mass * (double(blk.n) * kLog2Pi + k.logdet) + quad);
  }
  return q_val;
}

// Bounded maximization of f over one non-negative coordinate: log-spaced
// scan around the current value plus the floor, then golden-section
// refinement around the best probe. Returns the best value seen, never
// worse than the current one.
template <typename F>
double coordinate_search(const F& f, double current, double floor_value,
                         double cap, double scale) {
  if (cap <= floor_value) return floor_value;
  struct Best {
    double x, val;
  };
  Best best{current, f(current)};
  auto consider = [&](double x) {
    x = std::clamp(x, floor_value, cap);
    const double v = f(x);
    if (v > best.val) best = {x, v};
  };
  consider(floor_value);

  const double anchor =
      current > floor_value + 1e-300 ? current : 1e-4 * scale;
  double lo = std::max(std::min(anchor / 16.0, scale * 1e-8), 1e-12 * scale);
  double hi = std::min(std::max(anchor * 16.0, 4.0 * scale), cap);
  if (!(hi > lo)) return best.x;
  const double llo = std::log(lo), lhi = std::log(hi);
  constexpr int kGrid = 9;
  double grid_best_x = anchor,
         grid_best_val = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < kGrid; ++k) {
    const double x =
        std::exp(llo + (lhi - llo) * double(k) / double(kGrid - 1));
    const double v = f(std::clamp(x, floor_value, cap));
    if (v > grid_best_val) {
      grid_best_val = v;
      grid_best_x = x;
    }
    if (v > best.val) best = {std::clamp(x, floor_value, cap), v};
  }
  // Golden-section around the best probe (one grid cell each side).
  const double step = (lhi - llo) / double(kGrid - 1);
  double a = std::log(grid_best_x) - step, b = std::log(grid_best_x) + step;
  constexpr double kInvPhi = 0.6180339887498949;
  double c = b - kInvPhi * (b - a), d = a + kInvPhi * (b - a);
  double fc = f(std::clamp(std::exp(c), floor_value, cap));
  double fd = f(std::clamp(std::exp(d), floor_value, cap));
  for (int it = 0; it < 32; ++it) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - kInvPhi * (b - a);
      fc = f(std::clamp(std::exp(c), floor_value, cap));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + kInvPhi * (b - a);
      fd = f(std::clamp(std::exp(d), floor_value, cap));
    }
  }
  consider(std::exp(0.5 * (a + b)));
  return best.x;
}

// Collapsed residual statistics for every (block, cluster) pair at the
// current coefficients.
std::vector<std::vector<BlockStats>> collect_stats(const Prepared& prep,
                                                   const EmState& st) {
  std::vector<std::vector<BlockStats>> stats(
      std::size_t(st.G), std::vector<BlockStats>(prep.blocks.size()));
  for (int g = 0; g < st.G; ++g) {
    const Eigen::VectorXd beta = st.beta.row(g);
    for (std::size_t bi = 0; bi < prep.blocks.size(); ++bi) {
      const Block& blk = prep.blocks[bi];
      BlockStats& s = stats[std::size_t(g)][bi];
      if (re_on_basis(st.spec)) s.dd = Eigen::MatrixXd::Zero(st.q, st.q);
      const Eigen::VectorXd cb = blk.C * beta;
      for (std::size_t m = 0; m < blk.subjects.size(); ++m) {
        const double w = st.z(blk.subjects[m], g);
        const double ss =
            blk.yty[m] - 2.0 * beta.dot(blk.xty[m]) + beta.dot(cb);
        s.mass += w;
        s.t_ss += w * ss;
        if (st.spec == RandomEffectSpec::Intercept) {
          const double s1 = blk.sumy[m] - beta.dot(blk.u);
          s.t_s1sq += w * s1 * s1;
        } else if (re_on_basis(st.spec)) {
          const Eigen::VectorXd d = blk.xty[m] - cb;
          s.dd += w * d * d.transpose();
        }
      }
    }
  }
  return stats;
}

// Closed-form proposal for the variance update, from the conditional
// moments of the random effects at the current components. The caller only
// keeps it when it improves the weighted marginal objective.
struct VarianceCandidate {
  double sigma2 = 0.0;
  Eigen::MatrixXd cov;
  double mass = 0.0;
  double obs = 0.0;
};

VarianceCandidate em_candidate(const Prepared& prep,
                               const std::vector<BlockStats>& stats,
                               RandomEffectSpec spec, double sigma2,
                               const Eigen::MatrixXd& cov) {
  const int q_re = int(cov.rows());
  VarianceCandidate cand;
  cand.cov = Eigen::MatrixXd::Zero(q_re, q_re);
  const Eigen::MatrixXd sqrt_cov = spec == RandomEffectSpec::BasisFull
                                       ? psd_sqrt(cov)
                                       : Eigen::MatrixXd(
                                             cov.diagonal()
                                                 .cwiseMax(0.0)
                                                 .cwiseSqrt()
                                                 .asDiagonal());
  double rss = 0.0;
  for (std::size_t bi = 0; bi < prep.blocks.size(); ++bi) {
    const Block& blk = prep.blocks[bi];
    const BlockStats& s = stats[bi];
    if (s.mass <= 0.0) continue;
    const double n = double(blk.n);
    cand.mass += s.mass;
    cand.obs += s.mass * n;
    if (spec == RandomEffectSpec::Intercept) {
      const double t2 = cov(0, 0);
      const double denom = sigma2 + n * t2;
      const double hb = t2 / denom;           // E[u|y] = hb * S1
      const double w = t2 * sigma2 / denom;   // Var(u|y)
      cand.cov(0, 0) += hb * hb * s.t_s1sq + s.mass * w;
      rss += s.t_ss - 2.0 * hb * s.t_s1sq + n * hb * hb * s.t_s1sq +
             s.mass * n * w;
    } else {
      // Cov(u|y) = (Sigma^-1 + C/sigma2)^-1; E[u|y] = Cov(u|y) d / sigma2.
      Eigen::MatrixXd m = sqrt_cov * blk.C * sqrt_cov / sigma2;
      m.diagonal().array() += 1.0;
      const Eigen::LLT<Eigen::MatrixXd> llt(m);
      const Eigen::MatrixXd w =
          sqrt_cov * llt.solve(Eigen::MatrixXd::Identity(q_re, q_re)) *
          sqrt_cov;
      const Eigen::MatrixXd bb = w * s.dd * w / (sigma2 * sigma2);
      cand.cov += bb + s.mass * w;
      rss += s.t_ss - 2.0 * (w * s.dd).trace() / sigma2 +
             (blk.C * bb).trace() + s.mass * (blk.C * w).trace();
    }
  }
  if (cand.mass > 0.0) {
    cand.cov /= cand.mass;
    cand.sigma2 = rss / cand.obs;
  }
  return cand;
}

Eigen::MatrixXd cap_cov(const Eigen::MatrixXd& cov, RandomEffectSpec spec,
                        double cap) {
  if (spec != RandomEffectSpec::BasisFull) {
    Eigen::VectorXd diag = cov.diagonal().cwiseMax(0.0);
    if (std::isfinite(cap)) diag = diag.cwiseMin(cap);
    return Eigen::MatrixXd(diag.asDiagonal());
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0);
  if (std::isfinite(cap)) lam = lam.cwiseMin(cap);
  return eig.eigenvectors() * lam.asDiagonal() *
         eig.eigenvectors().transpose();
}

// One variance-component update: closed-form proposals plus coordinate
// ascent over sigma2 and the covariance diagonal, iterated until the
// objective stalls, keep-best throughout. For tied variances the objective
// pools all clusters.
void update_variances(const Prepared& prep, EmState& st) {
  const auto stats = collect_stats(prep, st);
  const double scale = prep.data_variance;
  constexpr int kMaxCycles = 8;
  const bool full = st.spec == RandomEffectSpec::BasisFull;

  auto sqrt_of = [&](const Eigen::MatrixXd& cov) {
    return full ? psd_sqrt(cov)
                : Eigen::MatrixXd(
                      cov.diagonal().cwiseMax(0.0).cwiseSqrt().asDiagonal());
  };

  auto improve =
      [&](double& sigma2, Eigen::MatrixXd& cov,
          const std::function<double(double, const Eigen::MatrixXd&)>& objective,
          const std::function<VarianceCandidate(double, const Eigen::MatrixXd&)>&
              proposal) {
        double best = objective(sigma2, cov);
        for (int cycle = 0; cycle < kMaxCycles; ++cycle) {
          const double before = best;
          const VarianceCandidate cand = proposal(sigma2, cov);
          if (cand.mass > 0.0) {
            const double cs = std::max(cand.sigma2, kSigmaFloor);
            const Eigen::MatrixXd cc = cap_cov(cand.cov, st.spec, st.re_cap);
            const double v = objective(cs, cc);
            if (v > best) {
              best = v;
              sigma2 = cs;
              cov = cc;
            }
          }
          sigma2 = coordinate_search(
              [&](double x) { return objective(x, cov); }, sigma2,
              kSigmaFloor, std::numeric_limits<double>::infinity(), scale);
          if (!full) {
            for (int k = 0; k < int(cov.rows()); ++k) {
              Eigen::MatrixXd probe = cov;
              const double xk = coordinate_search(
                  [&](double x) {
                    probe(k, k) = x;
                    return objective(sigma2, probe);
                  },
                  cov(k, k), 0.0, st.re_cap, scale);
              cov(k, k) = xk;
            }
          }
          best = objective(sigma2, cov);
          if (best - before <= 1e-10 * (std::abs(before) + 1.0)) break;
        }
      };

  if (st.variance_mode == MixVariance::Tied) {
    double sigma2 = st.sigma2(0);
    Eigen::MatrixXd cov = st.q_re > 0
                              ? st.cov[0]
                              : Eigen::MatrixXd::Zero(0, 0);
    improve(
        sigma2, cov,
        [&](double s2, const Eigen::MatrixXd& c) {
          const Eigen::MatrixXd sc = sqrt_of(c);
          double total = 0.0;
          for (int g = 0; g < st.G; ++g)
            total += variance_objective(prep, stats[std::size_t(g)], st.spec,
                                        s2, sc);
          return total;
        },
        [&](double s2, const Eigen::MatrixXd& c) {
          VarianceCandidate pooled;
          pooled.cov = Eigen::MatrixXd::Zero(st.q_re, st.q_re);
          for (int g = 0; g < st.G; ++g) {
            const auto cnd =
                em_candidate(prep, stats[std::size_t(g)], st.spec, s2, c);
            pooled.mass += cnd.mass;
            pooled.obs += cnd.obs;
            pooled.sigma2 += cnd.sigma2 * cnd.obs;
            pooled.cov += cnd.cov * cnd.mass;
          }
          if (pooled.obs > 0.0) pooled.sigma2 /= pooled.obs;
          if (pooled.mass > 0.0) pooled.cov /= pooled.mass;
          return pooled;
        });
    st.sigma2.setConstant(sigma2);
    for (int g = 0; g < st.G; ++g)
      if (st.q_re > 0) st.cov[std::size_t(g)] = cov;
    return;
  }

  for (int g = 0; g < st.G; ++g) {
    double sigma2 = st.sigma2(g);
    Eigen::MatrixXd cov = st.q_re > 0 ? st.cov[std::size_t(g)]
                                      : Eigen::MatrixXd::Zero(0, 0);
    improve(
        sigma2, cov,
        [&](double s2, const Eigen::MatrixXd& c) {
          return variance_objective(prep, stats[std::size_t(g)], st.spec, s2,
                                    sqrt_of(c));
        },
        [&](double s2, const Eigen::MatrixXd& c) {
          return em_candidate(prep, stats[std::size_t(g)], st.spec, s2, c);
        });
    st.sigma2(g) = sigma2;
    if (st.q_re > 0) st.cov[std::size_t(g)] = cov;
  }
}

// Responsibility-weighted GLS update of the cluster coefficients at the
// current variance components.
void update_coefficients(const Prepared& prep, EmState& st) {
  for (int g = 0; g < st.G; ++g) {
    Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(st.q, st.q);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(st.q);
    const Eigen::MatrixXd sqrt_cov =
        st.q_re > 0
            ? (st.spec == RandomEffectSpec::BasisFull
                   ? psd_sqrt(st.cov[std::size_t(g)])
                   : Eigen::MatrixXd(st.cov[std::size_t(g)]
                                         .diagonal()
                                         .cwiseMax(0.0)
                                         .cwiseSqrt()
                                         .asDiagonal()))
            : Eigen::MatrixXd::Zero(0, 0);
    for (std::size_t bi = 0; bi < prep.blocks.size(); ++bi) {
      const Block& blk = prep.blocks[bi];
      const ClusterKernel k = make_kernel(blk, st.spec, st.sigma2(g), sqrt_cov);
      Eigen::MatrixXd xvx;
      switch (st.spec) {
        case RandomEffectSpec::None:
          xvx = blk.C / k.sigma2;
          break;
        case RandomEffectSpec::Intercept:
          xvx = (blk.C - k.shrink * blk.u * blk.u.transpose()) / k.sigma2;
          break;
        case RandomEffectSpec::BasisDiagonal:
        case RandomEffectSpec::BasisFull:
          xvx = (blk.C - blk.C * k.gain * blk.C / k.sigma2) / k.sigma2;
          break;
      }
      double mass = 0.0;
      Eigen::VectorXd bsum = Eigen::VectorXd::Zero(st.q);
      double sysum = 0.0;
      for (std::size_t m = 0; m < blk.subjects.size(); ++m) {
        const double w = st.z(blk.subjects[m], g);
        mass += w;
        bsum += w * blk.xty[m];
        sysum += w * blk.sumy[m];
      }
      lhs += mass * xvx;
      switch (st.spec) {
        case RandomEffectSpec::None:
          rhs += bsum / k.sigma2;
          break;
        case RandomEffectSpec::Intercept:
          rhs += (bsum - k.shrink * sysum * blk.u) / k.sigma2;
          break;
        case RandomEffectSpec::BasisDiagonal:
        case RandomEffectSpec::BasisFull:
          rhs += (bsum - blk.C * k.gain * bsum / k.sigma2) / k.sigma2;
          break;
      }
    }
    st.beta.row(g) = lhs.ldlt().solve(rhs).transpose();
  }
}

// Closed-form GBTM residual variance update (the Q maximizer when there are
// no random effects).
void update_gbtm_variance(const Prepared& prep, EmState& st) {
  Eigen::VectorXd rss = Eigen::VectorXd::Zero(st.G);
  Eigen::VectorXd count = Eigen::VectorXd::Zero(st.G);
  for (int g = 0; g < st.G; ++g) {
    const Eigen::VectorXd beta = st.beta.row(g);
    for (const Block& blk : prep.blocks) {
      const Eigen::VectorXd cb = blk.C * beta;
      for (std::size_t m = 0; m < blk.subjects.size(); ++m) {
        const double w = st.z(blk.subjects[m], g);
        rss(g) +=
            w * (blk.yty[m] - 2.0 * beta.dot(blk.xty[m]) + beta.dot(cb));
        count(g) += w * double(blk.n);
      }
    }
  }
  if (st.variance_mode == MixVariance::Tied) {
    st.sigma2.setConstant(std::max(rss.sum() / count.sum(), kSigmaFloor));
  } else {
    for (int g = 0; g < st.G; ++g)
      st.sigma2(g) = std::max(rss(g) / count(g), kSigmaFloor);
  }
}

// E-step: responsibilities and the observed log-likelihood.
double e_step(const Prepared& prep, EmState& st) {
  Eigen::MatrixXd logf(prep.n_subjects, st.G);
  for (int g = 0; g < st.G; ++g) {
    const Eigen::VectorXd beta = st.beta.row(g);
    const Eigen::MatrixXd sqrt_cov =
        st.q_re > 0
            ? (st.spec == RandomEffectSpec::BasisFull
                   ? psd_sqrt(st.cov[std::size_t(g)])
                   : Eigen::MatrixXd(st.cov[std::size_t(g)]
                                         .diagonal()
                                         .cwiseMax(0.0)
                                         .cwiseSqrt()
                                         .asDiagonal()))
            : Eigen::MatrixXd::Zero(0, 0);
    const double logpi = std::log(st.pi(g));
    for (const Block& blk : prep.blocks) {
      const ClusterKernel k = make_kernel(blk, st.spec, st.sigma2(g), sqrt_cov);
      const Eigen::VectorXd cb = blk.C * beta;
      for (std::size_t m = 0; m < blk.subjects.size(); ++m)
        logf(blk.subjects[m], g) =
            logpi + subject_logdens(blk, m, beta, cb, st.spec, k);
    }
  }
  double ll = 0.0;
  for (int i = 0; i < prep.n_subjects; ++i) {
    const double mx = logf.row(i).maxCoeff();
    const double sum = (logf.row(i).array() - mx).exp().sum();
    ll += mx + std::log(sum);
    st.z.row(i) = (logf.row(i).array() - mx - std::log(sum)).exp();
  }
  return ll;
}

EmState run_start(const Prepared& prep, RandomEffectSpec spec, int G,
                  const FitOptions& options, int q, Rng rng) {
  EmState st;
  st.G = G;
  st.spec = spec;
  st.variance_mode = options.variance_mode;
  st.re_cap = options.re_variance_cap;
  st.q = q;
  st.q_re =
      spec == RandomEffectSpec::None
          ? 0
          : (spec == RandomEffectSpec::Intercept ? 1 : q);
  st.pi = Eigen::VectorXd::Constant(G, 1.0 / double(G));
  st.beta = Eigen::MatrixXd::Zero(G, q);
  st.sigma2 = Eigen::VectorXd::Ones(G);
  st.cov.assign(std::size_t(G), Eigen::MatrixXd::Zero(st.q_re, st.q_re));
  st.z = Eigen::MatrixXd::Zero(prep.n_subjects, G);

  // Random one-hot assignment, then one M-step to obtain parameters.
  for (int i = 0; i < prep.n_subjects; ++i)
    st.z(i, int(rng.uniform_index(std::size_t(G)))) = 1.0;

  auto check_degenerate = [&]() {
    for (int g = 0; g < st.G; ++g)
      if (st.z.col(g).sum() < kDegenerateFraction * double(prep.n_subjects)) {
        st.degenerate = true;
        return true;
      }
    return false;
  };

  if (check_degenerate()) return st;
  update_coefficients(prep, st);  // OLS: sigma2 = 1, cov = 0
  update_gbtm_variance(prep, st);
  if (st.q_re > 0) {
    // Split the naive residual variance between the two components to give
    // the search a sensible starting point.
    for (int g = 0; g < G; ++g) {
      const double half = 0.5 * st.sigma2(g);
      st.sigma2(g) = std::max(half, kSigmaFloor);
      st.cov[std::size_t(g)] = Eigen::MatrixXd::Identity(st.q_re, st.q_re) *
                               std::min(half, st.re_cap);
    }
    if (st.variance_mode == MixVariance::Tied) {
      st.sigma2.setConstant(st.sigma2.mean());
      Eigen::MatrixXd mean_cov = Eigen::MatrixXd::Zero(st.q_re, st.q_re);
      for (int g = 0; g < G; ++g) mean_cov += st.cov[std::size_t(g)];
      mean_cov /= double(G);
      for (int g = 0; g < G; ++g) st.cov[std::size_t(g)] = mean_cov;
    }
    update_variances(prep, st);
  }

  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < kEmMaxIter; ++iter) {
    const double ll = e_step(prep, st);
    if (ll + std::max(1e-10, kLoglikTol * std::abs(ll)) < prev_ll)
      throw Error("mixture EM: log-likelihood decreased from " +
                  format_double(prev_ll) + " to " + format_double(ll));
    const bool converged =
        iter > 0 &&
        std::abs(ll - prev_ll) <= kLoglikTol * (std::abs(prev_ll) + 1e-12);
    prev_ll = ll;
    st.loglik = ll;
    if (converged || iter == kEmMaxIter - 1) break;
    if (check_degenerate()) return st;
    for (int g = 0; g < G; ++g)
      st.pi(g) = st.z.col(g).sum() / double(prep.n_subjects);
    update_coefficients(prep, st);
    if (st.spec == RandomEffectSpec::None)
      update_gbtm_variance(prep, st);
    else
      update_variances(prep, st);
  }
  return st;
}

int count_params(int G, int q, RandomEffectSpec spec, MixVariance mode) {
  const int proportions = G - 1;
  const int coefficients = G * q;
  const int residual = mode == MixVariance::Tied ? 1 : G;
  const int sets = mode == MixVariance::Tied ? 1 : G;
  int re = 0;
  if (spec == RandomEffectSpec::Intercept)
    re = sets;
  else if (spec == RandomEffectSpec::BasisDiagonal)
    re = sets * q;
  else if (spec == RandomEffectSpec::BasisFull)
    re = sets * q * (q + 1) / 2;
  return proportions + coefficients + residual + re;
}

MixtureFit fit_mixture(const Dataset& ds, Basis basis, RandomEffectSpec spec,
                       int G, const FitOptions& options) {
  ds.validate();
  if (G < 1) throw ValidationError("mixture fit: G < 1");
  if (int(ds.n_subjects()) < G)
    throw ValidationError("mixture fit: fewer subjects than clusters");

  // Pin the basis domain to the observed time range.
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& traj : ds.trajectories) {
    lo = std::min(lo, traj.times.front());
    hi = std::max(hi, traj.times.back());
  }
  basis.t_min = lo;
  basis.t_max = hi > lo ? hi : lo + 1.0;
  basis.validate();

  const int q = basis.n_columns();
  const Prepared prep = prepare(ds, basis);
  if (prep.n_obs <= long(G) * long(q + 1))
    throw ValidationError("mixture fit: too few observations for G=" +
                          std::to_string(G));

  const int n_starts = std::max(options.n_starts, 1);
  std::vector<EmState> starts(static_cast<std::size_t>(n_starts));
  std::vector<std::string> failures(static_cast<std::size_t>(n_starts));
  parallel_for(std::size_t(n_starts), [&](std::size_t s) {
    try {
      starts[s] = run_start(prep, spec, G, options, q,
                            Rng::derive(options.seed, kMixStream,
                                        std::uint64_t(s)));
    } catch (const std::exception& e) {
      starts[s].degenerate = true;
      failures[s] = e.what();
    }
  });
  for (std::size_t s = 0; s < failures.size(); ++s)
    if (!failures[s].empty()) throw Error(failures[s]);

  int best = -1;
  for (int s = 0; s < n_starts; ++s) {
    if (starts[std::size_t(s)].degenerate) continue;
    if (best < 0 ||
        starts[std::size_t(s)].loglik > starts[std::size_t(best)].loglik)
      best = s;
  }
  if (best < 0)
    throw Error("mixture fit: all " + std::to_string(n_starts) +
                " starts degenerate for G=" + std::to_string(G));
  EmState& st = starts[std::size_t(best)];

  // Canonical cluster order: descending curve level at the domain midpoint.
  const double t_mid = 0.5 * (basis.t_min + basis.t_max);
  const Eigen::MatrixXd mid = basis_matrix({t_mid}, basis);
  std::vector<int> order(static_cast<std::size_t>(G));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> level(static_cast<std::size_t>(G));
  for (int g = 0; g < G; ++g)
    level[std::size_t(g)] = mid.row(0).dot(st.beta.row(g));
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return level[std::size_t(a)] > level[std::size_t(b)];
  });

  MixtureFit fit;
  fit.model.G = G;
  fit.model.re_spec = spec;
  fit.model.tied_variances = options.variance_mode == MixVariance::Tied;
  fit.model.basis = basis;
  fit.model.loglik = st.loglik;
  fit.model.n_obs = prep.n_obs;
  fit.model.n_params = count_params(G, q, spec, options.variance_mode);
  fit.model.proportions.resize(G);
  fit.model.coefficients.resize(G, q);
  fit.model.residual_variances.resize(G);
  fit.model.re_variances.resize(G, st.q_re);
  fit.posterior.resize(prep.n_subjects, G);
  for (int g = 0; g < G; ++g) {
    const int src = order[std::size_t(g)];
    fit.model.proportions(g) = st.pi(src);
    fit.model.coefficients.row(g) = st.beta.row(src);
    fit.model.residual_variances(g) = st.sigma2(src);
    if (st.q_re > 0) {
      fit.model.re_covariances.push_back(st.cov[std::size_t(src)]);
      fit.model.re_variances.row(g) = st.cov[std::size_t(src)].diagonal();
    }
    fit.posterior.col(g) = st.z.col(src);
  }
  return fit;
}

}  // namespace

MixtureFit gbtm_fit(const Dataset& ds, Basis basis, int G,
                    const FitOptions& options) {
  return fit_mixture(ds, basis, RandomEffectSpec::None, G, options);
}

MixtureFit gmm_fit(const Dataset& ds, Basis basis, RandomEffectSpec re_spec,
                   int G, const FitOptions& options) {
  return fit_mixture(ds, basis, re_spec, G, options);
}

Eigen::VectorXd posterior(const MixtureModel& model,
                          const Trajectory& trajectory) {
  if (trajectory.times.empty()) return model.proportions;
  trajectory.validate();
  const Eigen::MatrixXd X = basis_matrix(trajectory.times, model.basis);
  const Eigen::Map<const Eigen::VectorXd> y(trajectory.values.data(),
                                            Eigen::Index(trajectory.size()));
  const int n = int(trajectory.size());

  Eigen::VectorXd logp(model.G);
  for (int g = 0; g < model.G; ++g) {
    const Eigen::VectorXd r = y - X * model.coefficients.row(g).transpose();
    const double s2 = model.residual_variances(g);
    double quad, logdet;
    if (model.re_spec == RandomEffectSpec::None) {
      quad = r.squaredNorm() / s2;
      logdet = double(n) * std::log(s2);
    } else if (model.re_spec == RandomEffectSpec::Intercept) {
      const double t2 = model.re_variances(g, 0);
      const double shrink = t2 / (s2 + double(n) * t2);
      const double s1 = r.sum();
      quad = (r.squaredNorm() - shrink * s1 * s1) / s2;
      logdet =
          double(n - 1) * std::log(s2) + std::log(s2 + double(n) * t2);
    } else {
      const Eigen::MatrixXd cov = model.re_covariances[std::size_t(g)];
      const Eigen::MatrixXd a =
          model.re_spec == RandomEffectSpec::BasisFull
              ? [&cov] {
                  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(
                      cov);
                  return Eigen::MatrixXd(
                      eig.eigenvectors() *
                      eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                      eig.eigenvectors().transpose());
                }()
              : Eigen::MatrixXd(
                    cov.diagonal().cwiseMax(0.0).cwiseSqrt().asDiagonal());
      Eigen::MatrixXd m = a * (X.transpose() * X) * a / s2;
      m.diagonal().array() += 1.0;
      const Eigen::LLT<Eigen::MatrixXd> llt(m);
      double logdet_m = 0.0;
      for (Eigen::Index k = 0; k < m.rows(); ++k)
        logdet_m += 2.0 * std::log(llt.matrixL()(k, k));
      const Eigen::VectorXd d = X.transpose() * r;
      const Eigen::VectorXd ad = a * d;
      quad = (r.squaredNorm() - ad.dot(llt.solve(ad)) / s2) / s2;
      logdet = double(n) * std::log(s2) + logdet_m;
    }
    logp(g) = std::log(model.proportions(g)) -
              0.5 * (double(n) * kLog2Pi + logdet + quad);
  }
  const double mx = logp.maxCoeff();
  Eigen::VectorXd z = (logp.array() - mx).exp();
  z /= z.sum();
  return z;
}

Eigen::MatrixXd cluster_means(const MixtureModel& model,
                              const std::vector<double>& times) {
  const Eigen::MatrixXd X = basis_matrix(times, model.basis);
  return model.coefficients * X.transpose();
}

nlohmann::json to_json(const MixtureModel& model) {
  nlohmann::json j;
  j["type"] = model.re_spec == RandomEffectSpec::None ? "gbtm" : "gmm";
  j["version"] = TRAJCLUSTER_VERSION;
  j["basis"] = {{"spec", to_string(model.basis)},
                {"t_min", model.basis.t_min},
                {"t_max", model.basis.t_max}};
  j["re_spec"] = to_string(model.re_spec);
  j["tied_variances"] = model.tied_variances;
  j["G"] = model.G;
  j["proportions"] = std::vector<double>(
      model.proportions.data(), model.proportions.data() + model.G);
  std::vector<std::vector<double>> coef;
  for (int g = 0; g < model.G; ++g)
    coef.emplace_back(model.coefficients.row(g).begin(),
                      model.coefficients.row(g).end());
  j["coefficients"] = coef;
  j["residual_variances"] = std::vector<double>(
      model.residual_variances.data(),
      model.residual_variances.data() + model.G);
  std::vector<std::vector<double>> recov;
  for (const auto& cov : model.re_covariances) {
    std::vector<double> flat;
    for (Eigen::Index r = 0; r < cov.rows(); ++r)
      for (Eigen::Index c = 0; c < cov.cols(); ++c) flat.push_back(cov(r, c));
    recov.push_back(std::move(flat));
  }
  j["re_covariances"] = recov;
  j["loglik"] = model.loglik;
  j["n_params"] = model.n_params;
  j["n_obs"] = model.n_obs;
  j["bic"] = model.bic();
  return j;
}

MixtureModel model_from_json(const nlohmann::json& j) {
  MixtureModel model;
  model.basis = basis_from_string(j.at("basis").at("spec").get<std::string>());
  model.basis.t_min = j.at("basis").at("t_min").get<double>();
  model.basis.t_max = j.at("basis").at("t_max").get<double>();
  model.re_spec = re_spec_from_string(j.at("re_spec").get<std::string>());
  model.tied_variances = j.at("tied_variances").get<bool>();
  model.G = j.at("G").get<int>();
  const auto pi = j.at("proportions").get<std::vector<double>>();
  model.proportions =
      Eigen::Map<const Eigen::VectorXd>(pi.data(), Eigen::Index(pi.size()));
  const auto coef =
      j.at("coefficients").get<std::vector<std::vector<double>>>();
  const int q = model.basis.n_columns();
  model.coefficients.resize(model.G, q);
  for (int g = 0; g < model.G; ++g)
    for (int k = 0; k < q; ++k)
      model.coefficients(g, k) = coef[std::size_t(g)][std::size_t(k)];
  const auto rv = j.at("residual_variances").get<std::vector<double>>();
  model.residual_variances =
      Eigen::Map<const Eigen::VectorXd>(rv.data(), Eigen::Index(rv.size()));
  const auto recov =
      j.at("re_covariances").get<std::vector<std::vector<double>>>();
  const int q_re =
      recov.empty() ? 0 : int(std::lround(std::sqrt(double(recov[0].size()))));
  model.re_variances.resize(model.G, q_re);
  for (std::size_t g = 0; g < recov.size(); ++g) {
    Eigen::MatrixXd cov(q_re, q_re);
    for (int r = 0; r < q_re; ++r)
      for (int c = 0; c < q_re; ++c)
        cov(r, c) = recov[g][std::size_t(r * q_re + c)];
    model.re_covariances.push_back(cov);
    model.re_variances.row(int(g)) = cov.diagonal();
  }
  model.loglik = j.at("loglik").get<double>();
  model.n_params = j.at("n_params").get<int>();
  model.n_obs = j.at("n_obs").get<long long>();
  return model;
}

}  // namespace trajcluster::mixture
