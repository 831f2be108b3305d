#include "trajcluster/crosssec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "trajcluster/parallel.hpp"
#include "trajcluster/rng.hpp"

namespace trajcluster::crosssec {

namespace {
constexpr double kCentroidTol = 1e-8;
constexpr int kKmlMaxIter = 300;
constexpr double kLoglikTol = 1e-8;
constexpr int kEmMaxIter = 500;
constexpr double kSdFloor = 1e-3;
constexpr double kDegenerateFraction = 1e-3;
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr std::uint64_t kKmlStream = 0x6b6d6c2b2b696e69ULL;
constexpr std::uint64_t kLpaStream = 0x6c6c70612d656d21ULL;

// k-means++ seeding: first centroid uniform, the rest proportional to the
// squared distance to the nearest chosen centroid.
std::vector<int> kmeanspp_indices(const Eigen::MatrixXd& data, int G,
                                  Rng& rng) {
  const int n = int(data.rows());
  std::vector<int> chosen;
  chosen.push_back(int(rng.uniform_index(std::size_t(n))));
  Eigen::VectorXd d2(n);
  for (int i = 0; i < n; ++i)
    d2(i) = (data.row(i) - data.row(chosen[0])).squaredNorm();
  while (int(chosen.size()) < G) {
    const double total = d2.sum();
    int pick = -1;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double cum = 0.0;
      for (int i = 0; i < n; ++i) {
        cum += d2(i);
        if (u < cum) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = n - 1;
    } else {
      // All remaining points coincide with a centroid; take the first
      // unchosen index.
      for (int i = 0; i < n; ++i)
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) {
          pick = i;
          break;
        }
      if (pick < 0) pick = 0;
    }
    chosen.push_back(pick);
    for (int i = 0; i < n; ++i)
      d2(i) = std::min(d2(i), (data.row(i) - data.row(pick)).squaredNorm());
  }
  return chosen;
}

struct LloydOutcome {
  Eigen::MatrixXd centroids;
  std::vector<int> labels;  // 0-based
  double wss = 0.0;
};

LloydOutcome lloyd(const Eigen::MatrixXd& data, int G, Rng rng) {
  const int n = int(data.rows());
  LloydOutcome out;
  const auto seeds = kmeanspp_indices(data, G, rng);
  out.centroids.resize(G, data.cols());
  for (int g = 0; g < G; ++g) out.centroids.row(g) = data.row(seeds[std::size_t(g)]);
  out.labels.assign(std::size_t(n), 0);

  for (int iter = 0; iter < kKmlMaxIter; ++iter) {
    // Assignment step; ties toward the lowest cluster index.
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int best_g = 0;
      for (int g = 0; g < G; ++g) {
        const double v = (data.row(i) - out.centroids.row(g)).squaredNorm();
        if (v < best) {
          best = v;
          best_g = g;
        }
      }
      out.labels[std::size_t(i)] = best_g;
    }

    // Empty-cluster repair: reseed at the point farthest from its centroid.
    for (int g = 0; g < G; ++g) {
      if (std::count(out.labels.begin(), out.labels.end(), g) > 0) continue;
      int far = 0;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        const double v =
            (data.row(i) - out.centroids.row(out.labels[std::size_t(i)]))
                .squaredNorm();
        if (v > far_d) {
          far_d = v;
          far = i;
        }
      }
      out.labels[std::size_t(far)] = g;
    }

    // Update step.
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(G, data.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(G);
    for (int i = 0; i < n; ++i) {
      next.row(out.labels[std::size_t(i)]) += data.row(i);
      counts(out.labels[std::size_t(i)]) += 1.0;
    }
    double movement = 0.0;
    for (int g = 0; g < G; ++g) {
      if (counts(g) > 0.0) next.row(g) /= counts(g);
      else next.row(g) = out.centroids.row(g);
      movement = std::max(movement,
                          (next.row(g) - out.centroids.row(g)).norm());
    }
    out.centroids = next;
    if (movement < kCentroidTol) break;
  }

  out.wss = 0.0;
  for (int i = 0; i < n; ++i)
    out.wss +=
        (data.row(i) - out.centroids.row(out.labels[std::size_t(i)])).squaredNorm();
  return out;
}

}  // namespace

KmlResult kml_fit(const AlignedMatrix& aligned, int G, int n_starts,
                  std::uint64_t seed) {
  const int n_subjects = int(aligned.values.rows());
  if (G < 1) throw ValidationError("kml_fit: G < 1");
  if (G > n_subjects)
    throw ValidationError("kml_fit: G=" + std::to_string(G) + " > N=" +
                          std::to_string(n_subjects));
  if (!aligned.values.allFinite())
    throw ValidationError("kml_fit: non-finite data");
  if (n_starts < 1) n_starts = 1;

  std::vector<LloydOutcome> outcomes(static_cast<std::size_t>(n_starts));
  parallel_for(std::size_t(n_starts), [&](std::size_t s) {
    outcomes[s] = lloyd(aligned.values, G,
                        Rng::derive(seed, kKmlStream, std::uint64_t(s)));
  });
  std::size_t best = 0;
  for (std::size_t s = 1; s < outcomes.size(); ++s)
    if (outcomes[s].wss < outcomes[best].wss) best = s;

  KmlResult result;
  result.centroids = outcomes[best].centroids;
  result.wss = outcomes[best].wss;
  result.starts_used = n_starts;
  result.partition.G = G;
  result.partition.labels.reserve(std::size_t(n_subjects));
  for (int lab : outcomes[best].labels)
    result.partition.labels.push_back(lab + 1);
  result.bic_approx = kml_bic(result, aligned);
  return result;
}

double kml_bic(const KmlResult& result, const AlignedMatrix& aligned) {
  const double n_subjects = double(aligned.values.rows());
  const double n_times = double(aligned.values.cols());
  const double n_obs = n_subjects * n_times;
  const double sigma2 = std::max(result.wss / n_obs, 1e-12);
  // logL at the common spherical variance; the residual sum equals WSS.
  const double loglik =
      -0.5 * n_obs * (kLog2Pi + std::log(sigma2)) -
      0.5 * result.wss / sigma2;
  const double p = double(result.partition.G) * n_times + 1.0;
  return p * std::log(n_obs) - 2.0 * loglik;
}

namespace {

struct LpaStart {
  LpaModel model;
  PosteriorMatrix posterior;
  bool degenerate = false;
  double loglik = -std::numeric_limits<double>::infinity();
};

LpaStart run_lpa_start(const Eigen::MatrixXd& data, int G,
                       LpaVariance variance_mode, Rng rng) {
  const int n_subjects = int(data.rows());
  const int n_times = int(data.cols());
  LpaStart out;

  // Random one-hot assignment, then one M-step.
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(n_subjects, G);
  for (int i = 0; i < n_subjects; ++i)
    z(i, int(rng.uniform_index(std::size_t(G)))) = 1.0;

  Eigen::VectorXd pi(G);
  Eigen::MatrixXd mu(G, n_times), sd(G, n_times);
  auto m_step = [&]() {
    for (int g = 0; g < G; ++g) {
      const double mass = z.col(g).sum();
      if (mass < kDegenerateFraction * double(n_subjects)) {
        out.degenerate = true;
        return;
      }
      pi(g) = mass / double(n_subjects);
      for (int j = 0; j < n_times; ++j) {
        const double m = z.col(g).dot(data.col(j)) / mass;
        mu(g, j) = m;
        const double var =
            z.col(g).dot((data.col(j).array() - m).square().matrix()) / mass;
        sd(g, j) = std::max(std::sqrt(var), kSdFloor);
      }
      if (variance_mode == LpaVariance::Tied) {
        double pooled = 0.0;
        for (int j = 0; j < n_times; ++j)
          pooled += z.col(g).dot(
              (data.col(j).array() - mu(g, j)).square().matrix());
        pooled /= mass * double(n_times);
        sd.row(g).setConstant(std::max(std::sqrt(pooled), kSdFloor));
      }
    }
  };

  m_step();
  if (out.degenerate) return out;

  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < kEmMaxIter; ++iter) {
    // E-step in log space.
    Eigen::MatrixXd logz(n_subjects, G);
    for (int g = 0; g < G; ++g) {
      double logdet = 0.0;
      for (int j = 0; j < n_times; ++j) logdet += std::log(sd(g, j));
      for (int i = 0; i < n_subjects; ++i) {
        double quad = 0.0;
        for (int j = 0; j < n_times; ++j) {
          const double r = (data(i, j) - mu(g, j)) / sd(g, j);
          quad += r * r;
        }
        logz(i, g) = std::log(pi(g)) - logdet -
                     0.5 * (double(n_times) * kLog2Pi + quad);
      }
    }
    double ll = 0.0;
    for (int i = 0; i < n_subjects; ++i) {
      const double mx = logz.row(i).maxCoeff();
      const double sum = (logz.row(i).array() - mx).exp().sum();
      ll += mx + std::log(sum);
      z.row(i) = (logz.row(i).array() - mx - std::log(sum)).exp();
    }
    if (ll + std::max(1e-10, kLoglikTol * std::abs(ll)) < prev_ll)
      throw Error("llpa_fit: log-likelihood decreased");
    const bool converged =
        iter > 0 && std::abs(ll - prev_ll) <=
                        kLoglikTol * (std::abs(prev_ll) + 1e-12);
    prev_ll = ll;
    out.loglik = ll;
    out.posterior = z;
    if (converged || iter == kEmMaxIter - 1) break;
    m_step();
    if (out.degenerate) return out;
  }

  out.model.proportions = pi;
  out.model.means = mu;
  out.model.sds = sd;
  out.model.loglik = out.loglik;
  out.model.n_params = (G - 1) + G * n_times +
                       (variance_mode == LpaVariance::Tied ? G : G * n_times);
  return out;
}

}  // namespace

LpaFit llpa_fit(const AlignedMatrix& aligned, int G, int n_starts,
                std::uint64_t seed, LpaVariance variance_mode) {
  const int n_subjects = int(aligned.values.rows());
  if (G < 1) throw ValidationError("llpa_fit: G < 1");
  if (n_subjects < G)
    throw ValidationError("llpa_fit: N < G");
  if (!aligned.values.allFinite())
    throw ValidationError("llpa_fit: non-finite data");
  if (n_starts < 1) n_starts = 1;

  std::vector<LpaStart> starts(static_cast<std::size_t>(n_starts));
  parallel_for(std::size_t(n_starts), [&](std::size_t s) {
    starts[s] = run_lpa_start(aligned.values, G, variance_mode,
                              Rng::derive(seed, kLpaStream, std::uint64_t(s)));
  });

  int best = -1;
  for (int s = 0; s < n_starts; ++s) {
    if (starts[std::size_t(s)].degenerate) continue;
    if (best < 0 ||
        starts[std::size_t(s)].loglik > starts[std::size_t(best)].loglik)
      best = s;
  }
  if (best < 0)
    throw Error("llpa_fit: all " + std::to_string(n_starts) +
                " starts degenerate for G=" + std::to_string(G));
  return {starts[std::size_t(best)].model, starts[std::size_t(best)].posterior};
}

}  // namespace trajcluster::crosssec
