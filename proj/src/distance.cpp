#include "trajcluster/distance.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>

#include "trajcluster/rng.hpp"

namespace trajcluster::dist {

void validate_distance_matrix(const DistanceMatrix& d) {
  if (d.rows() != d.cols())
    throw ValidationError("distance matrix: not square");
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    if (d(i, i) != 0.0)
      throw ValidationError("distance matrix: non-zero diagonal at " +
                            std::to_string(i));
    for (Eigen::Index j = i + 1; j < d.cols(); ++j) {
      if (!std::isfinite(d(i, j)) || d(i, j) < 0.0)
        throw ValidationError("distance matrix: invalid entry at (" +
                              std::to_string(i) + "," + std::to_string(j) +
                              ")");
      if (d(i, j) != d(j, i))
        throw ValidationError("distance matrix: asymmetric at (" +
                              std::to_string(i) + "," + std::to_string(j) +
                              ")");
    }
  }
}

DistanceMatrix pairwise_row_distances(const Eigen::MatrixXd& rows) {
  const Eigen::Index n = rows.rows();
  if (n < 2) throw ValidationError("pairwise distances: need >= 2 rows");
  if (!rows.allFinite())
    throw ValidationError("pairwise distances: non-finite entries");
  DistanceMatrix d = DistanceMatrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (rows.row(i) - rows.row(j)).norm();
      d(i, j) = v;
      d(j, i) = v;
    }
  return d;
}

DistanceMatrix pairwise_distances(const AlignedMatrix& aligned) {
  return pairwise_row_distances(aligned.values);
}

Linkage linkage_from_string(const std::string& name) {
  if (name == "average") return Linkage::Average;
  if (name == "single") return Linkage::Single;
  if (name == "complete") return Linkage::Complete;
  if (name == "ward") return Linkage::Ward;
  if (name == "centroid") return Linkage::Centroid;
  throw ValidationError("unknown linkage: " + name);
}

std::string to_string(Linkage linkage) {
  switch (linkage) {
    case Linkage::Average: return "average";
    case Linkage::Single: return "single";
    case Linkage::Complete: return "complete";
    case Linkage::Ward: return "ward";
    case Linkage::Centroid: return "centroid";
  }
  return "?";
}

namespace {

// Lance-Williams coefficients: d(k, r+s) =
//   ar*d(k,r) + as*d(k,s) + b*d(r,s) + c*|d(k,r)-d(k,s)|
struct LWCoef {
  double ar, as, b, c;
};

LWCoef lw_coefficients(Linkage linkage, double nr, double ns, double nk) {
  switch (linkage) {
    case Linkage::Single:
      return {0.5, 0.5, 0.0, -0.5};
    case Linkage::Complete:
      return {0.5, 0.5, 0.0, 0.5};
    case Linkage::Average:
      return {nr / (nr + ns), ns / (nr + ns), 0.0, 0.0};
    case Linkage::Centroid:
      return {nr / (nr + ns), ns / (nr + ns),
              -nr * ns / ((nr + ns) * (nr + ns)), 0.0};
    case Linkage::Ward:
      return {(nr + nk) / (nr + ns + nk), (ns + nk) / (nr + ns + nk),
              -nk / (nr + ns + nk), 0.0};
  }
  return {0.5, 0.5, 0.0, 0.0};
}

bool squared_scale(Linkage linkage) {
  return linkage == Linkage::Ward || linkage == Linkage::Centroid;
}

}  // namespace

Dendrogram ahc(const DistanceMatrix& dist, Linkage linkage) {
  validate_distance_matrix(dist);
  const int n = int(dist.rows());
  if (n < 2) throw ValidationError("ahc: need at least 2 subjects");

  // Working copy; ward/centroid agglomerate on squared distances.
  Eigen::MatrixXd d = dist;
  if (squared_scale(linkage)) d = d.array().square().matrix();

  std::vector<bool> active(std::size_t(n), true);
  std::vector<int> size(std::size_t(n), 1);
  std::vector<int> node_id(static_cast<std::size_t>(n));    // current dendrogram node
  std::vector<int> founder(static_cast<std::size_t>(n));    // smallest member index
  std::iota(node_id.begin(), node_id.end(), 0);
  std::iota(founder.begin(), founder.end(), 0);

  Dendrogram out;
  out.n_leaves = n;
  out.merges.reserve(std::size_t(n - 1));

  for (int step = 0; step < n - 1; ++step) {
    int best_i = -1, best_j = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (!active[std::size_t(i)]) continue;
      for (int j = i + 1; j < n; ++j) {
        if (!active[std::size_t(j)]) continue;
        const double v = d(i, j);
        // Tie-break on the founding member pair, lowest first.
        if (v < best ||
            (v == best &&
             std::minmax(founder[std::size_t(i)], founder[std::size_t(j)]) <
                 std::minmax(founder[std::size_t(best_i)],
                             founder[std::size_t(best_j)]))) {
          best = v;
          best_i = i;
          best_j = j;
        }
      }
    }

    const double nr = size[std::size_t(best_i)];
    const double ns = size[std::size_t(best_j)];
    for (int k = 0; k < n; ++k) {
      if (!active[std::size_t(k)] || k == best_i || k == best_j) continue;
      const auto c = lw_coefficients(linkage, nr, ns, size[std::size_t(k)]);
      const double dkr = d(best_i, k), dks = d(best_j, k);
      const double upd =
          c.ar * dkr + c.as * dks + c.b * best + c.c * std::abs(dkr - dks);
      d(best_i, k) = upd;
      d(k, best_i) = upd;
    }

    Merge m;
    m.left = node_id[std::size_t(best_i)];
    m.right = node_id[std::size_t(best_j)];
    m.height = squared_scale(linkage) ? std::sqrt(std::max(best, 0.0)) : best;
    m.size = int(nr + ns);
    out.merges.push_back(m);

    active[std::size_t(best_j)] = false;
    size[std::size_t(best_i)] = int(nr + ns);
    node_id[std::size_t(best_i)] = n + step;
    founder[std::size_t(best_i)] =
        std::min(founder[std::size_t(best_i)], founder[std::size_t(best_j)]);
  }
  return out;
}

Partition cut_dendrogram(const Dendrogram& dendrogram, int G) {
  const int n = dendrogram.n_leaves;
  if (G < 1 || G > n)
    throw ValidationError("cut_dendrogram: G=" + std::to_string(G) +
                          " outside 1.." + std::to_string(n));
  // Union-find over leaves, replaying all but the last G-1 merges.
  std::vector<int> parent(static_cast<std::size_t>(2 * n - 1));
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[std::size_t(x)] != x) {
      parent[std::size_t(x)] = parent[std::size_t(parent[std::size_t(x)])];
      x = parent[std::size_t(x)];
    }
    return x;
  };
  const int keep = n - G;
  for (int k = 0; k < keep; ++k) {
    const auto& m = dendrogram.merges[std::size_t(k)];
    const int root = n + k;
    parent[std::size_t(find(m.left))] = root;
    parent[std::size_t(find(m.right))] = root;
  }

  // Label clusters 1..G by smallest member index.
  std::vector<int> root_of(static_cast<std::size_t>(n));
  std::vector<int> order;  // roots in order of first appearance over leaves
  for (int i = 0; i < n; ++i) {
    root_of[std::size_t(i)] = find(i);
    if (std::find(order.begin(), order.end(), root_of[std::size_t(i)]) ==
        order.end())
      order.push_back(root_of[std::size_t(i)]);
  }
  Partition p;
  p.G = G;
  p.labels.resize(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    const auto it =
        std::find(order.begin(), order.end(), root_of[std::size_t(i)]);
    p.labels[std::size_t(i)] = int(it - order.begin()) + 1;
  }
  p.validate();
  return p;
}

void save_dendrogram(const Dendrogram& dendrogram, std::ostream& out) {
  out << "left,right,height,size\n";
  for (const auto& m : dendrogram.merges)
    out << m.left << ',' << m.right << ',' << format_double(m.height) << ','
        << m.size << '\n';
}

namespace {

double kmedoids_cost(const DistanceMatrix& d, const std::vector<int>& medoids,
                     std::vector<int>* labels_out) {
  const int n = int(d.rows());
  double cost = 0.0;
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_g = 0;
    for (std::size_t g = 0; g < medoids.size(); ++g) {
      const double v = d(i, medoids[g]);
      if (v < best) {
        best = v;
        best_g = int(g);
      }
    }
    cost += best;
    if (labels_out) (*labels_out)[std::size_t(i)] = best_g + 1;
  }
  return cost;
}

// Greedy PAM build: start from the most central point, then repeatedly add
// the point with the largest cost reduction.
std::vector<int> pam_build(const DistanceMatrix& d, int G) {
  const int n = int(d.rows());
  std::vector<int> medoids;
  std::vector<double> nearest(std::size_t(n),
                              std::numeric_limits<double>::infinity());
  int first = 0;
  double first_cost = std::numeric_limits<double>::infinity();
  for (int c = 0; c < n; ++c) {
    const double cost = d.col(c).sum();
    if (cost < first_cost) {
      first_cost = cost;
      first = c;
    }
  }
  medoids.push_back(first);
  for (int i = 0; i < n; ++i) nearest[std::size_t(i)] = d(i, first);

  while (int(medoids.size()) < G) {
    int best_c = -1;
    double best_gain = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < n; ++c) {
      if (std::find(medoids.begin(), medoids.end(), c) != medoids.end())
        continue;
      double gain = 0.0;
      for (int i = 0; i < n; ++i)
        gain += std::max(0.0, nearest[std::size_t(i)] - d(i, c));
      if (gain > best_gain) {
        best_gain = gain;
        best_c = c;
      }
    }
    medoids.push_back(best_c);
    for (int i = 0; i < n; ++i)
      nearest[std::size_t(i)] = std::min(nearest[std::size_t(i)], d(i, best_c));
  }
  return medoids;
}

void pam_swap(const DistanceMatrix& d, std::vector<int>& medoids) {
  const int n = int(d.rows());
  double cost = kmedoids_cost(d, medoids, nullptr);
  for (;;) {
    double best_cost = cost;
    int best_m = -1, best_h = -1;
    for (std::size_t m = 0; m < medoids.size(); ++m) {
      const int old = medoids[m];
      for (int h = 0; h < n; ++h) {
        if (std::find(medoids.begin(), medoids.end(), h) != medoids.end())
          continue;
        medoids[m] = h;
        const double c = kmedoids_cost(d, medoids, nullptr);
        if (c < best_cost) {
          best_cost = c;
          best_m = int(m);
          best_h = h;
        }
        medoids[m] = old;
      }
    }
    if (best_m < 0) break;
    medoids[std::size_t(best_m)] = best_h;
    cost = best_cost;
  }
}

}  // namespace

KMedoidsResult k_medoids(const DistanceMatrix& d, int G, int n_starts,
                         std::uint64_t seed) {
  validate_distance_matrix(d);
  const int n = int(d.rows());
  if (G < 1 || G > n)
    throw ValidationError("k_medoids: G=" + std::to_string(G) +
                          " outside 1.." + std::to_string(n));
  if (n_starts < 1) n_starts = 1;

  KMedoidsResult best;
  best.total_cost = std::numeric_limits<double>::infinity();
  for (int s = 0; s < n_starts; ++s) {
    std::vector<int> medoids;
    if (s == 0) {
      medoids = pam_build(d, G);
    } else {
      Rng rng = Rng::derive(seed, 0x6d65646f69647321ULL, std::uint64_t(s));
      std::vector<int> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      for (int k = 0; k < G; ++k) {
        const std::size_t j = k + rng.uniform_index(std::size_t(n - k));
        std::swap(perm[std::size_t(k)], perm[j]);
      }
      medoids.assign(perm.begin(), perm.begin() + G);
    }
    pam_swap(d, medoids);
    std::vector<int> labels(static_cast<std::size_t>(n));
    const double cost = kmedoids_cost(d, medoids, &labels);
    if (cost < best.total_cost) {
      std::sort(medoids.begin(), medoids.end());
      best.medoids = medoids;
      best.total_cost = kmedoids_cost(d, medoids, &labels);
      best.partition.G = G;
      best.partition.labels = labels;
    }
  }
  best.partition.validate();
  return best;
}

double average_silhouette_width(const DistanceMatrix& d,
                                const Partition& partition) {
  validate_distance_matrix(d);
  partition.validate();
  const int n = int(d.rows());
  if (partition.labels.size() != std::size_t(n))
    throw ValidationError("silhouette: partition size mismatch");
  if (partition.G < 2)
    throw ValidationError("silhouette: undefined for G < 2");
  const auto sizes = partition.cluster_sizes();
  for (int g = 0; g < partition.G; ++g)
    if (sizes[std::size_t(g)] == 0)
      throw ValidationError("silhouette: empty cluster " +
                            std::to_string(g + 1));

  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int gi = partition.labels[std::size_t(i)] - 1;
    if (sizes[std::size_t(gi)] == 1) continue;  // singleton: s(i) = 0
    std::vector<double> mean_to(std::size_t(partition.G), 0.0);
    for (int j = 0; j < n; ++j)
      mean_to[std::size_t(partition.labels[std::size_t(j)] - 1)] += d(i, j);
    double a = mean_to[std::size_t(gi)] / double(sizes[std::size_t(gi)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int g = 0; g < partition.G; ++g) {
      if (g == gi) continue;
      b = std::min(b, mean_to[std::size_t(g)] / double(sizes[std::size_t(g)]));
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / double(n);
}

}  // namespace trajcluster::dist
