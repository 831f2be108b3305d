#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "trajcluster/core.hpp"

namespace trajcluster::dist {

// Symmetric non-negative matrix with zero diagonal.
using DistanceMatrix = Eigen::MatrixXd;
void validate_distance_matrix(const DistanceMatrix& d);

DistanceMatrix pairwise_distances(const AlignedMatrix& aligned);
// Euclidean distances between the rows of an arbitrary real matrix
// (feature rows use this entry point).
DistanceMatrix pairwise_row_distances(const Eigen::MatrixXd& rows);

enum class Linkage { Average, Single, Complete, Ward, Centroid };
Linkage linkage_from_string(const std::string& name);
std::string to_string(Linkage linkage);

// One agglomeration step. Node ids follow the usual convention: leaves are
// 0..N-1, the cluster formed by merge k gets id N+k.
struct Merge {
  int left = 0;
  int right = 0;
  double height = 0.0;
  int size = 0;  // members of the new cluster
};

struct Dendrogram {
  int n_leaves = 0;
  std::vector<Merge> merges;  // exactly n_leaves - 1
};

// Greedy agglomeration under the Lance-Williams update for the requested
// linkage. Ties are broken toward the pair whose smallest founding member
// indices are lowest. Ward and centroid recurrences run on squared
// distances; reported heights are their square roots. Merge heights are
// monotone for average/single/complete/ward; centroid may produce
// inversions.
Dendrogram ahc(const DistanceMatrix& d, Linkage linkage);

// Undoes the last G-1 merges; clusters are labelled 1..G in order of their
// smallest member index.
Partition cut_dendrogram(const Dendrogram& dendrogram, int G);

// Merge-list CSV export: left,right,height,size with 0-based node ids.
void save_dendrogram(const Dendrogram& dendrogram, std::ostream& out);

struct KMedoidsResult {
  Partition partition;
  std::vector<int> medoids;  // 0-based row indices, one per cluster
  double total_cost = 0.0;
};

// PAM build + swap. Start 0 uses the greedy build phase; further starts
// draw random medoid subsets. Each start runs best-improvement swaps until
// no exchange strictly reduces the total distance-to-medoid cost; the
// lowest-cost start wins (ties toward the lowest start index).
KMedoidsResult k_medoids(const DistanceMatrix& d, int G, int n_starts,
                         std::uint64_t seed);

// Mean silhouette value over all subjects; requires G >= 2 and every
// cluster non-empty. Members of singleton clusters contribute s(i) = 0.
double average_silhouette_width(const DistanceMatrix& d,
                                const Partition& partition);

}  // namespace trajcluster::dist
