#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajcluster {

// Errors raised by the toolkit. Parse/validation failures carry enough
// context (line numbers, subject ids) to locate the offending input.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct AlignmentError : Error {
  using Error::Error;
};

enum class TimeUnit { RawDays, Normalized };

// One subject's ordered series of (time, value) observations.
// times strictly increasing, values finite, both the same non-zero length.
struct Trajectory {
  std::string subject_id;
  std::vector<double> times;
  std::vector<double> values;

  std::size_t size() const { return times.size(); }
  void validate() const;
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  TimeUnit time_unit = TimeUnit::RawDays;

  std::size_t n_subjects() const { return trajectories.size(); }
  std::size_t n_observations() const;
  void validate() const;  // ids unique, non-empty, trajectories valid
};

// Complete-case representation on a shared time grid: row i holds the
// observations of subject i at every grid time.
struct AlignedMatrix {
  std::vector<std::string> subject_ids;
  std::vector<double> grid;
  Eigen::MatrixXd values;  // N x n, no gaps
};

// Hard assignment of each subject to one of G clusters, labels in 1..G.
struct Partition {
  std::vector<int> labels;
  int G = 1;

  std::size_t size() const { return labels.size(); }
  void validate() const;
  std::vector<int> cluster_sizes() const;  // length G
};

// N x G matrix of membership probabilities; rows sum to 1 within 1e-9.
using PosteriorMatrix = Eigen::MatrixXd;
void validate_posterior(const PosteriorMatrix& z);

// --- CSV ingestion (long format: subject_id,time,value) ---------------------

// Rows may arrive unsorted; they are grouped by subject (in order of first
// appearance) and sorted by time. Duplicate (subject, time) pairs and
// non-finite values are rejected.
Dataset load_trajectories(std::istream& in,
                          TimeUnit time_unit = TimeUnit::RawDays);
Dataset load_trajectories_file(const std::string& path,
                               TimeUnit time_unit = TimeUnit::RawDays);

// Writes the long CSV back out. Values are printed with round-trip precision
// so load -> save -> load is bit-identical.
void save_trajectories(const Dataset& ds, std::ostream& out);
void save_trajectories_file(const Dataset& ds, const std::string& path);

// --- Operations --------------------------------------------------------------

// Requires every subject to share the multiset of times of the first subject
// up to `tolerance`; offenders are listed in the error.
AlignedMatrix align(const Dataset& ds, double tolerance = 1e-9);

AlignedMatrix to_aligned(const Eigen::MatrixXd& values,
                         const std::vector<double>& grid);

// label i = argmax_g z(i,g), ties toward the lowest cluster index.
Partition hard_assign(const PosteriorMatrix& z);

// Hypergeometric-adjusted Rand index in [-1, 1]; 1 iff the partitions agree
// up to relabeling.
double adjusted_rand_index(const Partition& a, const Partition& b);

// Pointwise mean trajectory of each cluster (G x n); used for reporting
// cluster curves of hard-partition methods.
Eigen::MatrixXd partition_mean_curves(const AlignedMatrix& aligned,
                                      const Partition& partition);

// Round-trip double formatting used by every CSV/JSON writer (%.17g).
std::string format_double(double x);

}  // namespace trajcluster
