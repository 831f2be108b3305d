#include "trajcluster/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace trajcluster {

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

void Trajectory::validate() const {
  if (times.size() != values.size())
    throw ValidationError("subject " + subject_id +
                          ": times/values length mismatch");
  if (times.empty())
    throw ValidationError("subject " + subject_id + ": empty trajectory");
  for (std::size_t j = 0; j < times.size(); ++j) {
    if (!std::isfinite(times[j]) || !std::isfinite(values[j]))
      throw ValidationError("subject " + subject_id +
                            ": non-finite observation at position " +
                            std::to_string(j));
    if (j > 0 && !(times[j] > times[j - 1]))
      throw ValidationError("subject " + subject_id +
                            ": times not strictly increasing at t=" +
                            format_double(times[j]));
  }
}

std::size_t Dataset::n_observations() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.size();
  return n;
}

void Dataset::validate() const {
  if (trajectories.empty()) throw ValidationError("dataset: no trajectories");
  std::unordered_set<std::string> seen;
  for (const auto& t : trajectories) {
    t.validate();
    if (!seen.insert(t.subject_id).second)
      throw ValidationError("dataset: duplicate subject id " + t.subject_id);
  }
}

void Partition::validate() const {
  if (G < 1) throw ValidationError("partition: G must be >= 1");
  for (int lab : labels)
    if (lab < 1 || lab > G)
      throw ValidationError("partition: label " + std::to_string(lab) +
                            " outside 1.." + std::to_string(G));
}

std::vector<int> Partition::cluster_sizes() const {
  std::vector<int> sizes(std::size_t(G), 0);
  for (int lab : labels) ++sizes[std::size_t(lab - 1)];
  return sizes;
}

void validate_posterior(const PosteriorMatrix& z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double row = 0.0;
    for (Eigen::Index g = 0; g < z.cols(); ++g) {
      const double v = z(i, g);
      if (!(v >= 0.0 && v <= 1.0))
        throw ValidationError("posterior: entry outside [0,1] at row " +
                              std::to_string(i));
      row += v;
    }
    if (std::abs(row - 1.0) > 1e-9)
      throw ValidationError("posterior: row " + std::to_string(i) +
                            " sums to " + format_double(row));
  }
}

namespace {

// Splits a CSV line on commas. Quoting is not supported; the long format
// carries no free text beyond subject ids.
std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string strip(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& s, std::size_t line_no,
                    const char* what) {
  const std::string t = strip(s);
  if (t.empty())
    throw ParseError("line " + std::to_string(line_no) + ": empty " + what);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size())
    throw ParseError("line " + std::to_string(line_no) + ": malformed " +
                     what + " '" + t + "'");
  return v;
}

}  // namespace

Dataset load_trajectories(std::istream& in, TimeUnit time_unit) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("line 1: missing header");
  {
    auto header = split_csv(line);
    for (auto& h : header) h = strip(h);
    if (header.size() != 3 || header[0] != "subject_id" ||
        header[1] != "time" || header[2] != "value")
      throw ParseError("line 1: expected header subject_id,time,value");
  }

  Dataset ds;
  ds.time_unit = time_unit;
  std::unordered_map<std::string, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (strip(line).empty()) continue;
    auto fields = split_csv(line);
    if (fields.size() != 3)
      throw ParseError("line " + std::to_string(line_no) + ": expected " +
                       "3 fields, got " + std::to_string(fields.size()));
    const std::string id = strip(fields[0]);
    if (id.empty())
      throw ParseError("line " + std::to_string(line_no) +
                       ": empty subject_id");
    const double t = parse_double(fields[1], line_no, "time");
    const double v = parse_double(fields[2], line_no, "value");
    if (!std::isfinite(t))
      throw ValidationError("line " + std::to_string(line_no) +
                            ": non-finite time for subject " + id);
    if (!std::isfinite(v))
      throw ValidationError("line " + std::to_string(line_no) +
                            ": non-finite value for subject " + id);
    auto [it, inserted] = index.try_emplace(id, ds.trajectories.size());
    if (inserted) ds.trajectories.push_back(Trajectory{id, {}, {}});
    auto& traj = ds.trajectories[it->second];
    traj.times.push_back(t);
    traj.values.push_back(v);
  }
  if (ds.trajectories.empty()) throw ValidationError("dataset: no rows");

  for (auto& traj : ds.trajectories) {
    std::vector<std::size_t> order(traj.times.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
      return traj.times[a] < traj.times[b];
    });
    std::vector<double> ts, vs;
    ts.reserve(order.size());
    vs.reserve(order.size());
    for (auto k : order) {
      ts.push_back(traj.times[k]);
      vs.push_back(traj.values[k]);
    }
    for (std::size_t j = 1; j < ts.size(); ++j)
      if (ts[j] == ts[j - 1])
        throw ValidationError("subject " + traj.subject_id +
                              ": duplicate time " + format_double(ts[j]));
    traj.times = std::move(ts);
    traj.values = std::move(vs);
  }
  ds.validate();
  return ds;
}

Dataset load_trajectories_file(const std::string& path, TimeUnit time_unit) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return load_trajectories(in, time_unit);
}

void save_trajectories(const Dataset& ds, std::ostream& out) {
  out << "subject_id,time,value\n";
  for (const auto& traj : ds.trajectories)
    for (std::size_t j = 0; j < traj.size(); ++j)
      out << traj.subject_id << ',' << format_double(traj.times[j]) << ','
          << format_double(traj.values[j]) << '\n';
}

void save_trajectories_file(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  save_trajectories(ds, out);
}

AlignedMatrix align(const Dataset& ds, double tolerance) {
  ds.validate();
  const auto& grid = ds.trajectories.front().times;
  const std::size_t n = grid.size();
  std::vector<std::string> offenders;
  AlignedMatrix out;
  out.grid = grid;
  out.values.resize(Eigen::Index(ds.n_subjects()), Eigen::Index(n));
  for (std::size_t i = 0; i < ds.n_subjects(); ++i) {
    const auto& traj = ds.trajectories[i];
    out.subject_ids.push_back(traj.subject_id);
    if (traj.size() != n) {
      offenders.push_back(traj.subject_id + " (" +
                          std::to_string(traj.size()) + " of " +
                          std::to_string(n) + " times)");
      continue;
    }
    bool bad = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(traj.times[j] - grid[j]) > tolerance) {
        bad = true;
        break;
      }
      out.values(Eigen::Index(i), Eigen::Index(j)) = traj.values[j];
    }
    if (bad) offenders.push_back(traj.subject_id + " (grid mismatch)");
  }
  if (!offenders.empty()) {
    std::string msg = "alignment failed for " +
                      std::to_string(offenders.size()) + " subject(s):";
    for (const auto& o : offenders) msg += " " + o + ";";
    throw AlignmentError(msg);
  }
  return out;
}

AlignedMatrix to_aligned(const Eigen::MatrixXd& values,
                         const std::vector<double>& grid) {
  if (std::size_t(values.cols()) != grid.size())
    throw ValidationError("to_aligned: grid/columns mismatch");
  AlignedMatrix out;
  out.grid = grid;
  out.values = values;
  for (Eigen::Index i = 0; i < values.rows(); ++i)
    out.subject_ids.push_back("s" + std::to_string(i + 1));
  return out;
}

Partition hard_assign(const PosteriorMatrix& z) {
  validate_posterior(z);
  Partition p;
  p.G = int(z.cols());
  p.labels.reserve(std::size_t(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    int best = 0;
    for (Eigen::Index g = 1; g < z.cols(); ++g)
      if (z(i, g) > z(i, best)) best = int(g);
    p.labels.push_back(best + 1);
  }
  return p;
}

double adjusted_rand_index(const Partition& a, const Partition& b) {
  a.validate();
  b.validate();
  if (a.labels.size() != b.labels.size())
    throw ValidationError("adjusted_rand_index: partitions of different size");
  const std::size_t n = a.labels.size();
  if (n == 0) throw ValidationError("adjusted_rand_index: empty partitions");

  Eigen::MatrixXd cont = Eigen::MatrixXd::Zero(a.G, b.G);
  for (std::size_t i = 0; i < n; ++i)
    cont(a.labels[i] - 1, b.labels[i] - 1) += 1.0;

  auto choose2 = [](double m) { return m * (m - 1.0) / 2.0; };
  double sum_ij = 0.0;
  for (Eigen::Index r = 0; r < cont.rows(); ++r)
    for (Eigen::Index c = 0; c < cont.cols(); ++c) sum_ij += choose2(cont(r, c));
  double sum_a = 0.0, sum_b = 0.0;
  for (Eigen::Index r = 0; r < cont.rows(); ++r)
    sum_a += choose2(cont.row(r).sum());
  for (Eigen::Index c = 0; c < cont.cols(); ++c)
    sum_b += choose2(cont.col(c).sum());
  const double total = choose2(double(n));
  const double expected = sum_a * sum_b / total;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;  // both trivial partitions
  return (sum_ij - expected) / (max_index - expected);
}

Eigen::MatrixXd partition_mean_curves(const AlignedMatrix& aligned,
                                      const Partition& partition) {
  partition.validate();
  if (partition.labels.size() != std::size_t(aligned.values.rows()))
    throw ValidationError("partition_mean_curves: size mismatch");
  Eigen::MatrixXd curves =
      Eigen::MatrixXd::Zero(partition.G, aligned.values.cols());
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(partition.G);
  for (Eigen::Index i = 0; i < aligned.values.rows(); ++i) {
    const int g = partition.labels[std::size_t(i)] - 1;
    curves.row(g) += aligned.values.row(i);
    counts(g) += 1.0;
  }
  for (int g = 0; g < partition.G; ++g)
    if (counts(g) > 0.0) curves.row(g) /= counts(g);
  return curves;
}

}  // namespace trajcluster
