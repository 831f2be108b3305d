#include "trajcluster/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "trajcluster/parallel.hpp"
#include "trajcluster/rng.hpp"

namespace trajcluster::synthgen {

namespace {
constexpr double kBeta1Scale = 1e-2;
constexpr double kBeta2Scale = 1e-4;
constexpr double kSigma2Floor = 0.25;
constexpr double kMaxHours = 24.0;
constexpr std::uint64_t kPatientStream = 0x70617469656e7453ULL;
}  // namespace

void ClusterSpec::validate() const {
  if (!(proportion > 0.0 && proportion <= 1.0))
    throw ValidationError("cluster " + name + ": proportion outside (0,1]");
  if (!(p_attempt >= 0.0 && p_attempt <= 1.0))
    throw ValidationError("cluster " + name + ": p_attempt outside [0,1]");
  if (beta0_sd < 0.0 || beta1_sd < 0.0 || sigma2_sd < 0.0)
    throw ValidationError("cluster " + name + ": negative sd");
  if (!(sigma2 > 0.0))
    throw ValidationError("cluster " + name + ": sigma2 mean must be > 0");
  if (dropout && dropout->sd_day < 0.0)
    throw ValidationError("cluster " + name + ": negative dropout sd");
}

void GeneratorConfig::validate() const {
  if (n_patients < 1) throw ValidationError("generator: n_patients < 1");
  if (n_days < 1) throw ValidationError("generator: n_days < 1");
  if (block_days < 1) throw ValidationError("generator: block_days < 1");
}

std::vector<ClusterSpec> default_specs() {
  std::vector<ClusterSpec> specs;
  specs.push_back({"Good users", 0.24, 6.6, 0.54, 0.0, 0.16, 0.0, 2.0, 0.82,
                   0.97, std::nullopt});
  specs.push_back({"Slow improvers", 0.13, 4.8, 1.0, 1.7, 0.16, -0.30, 3.6,
                   1.3, 0.94, std::nullopt});
  specs.push_back({"Slow decliners", 0.14, 6.1, 0.63, -1.9, 0.14, 0.30, 3.2,
                   0.85, 0.77, std::nullopt});
  specs.push_back({"Variable users", 0.17, 4.4, 0.87, 0.96, 0.0, -0.30, 3.4,
                   1.2, 0.82, std::nullopt});
  specs.push_back({"Occasional attempters", 0.08, 3.2, 1.1, -0.30, 0.91, 0.0,
                   3.6, 1.8, 0.29, std::nullopt});
  specs.push_back({"Early drop-outs", 0.13, 4.0, 1.1, -0.14, 1.0, -1.0, 5.0,
                   2.6, 0.69, DropoutLaw{80.0, 30.0}});
  specs.push_back({"Non-users", 0.11, 2.5, 0.93, -1.5, 1.0, -1.0, 3.0, 1.7,
                   0.70, DropoutLaw{20.0, 10.0}});
  return specs;
}

GeneratedData generate(const GeneratorConfig& config,
                       const std::vector<ClusterSpec>& specs) {
  config.validate();
  if (specs.empty()) throw ValidationError("generator: no cluster specs");
  std::vector<double> props;
  double total = 0.0;
  for (const auto& s : specs) {
    s.validate();
    props.push_back(s.proportion);
    total += s.proportion;
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw ValidationError("generator: proportions sum to " +
                          format_double(total) + ", expected 1");

  GeneratedData out;
  out.daily.time_unit = TimeUnit::RawDays;
  out.daily.trajectories.resize(std::size_t(config.n_patients));
  out.truth.G = int(specs.size());
  out.truth.labels.assign(std::size_t(config.n_patients), 1);
  for (const auto& s : specs) out.cluster_names.push_back(s.name);

  parallel_for(std::size_t(config.n_patients), [&](std::size_t i) {
    Rng rng = Rng::derive(config.seed, kPatientStream, std::uint64_t(i));
    const std::size_t g = rng.categorical(props);
    const ClusterSpec& spec = specs[g];

    const double b0 = rng.normal(spec.beta0, spec.beta0_sd);
    const double b1 = rng.normal(spec.beta1, spec.beta1_sd) * kBeta1Scale;
    const double b2 = spec.beta2 * kBeta2Scale;
    const double sigma2 =
        rng.truncated_normal_below(spec.sigma2, spec.sigma2_sd, kSigma2Floor);
    const double sigma = std::sqrt(sigma2);
    double dropout_day = std::numeric_limits<double>::infinity();
    if (spec.dropout)
      dropout_day = rng.truncated_normal_below(spec.dropout->mean_day,
                                               spec.dropout->sd_day, 1.0);

    Trajectory traj;
    traj.subject_id = "s" + std::to_string(i + 1);
    traj.times.reserve(std::size_t(config.n_days));
    traj.values.reserve(std::size_t(config.n_days));
    for (int d = 1; d <= config.n_days; ++d) {
      traj.times.push_back(double(d));
      if (double(d) > dropout_day) {
        traj.values.push_back(0.0);
        continue;
      }
      if (rng.uniform() >= spec.p_attempt) {
        traj.values.push_back(0.0);
        continue;
      }
      double v = b0 + b1 * d + b2 * double(d) * double(d) + sigma * rng.normal();
      v = std::clamp(v, 0.0, kMaxHours);
      traj.values.push_back(v);
    }
    out.daily.trajectories[i] = std::move(traj);
    out.truth.labels[i] = int(g) + 1;
  });
  return out;
}

Dataset downsample(const Dataset& daily, int block_days) {
  daily.validate();
  if (block_days < 1) throw ValidationError("downsample: block_days < 1");

  Dataset out;
  out.time_unit = TimeUnit::Normalized;
  out.trajectories.reserve(daily.n_subjects());

  for (const auto& traj : daily.trajectories) {
    const std::size_t n_days = traj.size();
    const std::size_t n_blocks =
        (n_days + std::size_t(block_days) - 1) / std::size_t(block_days);
    Trajectory ds;
    ds.subject_id = traj.subject_id;
    for (std::size_t k = 0; k < n_blocks; ++k) {
      const std::size_t lo = k * std::size_t(block_days);
      const std::size_t hi = std::min(lo + std::size_t(block_days), n_days);
      double sum = 0.0;
      for (std::size_t j = lo; j < hi; ++j) sum += traj.values[j];
      ds.values.push_back(sum / double(hi - lo));
      ds.times.push_back(0.5 * (traj.times[lo] + traj.times[hi - 1]));
    }
    // First days of first and last block define the normalization range.
    const double lo_day = traj.times.front();
    const double hi_day = traj.times[std::size_t(block_days) *
                                     (n_blocks - 1)];
    const double span = hi_day - lo_day;
    for (auto& t : ds.times) t = span > 0.0 ? (t - lo_day) / span : 0.0;
    out.trajectories.push_back(std::move(ds));
  }
  return out;
}

}  // namespace trajcluster::synthgen
