#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trajcluster/core.hpp"

namespace trajcluster::synthgen {

struct DropoutLaw {
  double mean_day = 0.0;
  double sd_day = 0.0;
};

// One row of the generating table. beta1/beta2 (and their sds) are stored at
// the table's printed scales: hours/day x 1e-2 and hours/day^2 x 1e-4; the
// generator applies the scale factors. sigma2 is the mean subject-level
// residual variance in hours^2 with its between-subject sd in sigma2_sd.
struct ClusterSpec {
  std::string name;
  double proportion = 0.0;
  double beta0 = 0.0, beta0_sd = 0.0;
  double beta1 = 0.0, beta1_sd = 0.0;  // x 1e-2 hours/day
  double beta2 = 0.0;                  // x 1e-4 hours/day^2, no random effect
  double sigma2 = 0.0, sigma2_sd = 0.0;
  double p_attempt = 1.0;
  std::optional<DropoutLaw> dropout;

  void validate() const;
};

struct GeneratorConfig {
  int n_patients = 500;
  int n_days = 361;
  int block_days = 14;
  std::uint64_t seed = 0;

  void validate() const;
};

// The seven generating clusters of the PAP-adherence case study.
std::vector<ClusterSpec> default_specs();

struct GeneratedData {
  Dataset daily;                          // times are days 1..n_days
  Partition truth;                        // cluster index per patient, 1..K
  std::vector<std::string> cluster_names; // truth label -> spec name
};

// Draws each patient independently from a per-patient substream of the
// master seed, so patient i is identical regardless of generation order.
// Draw order per patient: cluster, intercept deviation, slope deviation,
// residual variance (truncated below at 0.25), dropout day (truncated below
// at 1), then per day: attempt uniform, observation normal. Days past
// dropout consume no randomness. Daily values are clamped to [0, 24] hours.
GeneratedData generate(const GeneratorConfig& config,
                       const std::vector<ClusterSpec>& specs);

// Averages consecutive blocks of `block_days` daily values (zeros included);
// the final partial block averages the remaining days. Block timestamps are
// the midpoint day of the block; afterwards times are normalized by the
// affine map taking the first day of the first block to 0 and the first day
// of the last block to 1 (with defaults: [1, 351] -> [0, 1]).
Dataset downsample(const Dataset& daily, int block_days);

}  // namespace trajcluster::synthgen
