#include "trajcluster/selection.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>

#include "trajcluster/rng.hpp"

namespace trajcluster::selection {

namespace {
constexpr std::uint64_t kSweepStream = 0x73776565702d4721ULL;
}

double bic(double loglik, int n_params, long long n_obs) {
  if (n_obs < 1) throw ValidationError("bic: n_obs < 1");
  if (n_params < 0) throw ValidationError("bic: negative n_params");
  return double(n_params) * std::log(double(n_obs)) - 2.0 * loglik;
}

double posterior_entropy(const PosteriorMatrix& z) {
  validate_posterior(z);
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index g = 0; g < z.cols(); ++g) {
      const double v = z(i, g);
      if (v > 0.0) total -= v * std::log(v);
    }
  return total / double(z.rows());
}

std::optional<int> elbow(const std::vector<double>& scores, int g_min,
                         double threshold) {
  if (scores.size() < 3)
    throw ValidationError("elbow: need at least 3 consecutive scores");
  const double span = scores.front() - scores.back();
  for (std::size_t k = 1; k < scores.size(); ++k) {
    const double improvement = scores[k - 1] - scores[k];
    if (improvement < threshold * span) return g_min + int(k);
  }
  return std::nullopt;
}

namespace {

struct SweepContext {
  const Dataset& ds;
  const MethodConfig& config;
  // Lazily shared across G: alignment and trajectory distances.
  bool align_tried = false;
  std::optional<AlignedMatrix> aligned;
  std::optional<dist::DistanceMatrix> traj_dist;
  std::optional<features::FeatureMatrix> standardized_features;
  std::optional<dist::Dendrogram> dendrogram;

  const AlignedMatrix& require_aligned() {
    if (!align_tried) {
      align_tried = true;
      aligned = align(ds, config.align_tolerance);
    }
    if (!aligned) throw AlignmentError("dataset is not aligned");
    return *aligned;
  }
  const dist::DistanceMatrix& trajectory_distances() {
    if (!traj_dist) traj_dist = dist::pairwise_distances(require_aligned());
    return *traj_dist;
  }
  const features::FeatureMatrix& feature_matrix() {
    if (!standardized_features)
      standardized_features = features::standardize(
          features::extract_features(ds, config.feature_config));
    return *standardized_features;
  }
  const dist::Dendrogram& tree() {
    if (!dendrogram)
      dendrogram = dist::ahc(trajectory_distances(), config.linkage);
    return *dendrogram;
  }
};

bool is_mixture_method(const std::string& m) {
  return m == "gbtm" || m == "gmm";
}
bool is_asw_only(const std::string& m) {
  return m == "ahc" || m == "kmedoids" || m == "features";
}

FitRow fit_one(SweepContext& ctx, int G, int n_starts, std::uint64_t seed) {
  const MethodConfig& cfg = ctx.config;
  FitRow row;
  row.G = G;

  Partition part;
  std::optional<PosteriorMatrix> post;
  std::optional<double> loglik;
  std::optional<int> n_params;
  long long bic_n = 0;

  if (cfg.method == "kml") {
    const auto& aligned = ctx.require_aligned();
    const auto res = crosssec::kml_fit(aligned, G, n_starts, seed);
    part = res.partition;
    row.bic = res.bic_approx;
    row.curves = res.centroids;
    row.curve_times = aligned.grid;
  } else if (cfg.method == "llpa") {
    const auto& aligned = ctx.require_aligned();
    const auto res = crosssec::llpa_fit(
        aligned, G, n_starts, seed,
        cfg.tied_variances ? crosssec::LpaVariance::Tied
                           : crosssec::LpaVariance::PerTime);
    part = hard_assign(res.posterior);
    post = res.posterior;
    loglik = res.model.loglik;
    n_params = res.model.n_params;
    bic_n = cfg.bic_n == BicSampleSize::Observations
                ? static_cast<long long>(aligned.values.rows()) *
                      aligned.values.cols()
                : static_cast<long long>(aligned.values.rows());
    row.curves = res.model.means;
    row.curve_times = aligned.grid;
  } else if (cfg.method == "ahc") {
    const auto& aligned = ctx.require_aligned();
    part = dist::cut_dendrogram(ctx.tree(), G);
    row.curves = partition_mean_curves(aligned, part);
    row.curve_times = aligned.grid;
  } else if (cfg.method == "kmedoids") {
    const auto& aligned = ctx.require_aligned();
    const auto res =
        dist::k_medoids(ctx.trajectory_distances(), G, n_starts, seed);
    part = res.partition;
    row.curves = partition_mean_curves(aligned, part);
    row.curve_times = aligned.grid;
  } else if (cfg.method == "features") {
    const auto res =
        features::feature_cluster(ctx.feature_matrix(), G, n_starts, seed);
    part = res.partition;
    try {
      const auto& aligned = ctx.require_aligned();
      row.curves = partition_mean_curves(aligned, part);
      row.curve_times = aligned.grid;
    } catch (const AlignmentError&) {
      // curves unavailable for irregular data
    }
  } else if (is_mixture_method(cfg.method)) {
    mixture::FitOptions opt;
    opt.n_starts = n_starts;
    opt.seed = seed;
    opt.variance_mode = cfg.tied_variances ? mixture::MixVariance::Tied
                                           : mixture::MixVariance::PerCluster;
    const auto res =
        cfg.method == "gbtm"
            ? mixture::gbtm_fit(ctx.ds, cfg.basis, G, opt)
            : mixture::gmm_fit(ctx.ds, cfg.basis, cfg.re_spec, G, opt);
    part = hard_assign(res.posterior);
    post = res.posterior;
    loglik = res.model.loglik;
    n_params = res.model.n_params;
    bic_n = cfg.bic_n == BicSampleSize::Observations
                ? res.model.n_obs
                : static_cast<long long>(ctx.ds.n_subjects());
    const double lo = res.model.basis.t_min, hi = res.model.basis.t_max;
    std::vector<double> grid;
    for (int k = 0; k < 101; ++k)
      grid.push_back(lo + (hi - lo) * double(k) / 100.0);
    row.curves = mixture::cluster_means(res.model, grid);
    row.curve_times = grid;
  } else {
    throw ValidationError("unknown method: " + cfg.method);
  }

  row.partition = part;
  const auto sizes = part.cluster_sizes();
  row.min_cluster_size = *std::min_element(sizes.begin(), sizes.end());
  if (loglik) {
    row.loglik = loglik;
    row.n_params = n_params;
    row.bic = bic(*loglik, *n_params, bic_n);
  }
  if (post) {
    row.entropy = posterior_entropy(*post);
    int near_empty = 0;
    for (Eigen::Index g = 0; g < post->cols(); ++g)
      if (post->col(g).sum() <
          cfg.near_empty_fraction * double(post->rows()))
        ++near_empty;
    row.near_empty = near_empty;
  } else {
    int near_empty = 0;
    for (int s : sizes)
      if (double(s) < cfg.near_empty_fraction * double(part.size()))
        ++near_empty;
    row.near_empty = near_empty;
  }

  if (G >= 2) {
    try {
      const auto& d = cfg.method == "features"
                          ? dist::pairwise_row_distances(
                                ctx.feature_matrix().values)
                          : ctx.trajectory_distances();
      row.asw = dist::average_silhouette_width(d, part);
    } catch (const AlignmentError&) {
      // ASW needs a distance matrix; unavailable for irregular data.
    }
  }
  return row;
}

}  // namespace

FitReport sweep(const Dataset& ds, const MethodConfig& config, int g_min,
                int g_max, int n_starts, std::uint64_t seed) {
  if (g_min < 1 || g_max < g_min)
    throw ValidationError("sweep: invalid G range");
  if (is_asw_only(config.method) && g_min < 2)
    throw ValidationError("sweep: " + config.method +
                          " has no G=1 score; use --kmin 2");
  ds.validate();

  SweepContext ctx{ds, config};
  FitReport report;
  report.method = config.method;
  int ok_rows = 0;
  for (int G = g_min; G <= g_max; ++G) {
    const std::uint64_t sub_seed =
        Rng::derive(seed, kSweepStream, std::uint64_t(G)).next_u64();
    const auto t0 = std::chrono::steady_clock::now();
    FitRow row;
    try {
      row = fit_one(ctx, G, n_starts, sub_seed);
      ++ok_rows;
    } catch (const std::exception& e) {
      row.G = G;
      row.status = e.what();
    }
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    report.rows.push_back(std::move(row));
  }
  if (ok_rows == 0)
    throw Error("sweep: every fit failed; first error: " +
                report.rows.front().status);
  return report;
}

void apply_chooser(FitReport& report, const std::string& chooser,
                   double elbow_threshold) {
  if (chooser.empty()) return;
  report.chooser = chooser;
  if (chooser == "bic-min" || chooser == "asw-max") {
    const bool use_bic = chooser == "bic-min";
    std::optional<int> best_g;
    double best = use_bic ? std::numeric_limits<double>::infinity()
                          : -std::numeric_limits<double>::infinity();
    for (const auto& row : report.rows) {
      const auto& score = use_bic ? row.bic : row.asw;
      if (!score) continue;
      if ((use_bic && *score < best) || (!use_bic && *score > best)) {
        best = *score;
        best_g = row.G;
      }
    }
    report.chosen_G = best_g;
    return;
  }
  if (chooser == "elbow") {
    std::vector<double> scores;
    int g_min = 0;
    for (const auto& row : report.rows) {
      if (!row.bic) continue;
      if (scores.empty()) g_min = row.G;
      scores.push_back(*row.bic);
    }
    report.chosen_G = elbow(scores, g_min, elbow_threshold);
    return;
  }
  throw ValidationError("unknown chooser: " + chooser +
                        " (expected bic-min, asw-max, elbow)");
}

namespace {
std::string opt_str(const std::optional<double>& v) {
  return v ? format_double(*v) : "";
}
std::string opt_str(const std::optional<int>& v) {
  return v ? std::to_string(*v) : "";
}
}  // namespace

void save_report_csv(const FitReport& report, std::ostream& out) {
  out << "method,G,loglik,n_params,bic,asw,entropy,min_cluster_size,"
         "near_empty,wall_seconds,chosen,status\n";
  for (const auto& row : report.rows) {
    const bool chosen = report.chosen_G && *report.chosen_G == row.G;
    out << report.method << ',' << row.G << ',' << opt_str(row.loglik) << ','
        << opt_str(row.n_params) << ',' << opt_str(row.bic) << ','
        << opt_str(row.asw) << ',' << opt_str(row.entropy) << ','
        << opt_str(row.min_cluster_size) << ',' << opt_str(row.near_empty)
        << ',' << format_double(row.wall_seconds) << ',' << (chosen ? 1 : 0)
        << ',' << row.status << '\n';
  }
}

nlohmann::json report_to_json(const FitReport& report) {
  nlohmann::json j;
  j["method"] = report.method;
  if (report.chosen_G) j["chosen_G"] = *report.chosen_G;
  if (!report.chooser.empty()) j["chooser"] = report.chooser;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : report.rows) {
    nlohmann::json r;
    r["G"] = row.G;
    if (row.loglik) r["loglik"] = *row.loglik;
    if (row.n_params) r["n_params"] = *row.n_params;
    if (row.bic) r["bic"] = *row.bic;
    if (row.asw) r["asw"] = *row.asw;
    if (row.entropy) r["entropy"] = *row.entropy;
    if (row.min_cluster_size) r["min_cluster_size"] = *row.min_cluster_size;
    if (row.near_empty) r["near_empty"] = *row.near_empty;
    r["wall_seconds"] = row.wall_seconds;
    r["status"] = row.status;
    j["rows"].push_back(std::move(r));
  }
  return j;
}

void save_curves_csv(const FitReport& report, std::ostream& out) {
  out << "G,cluster,time,value\n";
  for (const auto& row : report.rows) {
    if (row.curves.size() == 0) continue;
    for (Eigen::Index g = 0; g < row.curves.rows(); ++g)
      for (std::size_t k = 0; k < row.curve_times.size(); ++k)
        out << row.G << ',' << (g + 1) << ','
            << format_double(row.curve_times[k]) << ','
            << format_double(row.curves(g, Eigen::Index(k))) << '\n';
  }
}

}  // namespace trajcluster::selection
