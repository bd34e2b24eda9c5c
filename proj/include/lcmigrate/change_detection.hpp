#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lcmigrate/raster.hpp"

namespace lcmigrate {

/// One weighted canonical correlation fit between two co-registered images.
/// Column i of `a` and `b` is the i-th canonical pair, ordered by descending
/// `rho`. Canonical variates have unit weighted variance, so the i-th MAD
/// variate a_i'(X - mean_x) - b_i'(Y - mean_y) has variance 2 (1 - rho_i).
struct MadStep {
  Eigen::MatrixXd a;
  Eigen::MatrixXd b;
  Eigen::VectorXd rho;
  Eigen::VectorXd sigma2_mad;
  Eigen::VectorXd mean_x;
  Eigen::VectorXd mean_y;
  std::size_t valid_pixels = 0;

  std::size_t dims() const { return static_cast<std::size_t>(rho.size()); }
  /// Components whose correlation is numerically 1; they carry no change
  /// information and are left out of the chi-square sum.
  std::vector<bool> degenerate() const;
};

/// Double-precision single-band image; NaN marks nodata.
struct StatImage {
  std::size_t width = 0;
  std::size_t height = 0;
  GeoTransform transform;
  std::vector<double> values;

  bool is_nodata(std::size_t i) const { return std::isnan(values[i]); }
  std::size_t valid_count() const;
};

RasterStack to_raster(const StatImage& img, const std::string& band_name = "z");
StatImage stat_from_raster(const RasterStack& stack);

struct ChiSquareImage {
  StatImage z;
  std::size_t degenerate_components = 0;
};

struct IrmadOptions {
  int max_iter = 50;
  double tol = 1e-4;
};

struct IrmadResult {
  MadStep final_step;
  StatImage z;
  int iterations = 0;
  std::vector<std::vector<double>> rho_history;
  bool converged = false;
  int df = 0;            // number of MAD variates (band count)
  int effective_df = 0;  // df minus degenerate components; used for reweighting
  std::size_t degenerate_components = 0;
  std::vector<std::string> warnings;
};

inline constexpr double kCovarianceRidge = 1e-10;   // times trace / N
inline constexpr double kMadVarianceFloor = 1e-12;
inline constexpr double kDegenerateRhoGap = 1e-8;   // 1 - rho below this is degenerate

/// Pixels that are nodata in either image are ignored. Weights are relative:
/// scaling all of them by a constant leaves the result unchanged.
MadStep weighted_cca(const RasterStack& img_x, const RasterStack& img_y,
                     std::span<const double> weights);

ChiSquareImage chi_square_image(const RasterStack& img_x, const RasterStack& img_y,
                                const MadStep& step);

/// Iterates weighted_cca / chi_square_image, reweighting each pixel by its
/// chi-square no-change probability, until max |delta rho| < tol.
IrmadResult irmad(const RasterStack& img_x, const RasterStack& img_y,
                  const IrmadOptions& options = {});

/// Regularized upper incomplete gamma Q(a, x).
double regularized_gamma_q(double a, double x);
/// P(chi2_df > z).
double chi2_survival(double z, int df);

/// Linear-interpolation empirical quantile (percentile in [0, 100]).
double empirical_percentile(std::vector<double> values, double percentile);

ChangeMask threshold_value(const StatImage& z, double threshold, MaskProvenance provenance);
ChangeMask threshold_percentile(const StatImage& z, double percentile);

struct PrOptimum {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Sweeps every distinct z as a threshold (changed when z > threshold) and
/// returns the one with the best changed-class F1; ties go to the larger
/// threshold. Entries with NaN z are ignored.
PrOptimum threshold_pr_optimal(std::span<const double> z, const std::vector<bool>& changed);

ChangeMask load_external_mask(const std::filesystem::path& path);

/// Nearest-neighbour lookup of a mask onto another grid through map
/// coordinates; cells outside the mask become nodata.
ChangeMask resample_mask(const ChangeMask& mask, std::size_t width, std::size_t height,
                         const GeoTransform& transform);

}  // namespace lcmigrate
