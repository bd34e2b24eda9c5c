#include "lcmigrate/change_detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lcmigrate/error.hpp"
#include "lcmigrate/parallel.hpp"

namespace lcmigrate {

namespace {

constexpr std::size_t kChunk = 8192;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string shape_of(const RasterStack& r) {
  std::ostringstream s;
  s << r.width() << "x" << r.height() << "x" << r.band_count();
  return s.str();
}

void check_pair(const RasterStack& x, const RasterStack& y) {
  if (x.width() != y.width() || x.height() != y.height() || x.band_count() != y.band_count()) {
    throw DataError("image shapes differ: t0 is " + shape_of(x) + ", t1 is " + shape_of(y));
  }
}

std::size_t chunk_count(std::size_t n) { return (n + kChunk - 1) / kChunk; }

// Makes the largest-magnitude entry of column i of `a` positive, flipping the
// paired column of `b` with it.
void fix_column_sign(Eigen::MatrixXd& a, Eigen::MatrixXd& b, Eigen::Index i) {
  Eigen::Index arg = 0;
  a.col(i).cwiseAbs().maxCoeff(&arg);
  if (a(arg, i) < 0.0) {
    a.col(i) = -a.col(i);
    b.col(i) = -b.col(i);
  }
}

}  // namespace

std::vector<bool> MadStep::degenerate() const {
  std::vector<bool> out(dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - rho(i)) < kDegenerateRhoGap;
  return out;
}

std::size_t StatImage::valid_count() const {
  return static_cast<std::size_t>(
      std::count_if(values.begin(), values.end(), [](double v) { return !std::isnan(v); }));
}

RasterStack to_raster(const StatImage& img, const std::string& band_name) {
  std::vector<float> data(img.values.begin(), img.values.end());
  return RasterStack(img.width, img.height, {BandSpec{band_name, {}, {}}}, std::move(data),
                     img.transform);
}

StatImage stat_from_raster(const RasterStack& stack) {
  if (stack.band_count() != 1) throw DataError("statistic raster must have exactly one band");
  StatImage img{stack.width(), stack.height(), stack.transform(), {}};
  auto band = stack.band(0);
  img.values.assign(band.begin(), band.end());
  return img;
}

MadStep weighted_cca(const RasterStack& img_x, const RasterStack& img_y,
                     std::span<const double> weights) {
  check_pair(img_x, img_y);
  const std::size_t n_pix = img_x.pixel_count();
  const Eigen::Index nb = static_cast<Eigen::Index>(img_x.band_count());
  if (weights.size() != n_pix) {
    throw DataError("weights: expected " + std::to_string(n_pix) + " entries, got " +
                    std::to_string(weights.size()));
  }
  auto usable = [&](std::size_t p) {
    return !img_x.is_nodata(p) && !img_y.is_nodata(p) && weights[p] > 0.0;
  };
  for (std::size_t p = 0; p < n_pix; ++p) {
    if (!(weights[p] >= 0.0) || !std::isfinite(weights[p])) {
      throw DataError("weights must be finite and non-negative (pixel " + std::to_string(p) + ")");
    }
  }

  const std::size_t chunks = chunk_count(n_pix);
  const Eigen::Index dim = 2 * nb;

  // Pass 1: weighted means. Per-chunk partials are combined in chunk order so
  // the result does not depend on the thread count.
  std::vector<Eigen::VectorXd> part_sum(chunks, Eigen::VectorXd::Zero(dim));
  std::vector<double> part_w(chunks, 0.0);
  std::vector<std::size_t> part_n(chunks, 0);
  parallel_for(0, chunks, [&](std::size_t c) {
    const std::size_t lo = c * kChunk, hi = std::min(n_pix, lo + kChunk);
    for (std::size_t p = lo; p < hi; ++p) {
      if (!usable(p)) continue;
      const double w = weights[p];
      for (Eigen::Index b = 0; b < nb; ++b) {
        part_sum[c](b) += w * img_x.value(b, p);
        part_sum[c](nb + b) += w * img_y.value(b, p);
      }
      part_w[c] += w;
      ++part_n[c];
    }
  });
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
  double wsum = 0.0;
  std::size_t valid = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    sum += part_sum[c];
    wsum += part_w[c];
    valid += part_n[c];
  }
  if (valid < static_cast<std::size_t>(2 * nb + 1)) {
    throw DataError("too few valid pixels for CCA: " + std::to_string(valid) + " < " +
                    std::to_string(2 * nb + 1));
  }
  const Eigen::VectorXd mean = sum / wsum;

  // Pass 2: weighted joint covariance of (X, Y).
  std::vector<Eigen::MatrixXd> part_cov(chunks, Eigen::MatrixXd::Zero(dim, dim));
  parallel_for(0, chunks, [&](std::size_t c) {
    const std::size_t lo = c * kChunk, hi = std::min(n_pix, lo + kChunk);
    Eigen::MatrixXd centered(dim, static_cast<Eigen::Index>(hi - lo));
    Eigen::Index m = 0;
    for (std::size_t p = lo; p < hi; ++p) {
      if (!usable(p)) continue;
      const double sw = std::sqrt(weights[p]);
      for (Eigen::Index b = 0; b < nb; ++b) {
        centered(b, m) = sw * (img_x.value(b, p) - mean(b));
        centered(nb + b, m) = sw * (img_y.value(b, p) - mean(nb + b));
      }
      ++m;
    }
    if (m > 0) part_cov[c].noalias() = centered.leftCols(m) * centered.leftCols(m).transpose();
  });
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& pc : part_cov) cov += pc;
  cov /= wsum;

  Eigen::MatrixXd sxx = cov.topLeftCorner(nb, nb);
  Eigen::MatrixXd syy = cov.bottomRightCorner(nb, nb);
  const Eigen::MatrixXd sxy = cov.topRightCorner(nb, nb);
  const Eigen::MatrixXd syx = sxy.transpose();
  sxx.diagonal().array() += kCovarianceRidge * sxx.trace() / static_cast<double>(nb);
  syy.diagonal().array() += kCovarianceRidge * syy.trace() / static_cast<double>(nb);

  Eigen::LLT<Eigen::MatrixXd> llt_xx(sxx), llt_yy(syy);
  if (llt_xx.info() != Eigen::Success || llt_yy.info() != Eigen::Success ||
      !(sxx.trace() > 0.0) || !(syy.trace() > 0.0)) {
    throw DataError("singular covariance matrix in CCA");
  }

  // Sxy Syy^-1 Syx a = rho^2 Sxx a, eigenvectors normalized to a' Sxx a = 1.
  const Eigen::MatrixXd k_yx = llt_yy.solve(syx);
  Eigen::MatrixXd lhs_a = sxy * k_yx;
  lhs_a = 0.5 * (lhs_a + lhs_a.transpose()).eval();
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges_a(lhs_a, sxx);
  if (ges_a.info() != Eigen::Success) throw DataError("CCA eigenproblem failed");

  // Syx Sxx^-1 Sxy b = rho^2 Syy b; only used to complete b where rho ~ 0.
  const Eigen::MatrixXd k_xy = llt_xx.solve(sxy);
  Eigen::MatrixXd lhs_b = syx * k_xy;
  lhs_b = 0.5 * (lhs_b + lhs_b.transpose()).eval();
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges_b(lhs_b, syy);
  if (ges_b.info() != Eigen::Success) throw DataError("CCA eigenproblem failed");

  MadStep step;
  step.a.resize(nb, nb);
  step.b.resize(nb, nb);
  step.rho.resize(nb);
  step.sigma2_mad.resize(nb);
  step.mean_x = mean.head(nb);
  step.mean_y = mean.tail(nb);
  step.valid_pixels = valid;

  // Solver output is ascending; store descending.
  std::vector<bool> paired(static_cast<std::size_t>(nb), false);
  for (Eigen::Index i = 0; i < nb; ++i) {
    const Eigen::Index src = nb - 1 - i;
    const double r2 = std::clamp(ges_a.eigenvalues()(src), 0.0, 1.0);
    step.rho(i) = std::sqrt(r2);
    step.a.col(i) = ges_a.eigenvectors().col(src);
    if (step.rho(i) > 1e-8) {
      Eigen::VectorXd bcol = k_yx * step.a.col(i);
      const double var = bcol.dot(syy * bcol);
      if (var > 0.0) {
        step.b.col(i) = bcol / std::sqrt(var);
        paired[static_cast<std::size_t>(i)] = true;
      }
    }
  }
  // Complete uncorrelated components from the b-side problem, kept
  // Syy-orthogonal to the paired directions.
  for (Eigen::Index i = 0; i < nb; ++i) {
    if (paired[static_cast<std::size_t>(i)]) continue;
    Eigen::VectorXd v = ges_b.eigenvectors().col(nb - 1 - i);
    for (Eigen::Index j = 0; j < nb; ++j) {
      if (j == i || (!paired[static_cast<std::size_t>(j)] && j > i)) continue;
      v -= step.b.col(j).dot(syy * v) * step.b.col(j);
    }
    const double var = v.dot(syy * v);
    if (!(var > 0.0)) throw DataError("singular covariance matrix in CCA");
    step.b.col(i) = v / std::sqrt(var);
    if (step.a.col(i).dot(sxy * step.b.col(i)) < 0.0) step.b.col(i) = -step.b.col(i);
  }
  for (Eigen::Index i = 0; i < nb; ++i) {
    fix_column_sign(step.a, step.b, i);
    step.sigma2_mad(i) = 2.0 * (1.0 - step.rho(i));
  }
  return step;
}

ChiSquareImage chi_square_image(const RasterStack& img_x, const RasterStack& img_y,
                                const MadStep& step) {
  check_pair(img_x, img_y);
  const std::size_t nb = img_x.band_count();
  if (step.dims() != nb) throw DataError("MAD step dimension does not match band count");
  const std::size_t n_pix = img_x.pixel_count();
  const auto degenerate = step.degenerate();
  Eigen::VectorXd inv_var(static_cast<Eigen::Index>(nb));
  std::size_t n_degenerate = 0;
  for (std::size_t i = 0; i < nb; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    if (degenerate[i]) {
      inv_var(k) = 0.0;
      ++n_degenerate;
    } else {
      inv_var(k) = 1.0 / std::max(step.sigma2_mad(k), kMadVarianceFloor);
    }
  }
  ChiSquareImage out;
  out.degenerate_components = n_degenerate;
  out.z = StatImage{img_x.width(), img_x.height(), img_x.transform(),
                    std::vector<double>(n_pix, kNaN)};
  const Eigen::MatrixXd at = step.a.transpose();
  const Eigen::MatrixXd bt = step.b.transpose();
  parallel_for(0, chunk_count(n_pix), [&](std::size_t c) {
    const std::size_t lo = c * kChunk, hi = std::min(n_pix, lo + kChunk);
    Eigen::VectorXd dx(static_cast<Eigen::Index>(nb)), dy(static_cast<Eigen::Index>(nb));
    for (std::size_t p = lo; p < hi; ++p) {
      if (img_x.is_nodata(p) || img_y.is_nodata(p)) continue;
      for (std::size_t b = 0; b < nb; ++b) {
        const auto k = static_cast<Eigen::Index>(b);
        dx(k) = img_x.value(b, p) - step.mean_x(k);
        dy(k) = img_y.value(b, p) - step.mean_y(k);
      }
      const Eigen::VectorXd mad = at * dx - bt * dy;
      out.z.values[p] = mad.array().square().matrix().dot(inv_var);
    }
  });
  return out;
}

IrmadResult irmad(const RasterStack& img_x, const RasterStack& img_y, const IrmadOptions& options) {
  check_pair(img_x, img_y);
  if (options.max_iter < 1) throw DataError("irmad: max_iter must be >= 1");
  const std::size_t n_pix = img_x.pixel_count();
  const int df = static_cast<int>(img_x.band_count());
  std::vector<double> weights(n_pix);
  for (std::size_t p = 0; p < n_pix; ++p) {
    weights[p] = (img_x.is_nodata(p) || img_y.is_nodata(p)) ? 0.0 : 1.0;
  }

  IrmadResult result;
  result.df = df;
  std::vector<double> prev_rho(static_cast<std::size_t>(df), 0.0);
  for (int k = 1; k <= options.max_iter; ++k) {
    MadStep step = weighted_cca(img_x, img_y, weights);
    std::vector<double> rho(step.rho.data(), step.rho.data() + step.rho.size());
    double delta = 0.0;
    for (std::size_t i = 0; i < rho.size(); ++i) delta = std::max(delta, std::abs(rho[i] - prev_rho[i]));
    result.rho_history.push_back(rho);
    result.iterations = k;
    result.final_step = std::move(step);
    prev_rho = std::move(rho);
    if (delta < options.tol) {
      result.converged = true;
      break;
    }
    if (k == options.max_iter) break;
    const ChiSquareImage chi = chi_square_image(img_x, img_y, result.final_step);
    const int df_eff = df - static_cast<int>(chi.degenerate_components);
    parallel_for(0, chunk_count(n_pix), [&](std::size_t c) {
      const std::size_t lo = c * kChunk, hi = std::min(n_pix, lo + kChunk);
      for (std::size_t p = lo; p < hi; ++p) {
        if (chi.z.is_nodata(p)) weights[p] = 0.0;
        else weights[p] = df_eff > 0 ? chi2_survival(chi.z.values[p], df_eff) : 1.0;
      }
    });
  }
  ChiSquareImage chi = chi_square_image(img_x, img_y, result.final_step);
  result.z = std::move(chi.z);
  result.degenerate_components = chi.degenerate_components;
  result.effective_df = df - static_cast<int>(chi.degenerate_components);
  if (chi.degenerate_components > 0) {
    result.warnings.push_back(std::to_string(chi.degenerate_components) +
                              " MAD component(s) have correlation ~1 (near-identical images); "
                              "they were excluded from the chi-square statistic");
  }
  if (!result.converged) {
    result.warnings.push_back("irmad did not converge within " + std::to_string(options.max_iter) +
                              " iterations");
  }
  return result;
}

// ---------------------------------------------------------------------------

double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0)) throw DataError("regularized_gamma_q: a must be positive");
  if (std::isnan(x) || x < 0.0) throw DataError("regularized_gamma_q: x must be non-negative");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  const double log_prefix = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    // Series for P(a, x).
    double ap = a;
    double term = 1.0 / a;
    double sum = term;
    for (int n = 0; n < kMaxIter; ++n) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::abs(term) < std::abs(sum) * kEps) break;
    }
    return std::clamp(1.0 - sum * std::exp(log_prefix), 0.0, 1.0);
  }
  // Continued fraction for Q(a, x), modified Lentz.
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::clamp(std::exp(log_prefix) * h, 0.0, 1.0);
}

double chi2_survival(double z, int df) {
  if (df < 1) throw DataError("chi2_survival: df must be >= 1");
  if (std::isnan(z) || z < 0.0) throw DataError("chi2_survival: z must be non-negative");
  return regularized_gamma_q(0.5 * df, 0.5 * z);
}

double empirical_percentile(std::vector<double> values, double percentile) {
  if (values.empty()) throw DataError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * percentile / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

ChangeMask threshold_value(const StatImage& z, double threshold, MaskProvenance provenance) {
  ChangeMask m;
  m.width = z.width;
  m.height = z.height;
  m.transform = z.transform;
  m.provenance = provenance;
  m.threshold = threshold;
  m.flags.resize(z.values.size());
  for (std::size_t i = 0; i < z.values.size(); ++i) {
    if (z.is_nodata(i)) {
      m.flags[i] = ChangeFlag::nodata;
    } else {
      m.flags[i] = z.values[i] > threshold ? ChangeFlag::changed : ChangeFlag::stable;
    }
  }
  return m;
}

ChangeMask threshold_percentile(const StatImage& z, double percentile) {
  if (!(percentile > 0.0 && percentile < 100.0)) {
    throw DataError("percentile must lie in (0, 100)");
  }
  std::vector<double> valid;
  valid.reserve(z.values.size());
  for (double v : z.values) {
    if (!std::isnan(v)) valid.push_back(v);
  }
  if (valid.empty()) throw DataError("threshold_percentile: no valid pixels");
  return threshold_value(z, empirical_percentile(std::move(valid), percentile),
                         MaskProvenance::irmad_percentile);
}

PrOptimum threshold_pr_optimal(std::span<const double> z, const std::vector<bool>& changed) {
  if (z.size() != changed.size()) throw DataError("threshold_pr_optimal: length mismatch");
  std::vector<std::size_t> idx;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (std::isnan(z[i])) continue;
    idx.push_back(i);
    if (changed[i]) ++positives;
  }
  if (positives == 0 || positives == idx.size()) {
    throw DataError("threshold_pr_optimal: need at least one changed and one stable label");
  }
  std::sort(idx.begin(), idx.end(), [&](auto l, auto r) { return z[l] > z[r]; });

  PrOptimum best;
  best.f1 = -1.0;
  std::size_t tp = 0, fp = 0;  // counts of entries strictly above the current threshold
  std::size_t k = 0;
  while (k < idx.size()) {
    const double theta = z[idx[k]];
    const std::size_t fn = positives - tp;
    const double f1 = tp == 0 ? 0.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    if (f1 > best.f1) {
      best.threshold = theta;
      best.f1 = f1;
      best.precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
      best.recall = static_cast<double>(tp) / static_cast<double>(positives);
    }
    while (k < idx.size() && z[idx[k]] == theta) {
      if (changed[idx[k]]) ++tp; else ++fp;
      ++k;
    }
  }
  return best;
}

ChangeMask load_external_mask(const std::filesystem::path& path) {
  ChangeMask m = read_change_mask(path);
  m.provenance = MaskProvenance::external;
  return m;
}

ChangeMask resample_mask(const ChangeMask& mask, std::size_t width, std::size_t height,
                         const GeoTransform& transform) {
  if (same_geometry(mask.width, mask.height, mask.transform, width, height, transform)) return mask;
  ChangeMask out;
  out.width = width;
  out.height = height;
  out.transform = transform;
  out.provenance = mask.provenance;
  out.threshold = mask.threshold;
  out.flags.resize(width * height);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      auto [x, y] = transform.pixel_center(c, r);
      out.flags[r * width + c] = mask.flag_at(x, y);
    }
  }
  return out;
}

}  // namespace lcmigrate
