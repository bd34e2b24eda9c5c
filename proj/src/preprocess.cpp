#include "lcmigrate/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <string>

#include "lcmigrate/error.hpp"

namespace lcmigrate {

namespace {
constexpr float kNaNf = std::numeric_limits<float>::quiet_NaN();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kCoverageFloor = 1e-6;
constexpr double kWindowInFwhm = 2.0;
}  // namespace

NormalizedStack l2_normalize(const RasterStack& stack) {
  const std::size_t n = stack.pixel_count();
  const std::size_t nb = stack.band_count();
  std::vector<float> out(stack.data().size());
  std::size_t zero = 0;
  for (std::size_t p = 0; p < n; ++p) {
    double sq = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      const double v = stack.value(b, p);
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    const bool nodata = stack.is_nodata(p);
    if (!nodata && norm == 0.0) ++zero;
    for (std::size_t b = 0; b < nb; ++b) {
      out[b * n + p] = (nodata || norm == 0.0)
                           ? kNaNf
                           : static_cast<float>(static_cast<double>(stack.value(b, p)) / norm);
    }
  }
  return {RasterStack(stack.width(), stack.height(), stack.bands(), std::move(out), stack.transform()),
          zero};
}

std::optional<std::vector<double>> l2_normalize(std::span<const double> x) {
  if (x.empty()) return std::nullopt;
  double sq = 0.0;
  for (double v : x) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || std::isnan(norm)) return std::nullopt;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / norm;
  return out;
}

std::size_t ResamplingPlan::uncovered_count() const {
  return static_cast<std::size_t>(std::count(covered.begin(), covered.end(), false));
}

std::vector<std::vector<double>> ResamplingPlan::dense() const {
  std::vector<std::vector<double>> w(rows.size(), std::vector<double>(source_count, 0.0));
  for (std::size_t j = 0; j < rows.size(); ++j) {
    for (const auto& e : rows[j]) w[j][e.source] = e.weight;
  }
  return w;
}

ResamplingPlan build_resampling_plan(std::span<const BandSpec> source,
                                     std::span<const BandSpec> target) {
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!source[i].center_nm) {
      throw DataError("source band " + std::to_string(i) + " ('" + source[i].name +
                      "') has no center_nm");
    }
  }
  const double fwhm_to_sigma = 1.0 / (2.0 * std::sqrt(2.0 * std::numbers::ln2));
  ResamplingPlan plan;
  plan.source_count = source.size();
  plan.rows.resize(target.size());
  plan.covered.assign(target.size(), false);
  for (std::size_t j = 0; j < target.size(); ++j) {
    const auto& t = target[j];
    if (!t.center_nm || !t.fwhm_nm) {
      throw DataError("target band " + std::to_string(j) + " ('" + t.name +
                      "') needs center_nm and fwhm_nm");
    }
    const double sigma = *t.fwhm_nm * fwhm_to_sigma;
    double total = 0.0;
    std::vector<ResamplingPlan::Entry> row;
    for (std::size_t i = 0; i < source.size(); ++i) {
      const double d = *source[i].center_nm - *t.center_nm;
      if (std::abs(d) > kWindowInFwhm * *t.fwhm_nm) continue;
      const double w = std::exp(-(d * d) / (2.0 * sigma * sigma));
      if (w > 0.0) {
        row.push_back({i, w});
        total += w;
      }
    }
    if (total > kCoverageFloor) {
      for (auto& e : row) e.weight /= total;
      plan.rows[j] = std::move(row);
      plan.covered[j] = true;
    }
  }
  return plan;
}

std::vector<double> apply_resampling(const ResamplingPlan& plan, std::span<const double> spectrum) {
  if (spectrum.size() != plan.source_count) {
    throw DataError("resampling: spectrum has " + std::to_string(spectrum.size()) +
                    " bands, plan expects " + std::to_string(plan.source_count));
  }
  std::vector<double> out(plan.target_count(), kNaN);
  for (std::size_t j = 0; j < plan.target_count(); ++j) {
    if (!plan.covered[j]) continue;
    double acc = 0.0;
    for (const auto& e : plan.rows[j]) acc += e.weight * spectrum[e.source];
    out[j] = acc;  // NaN in any contributing band propagates
  }
  return out;
}

RasterStack apply_resampling(const ResamplingPlan& plan, const RasterStack& stack,
                             std::span<const BandSpec> target) {
  if (stack.band_count() != plan.source_count) {
    throw DataError("resampling: raster has " + std::to_string(stack.band_count()) +
                    " bands, plan expects " + std::to_string(plan.source_count));
  }
  if (target.size() != plan.target_count()) throw DataError("resampling: target band list mismatch");
  const std::size_t n = stack.pixel_count();
  std::vector<float> out(n * plan.target_count());
  std::vector<double> spectrum(stack.band_count());
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t b = 0; b < spectrum.size(); ++b) spectrum[b] = stack.value(b, p);
    const auto r = apply_resampling(plan, spectrum);
    for (std::size_t j = 0; j < r.size(); ++j) out[j * n + p] = static_cast<float>(r[j]);
  }
  return RasterStack(stack.width(), stack.height(), {target.begin(), target.end()}, std::move(out),
                     stack.transform());
}

RasterStack masked_median_composite(std::span<const RasterStack> stacks) {
  if (stacks.empty()) throw DataError("composite: no input rasters");
  const auto& first = stacks.front();
  for (std::size_t s = 1; s < stacks.size(); ++s) {
    const auto& r = stacks[s];
    if (!same_geometry(first.width(), first.height(), first.transform(), r.width(), r.height(),
                       r.transform()) ||
        r.band_count() != first.band_count()) {
      throw DataError("composite: raster " + std::to_string(s) + " (" + std::to_string(r.width()) +
                      "x" + std::to_string(r.height()) + "x" + std::to_string(r.band_count()) +
                      ") does not match raster 0 (" + std::to_string(first.width()) + "x" +
                      std::to_string(first.height()) + "x" + std::to_string(first.band_count()) + ")");
    }
  }
  const std::size_t n = first.pixel_count();
  const std::size_t nb = first.band_count();
  std::vector<float> out(n * nb, kNaNf);
  std::vector<float> values;
  values.reserve(stacks.size());
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t b = 0; b < nb; ++b) {
      values.clear();
      for (const auto& s : stacks) {
        if (!s.is_nodata(p)) values.push_back(s.value(b, p));
      }
      if (values.empty()) continue;
      std::sort(values.begin(), values.end());
      const std::size_t m = values.size();
      out[b * n + p] = (m % 2 == 1)
                           ? values[m / 2]
                           : static_cast<float>(0.5 * (static_cast<double>(values[m / 2 - 1]) +
                                                       static_cast<double>(values[m / 2])));
    }
  }
  return RasterStack(first.width(), first.height(), first.bands(), std::move(out), first.transform());
}

RasterStack drop_bands(const RasterStack& stack, std::span<const std::size_t> indices) {
  std::set<std::size_t> drop(indices.begin(), indices.end());
  for (auto i : drop) {
    if (i >= stack.band_count()) {
      throw DataError("drop-bands: index " + std::to_string(i) + " out of range for " +
                      std::to_string(stack.band_count()) + " bands");
    }
  }
  if (drop.size() == stack.band_count()) throw DataError("drop-bands: cannot drop every band");
  const std::size_t n = stack.pixel_count();
  std::vector<BandSpec> bands;
  std::vector<float> data;
  data.reserve(n * (stack.band_count() - drop.size()));
  for (std::size_t b = 0; b < stack.band_count(); ++b) {
    if (drop.contains(b)) continue;
    bands.push_back(stack.bands()[b]);
    auto plane = stack.band(b);
    data.insert(data.end(), plane.begin(), plane.end());
  }
  return RasterStack(stack.width(), stack.height(), std::move(bands), std::move(data),
                     stack.transform());
}

}  // namespace lcmigrate
