#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "lcmigrate/raster.hpp"

namespace lcmigrate {

struct NormalizedStack {
  RasterStack stack;
  std::size_t zero_norm_pixels = 0;  // valid pixels turned nodata by a zero norm
};

/// Divides every pixel's band vector by its Euclidean norm. Pixels with a
/// zero norm become nodata; existing nodata stays nodata.
NormalizedStack l2_normalize(const RasterStack& stack);

/// Vector form; nullopt for a zero-norm or NaN-containing input.
std::optional<std::vector<double>> l2_normalize(std::span<const double> x);

/// Row-normalized Gaussian response weights mapping source bands onto target
/// bands. Rows are stored sparsely as (source index, weight) pairs.
struct ResamplingPlan {
  struct Entry {
    std::size_t source = 0;
    double weight = 0.0;
  };
  std::size_t source_count = 0;
  std::vector<std::vector<Entry>> rows;  // one per target band
  std::vector<bool> covered;

  std::size_t target_count() const { return rows.size(); }
  std::size_t uncovered_count() const;
  /// Dense |target| x |source| view, mainly for inspection.
  std::vector<std::vector<double>> dense() const;
};

/// Source bands within two target FWHMs of a target center contribute
/// exp(-(d^2) / (2 sigma^2)) with sigma = fwhm / (2 sqrt(2 ln 2)); a target band
/// whose raw weight total does not exceed 1e-6 is left uncovered.
ResamplingPlan build_resampling_plan(std::span<const BandSpec> source,
                                     std::span<const BandSpec> target);

/// Uncovered target bands, and covered bands touching a NaN source value,
/// come out NaN.
std::vector<double> apply_resampling(const ResamplingPlan& plan, std::span<const double> spectrum);
RasterStack apply_resampling(const ResamplingPlan& plan, const RasterStack& stack,
                             std::span<const BandSpec> target);

/// Per-pixel, per-band median over the non-nodata inputs (midpoint of the two
/// central values for an even count). Pixels nodata in every input stay nodata.
RasterStack masked_median_composite(std::span<const RasterStack> stacks);

/// Removes the given 0-based band indices, keeping the rest in order.
RasterStack drop_bands(const RasterStack& stack, std::span<const std::size_t> indices);

}  // namespace lcmigrate
