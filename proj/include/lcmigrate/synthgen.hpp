#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lcmigrate/raster.hpp"
#include "lcmigrate/samples.hpp"

namespace lcmigrate {

struct BandDrift {
  double gain = 1.0;
  double offset = 0.0;
};

struct SynthConfig {
  std::size_t width = 128;
  std::size_t height = 128;
  int n_classes = 5;
  int n_bands = 6;
  /// n_classes rows of n_bands values; generated when empty.
  std::vector<std::vector<double>> class_means;
  double noise_sigma = 0.02;
  double change_fraction = 0.05;
  /// Share of the former class mean kept by a changed pixel at t1, modelling
  /// partial transitions; 0 gives pure new-class spectra.
  double change_mixing = 0.0;
  /// Shift of changed pixels at t1 away from their new class mean, in units of
  /// noise_sigma along a fixed random direction per class. Models newly
  /// converted land that does not yet look like established land of that class.
  double change_novelty = 0.0;
  /// Class that changed pixels preferentially turn into (-1: none). Its
  /// destination field is raised by expansion_bias standard deviations and
  /// its t0 class field lowered by the same amount, so it starts out rare.
  int expanding_class = -1;
  double expansion_bias = 0.0;
  /// One entry per band, or a single entry applied to every band.
  std::vector<BandDrift> drift{BandDrift{}};
  double correlation_length = 6.0;  // pixels
  std::size_t n_reference_points = 500;
  std::uint64_t seed = 0;
  double pixel_size = 30.0;  // meters
  double origin_x = 500000.0;
  double origin_y = 4200000.0;
  // Range of auto-generated mean reflectances.
  double mean_low = 0.05;
  double mean_high = 0.6;

  void validate() const;
  BandDrift drift_for(int band) const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
  /// "small" (128x128, 6 bands) or "bench" (256x256, 6 bands).
  static SynthConfig preset(const std::string& name, std::uint64_t seed);
};

struct SynthScene {
  SynthConfig config;  // with class_means filled in
  RasterStack raster_t0;
  RasterStack raster_t1;
  ClassMap classmap_t0;
  ClassMap classmap_t1;
  ChangeMask truth_change_mask;
  SampleSet samples;  // true labels at both epochs and true change flags
};

/// Class means drawn uniformly from [mean_low, mean_high] until every pair is
/// at least 3 noise_sigma apart, both as raw vectors and after scaling to unit
/// length (relative to the smaller norm).
std::vector<std::vector<double>> generate_class_means(const SynthConfig& config);

/// Zero-mean, unit-variance Gaussian field smoothed with a Gaussian kernel of
/// the given standard deviation in pixels (reflected at the edges).
std::vector<double> smooth_noise_field(std::size_t width, std::size_t height, double sigma_px,
                                       std::uint64_t seed, std::uint64_t stream);

SynthScene generate(const SynthConfig& config);

/// Writes rasters, class maps, the truth mask, samples and a config echo into
/// `dir`; returns the written paths.
std::vector<std::filesystem::path> write_scene(const SynthScene& scene, const std::filesystem::path& dir);

}  // namespace lcmigrate
