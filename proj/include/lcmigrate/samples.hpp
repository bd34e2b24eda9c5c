#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lcmigrate/raster.hpp"

namespace lcmigrate {

enum class ChangeState { stable, changed, unknown };
enum class Epoch { t0, t1 };

std::string to_string(ChangeState s);
/// Anything other than "stable" or "changed" parses as unknown.
ChangeState change_state_from_string(const std::string& s);
std::string to_string(Epoch e);

struct SamplePoint {
  std::string id;
  double x = 0.0;
  double y = 0.0;
  int label_t0 = 0;
  std::optional<int> label_t1;
  ChangeState change = ChangeState::unknown;
  std::optional<std::vector<double>> features_t0;
  std::optional<std::vector<double>> features_t1;

  const std::optional<std::vector<double>>& features(Epoch e) const {
    return e == Epoch::t0 ? features_t0 : features_t1;
  }
  std::optional<std::vector<double>>& features(Epoch e) {
    return e == Epoch::t0 ? features_t0 : features_t1;
  }
};

struct SampleSet {
  std::vector<SamplePoint> points;
  Legend legend;

  /// Common feature length at an epoch; nullopt when no point carries
  /// features for it.
  std::optional<std::size_t> feature_dim(Epoch e) const;
  /// Checks id uniqueness, legend membership, the stable-label rule and
  /// consistent feature lengths. Throws DataError naming the offending id.
  void validate() const;
  SampleSet subset(std::span<const std::size_t> indices) const;
  std::size_t size() const { return points.size(); }
};

/// Companion legend file for a sample CSV: "a/b.csv" -> "a/b.legend.json".
std::filesystem::path legend_path_for(const std::filesystem::path& csv);

Legend read_legend(const std::filesystem::path& path);
void write_legend(const Legend& legend, const std::filesystem::path& path);

SampleSet read_samples(const std::filesystem::path& csv);
void write_samples(const SampleSet& set, const std::filesystem::path& csv);

struct ExtractionResult {
  SampleSet samples;
  std::vector<std::string> nodata_ids;  // excluded because their pixel is nodata
};

/// Fills features_t0 or features_t1 from the pixel containing each point.
/// Throws DataError listing every id that falls outside the raster.
ExtractionResult extract_features(const RasterStack& stack, const SampleSet& samples,
                                  Epoch epoch);

}  // namespace lcmigrate
