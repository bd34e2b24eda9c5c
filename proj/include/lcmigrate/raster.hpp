#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lcmigrate {

struct BandSpec {
  std::string name;
  std::optional<double> center_nm;
  std::optional<double> fwhm_nm;

  /// Throws DataError when fwhm is set without a center or is not positive.
  void validate() const;
};

struct PixelIndex {
  std::size_t col = 0;
  std::size_t row = 0;
};

/// North-up affine transform. Map coordinates of the top-left corner of pixel
/// (col, row) are (origin_x + col * pixel_size_x, origin_y + row * pixel_size_y).
struct GeoTransform {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double pixel_size_x = 1.0;
  double pixel_size_y = -1.0;

  void validate() const;

  /// Map coordinates of the center of pixel (col, row).
  std::pair<double, double> pixel_center(std::size_t col, std::size_t row) const;
  /// Fractional pixel coordinates (col, row) of a map position.
  std::pair<double, double> to_pixel(double x, double y) const;
  /// Pixel containing (x, y) by flooring the fractional index, or nullopt when
  /// the position falls outside a width x height grid.
  std::optional<PixelIndex> locate(double x, double y, std::size_t width,
                                   std::size_t height) const;

  bool operator==(const GeoTransform&) const = default;
};

/// Multiband float32 image stored band-sequential. A pixel is nodata when any
/// band holds NaN; the mask is derived from the payload and never stored
/// separately, which keeps the two consistent by construction.
class RasterStack {
 public:
  RasterStack(std::size_t width, std::size_t height, std::vector<BandSpec> bands,
              std::vector<float> data, GeoTransform transform);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t pixel_count() const { return width_ * height_; }
  std::size_t band_count() const { return bands_.size(); }
  const std::vector<BandSpec>& bands() const { return bands_; }
  const GeoTransform& transform() const { return transform_; }
  const std::vector<float>& data() const { return data_; }

  std::span<const float> band(std::size_t b) const;
  float value(std::size_t b, std::size_t pixel) const {
    return data_[b * pixel_count() + pixel];
  }
  std::vector<float> pixel_vector(std::size_t pixel) const;

  bool is_nodata(std::size_t pixel) const { return nodata_[pixel] != 0; }
  const std::vector<std::uint8_t>& nodata_mask() const { return nodata_; }
  std::size_t valid_count() const;

 private:
  std::size_t width_;
  std::size_t height_;
  std::vector<BandSpec> bands_;
  std::vector<float> data_;
  GeoTransform transform_;
  std::vector<std::uint8_t> nodata_;
};

bool same_geometry(std::size_t w1, std::size_t h1, const GeoTransform& t1,
                   std::size_t w2, std::size_t h2, const GeoTransform& t2);

using Legend = std::map<int, std::string>;

enum class ChangeFlag : std::uint8_t { stable = 0, changed = 1, nodata = 255 };
enum class MaskProvenance { irmad_percentile, irmad_pr, external, manual };

std::string to_string(MaskProvenance p);
MaskProvenance mask_provenance_from_string(const std::string& s);

struct ChangeMask {
  std::size_t width = 0;
  std::size_t height = 0;
  GeoTransform transform;
  std::vector<ChangeFlag> flags;
  MaskProvenance provenance = MaskProvenance::manual;
  std::optional<double> threshold;

  std::size_t count(ChangeFlag f) const;
  /// Flag at a map coordinate (nearest pixel); nodata outside the extent.
  ChangeFlag flag_at(double x, double y) const;
};

inline constexpr std::uint8_t kClassNodata = 255;

struct ClassMap {
  std::size_t width = 0;
  std::size_t height = 0;
  GeoTransform transform;
  std::vector<std::uint8_t> classes;  // kClassNodata marks nodata
  Legend legend;

  /// Throws DataError if a class id is absent from the legend.
  void validate() const;
};

// BSQ1 files are addressed by stem: "dir/name" maps to dir/name.json and
// dir/name.bsq. A path ending in .json or .bsq is accepted and stripped.
std::filesystem::path bsq_stem(const std::filesystem::path& path);

RasterStack read_raster(const std::filesystem::path& path);
void write_raster(const RasterStack& stack, const std::filesystem::path& path);

ChangeMask read_change_mask(const std::filesystem::path& path);
void write_change_mask(const ChangeMask& mask, const std::filesystem::path& path);

ClassMap read_class_map(const std::filesystem::path& path);
void write_class_map(const ClassMap& map, const std::filesystem::path& path);

/// Standalone band list: a JSON array of {name, center_nm?, fwhm_nm?}, or a
/// BSQ1 sidecar whose "bands" entry is used.
std::vector<BandSpec> read_band_list(const std::filesystem::path& path);

}  // namespace lcmigrate
