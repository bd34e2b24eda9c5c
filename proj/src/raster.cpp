#include "lcmigrate/raster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

#include "json.hpp"
#include "lcmigrate/error.hpp"
#include "lcmigrate/io_util.hpp"

namespace lcmigrate {

namespace fs = std::filesystem;
using nlohmann::json;

void BandSpec::validate() const {
  if (fwhm_nm && !center_nm) {
    throw DataError("band '" + name + "': fwhm_nm requires center_nm");
  }
  if (fwhm_nm && !(*fwhm_nm > 0.0)) {
    throw DataError("band '" + name + "': fwhm_nm must be positive");
  }
  if (center_nm && !(*center_nm > 0.0)) {
    throw DataError("band '" + name + "': center_nm must be positive");
  }
}

void GeoTransform::validate() const {
  if (!(pixel_size_x > 0.0)) throw DataError("transform: pixel_size_x must be > 0");
  if (pixel_size_y == 0.0 || std::isnan(pixel_size_y)) {
    throw DataError("transform: pixel_size_y must be non-zero");
  }
}

std::pair<double, double> GeoTransform::pixel_center(std::size_t col, std::size_t row) const {
  return {origin_x + (static_cast<double>(col) + 0.5) * pixel_size_x,
          origin_y + (static_cast<double>(row) + 0.5) * pixel_size_y};
}

std::pair<double, double> GeoTransform::to_pixel(double x, double y) const {
  return {(x - origin_x) / pixel_size_x, (y - origin_y) / pixel_size_y};
}

std::optional<PixelIndex> GeoTransform::locate(double x, double y, std::size_t width,
                                               std::size_t height) const {
  auto [fc, fr] = to_pixel(x, y);
  const double c = std::floor(fc);
  const double r = std::floor(fr);
  if (!(c >= 0.0) || !(r >= 0.0) || c >= static_cast<double>(width) ||
      r >= static_cast<double>(height)) {
    return std::nullopt;
  }
  return PixelIndex{static_cast<std::size_t>(c), static_cast<std::size_t>(r)};
}

RasterStack::RasterStack(std::size_t width, std::size_t height, std::vector<BandSpec> bands,
                         std::vector<float> data, GeoTransform transform)
    : width_(width),
      height_(height),
      bands_(std::move(bands)),
      data_(std::move(data)),
      transform_(transform) {
  if (width_ == 0 || height_ == 0) throw DataError("raster: width and height must be positive");
  if (bands_.empty()) throw DataError("raster: at least one band is required");
  for (const auto& b : bands_) b.validate();
  transform_.validate();
  const std::size_t n = pixel_count();
  if (data_.size() != n * bands_.size()) {
    std::ostringstream msg;
    msg << "raster: data length " << data_.size() << " != " << width_ << "x" << height_
        << "x" << bands_.size();
    throw DataError(msg.str());
  }
  nodata_.assign(n, 0);
  for (std::size_t b = 0; b < bands_.size(); ++b) {
    const float* plane = data_.data() + b * n;
    for (std::size_t p = 0; p < n; ++p) {
      if (std::isnan(plane[p])) nodata_[p] = 1;
    }
  }
}

std::span<const float> RasterStack::band(std::size_t b) const {
  return std::span<const float>(data_).subspan(b * pixel_count(), pixel_count());
}

std::vector<float> RasterStack::pixel_vector(std::size_t pixel) const {
  std::vector<float> v(band_count());
  for (std::size_t b = 0; b < v.size(); ++b) v[b] = value(b, pixel);
  return v;
}

std::size_t RasterStack::valid_count() const {
  return static_cast<std::size_t>(std::count(nodata_.begin(), nodata_.end(), 0));
}

bool same_geometry(std::size_t w1, std::size_t h1, const GeoTransform& t1, std::size_t w2,
                   std::size_t h2, const GeoTransform& t2) {
  return w1 == w2 && h1 == h2 && t1 == t2;
}

std::string to_string(MaskProvenance p) {
  switch (p) {
    case MaskProvenance::irmad_percentile: return "irmad_percentile";
    case MaskProvenance::irmad_pr: return "irmad_pr";
    case MaskProvenance::external: return "external";
    case MaskProvenance::manual: return "manual";
  }
  return "manual";
}

MaskProvenance mask_provenance_from_string(const std::string& s) {
  if (s == "irmad_percentile") return MaskProvenance::irmad_percentile;
  if (s == "irmad_pr") return MaskProvenance::irmad_pr;
  if (s == "external") return MaskProvenance::external;
  if (s == "manual") return MaskProvenance::manual;
  throw DataError("unknown mask provenance '" + s + "'");
}

std::size_t ChangeMask::count(ChangeFlag f) const {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), f));
}

ChangeFlag ChangeMask::flag_at(double x, double y) const {
  auto px = transform.locate(x, y, width, height);
  if (!px) return ChangeFlag::nodata;
  return flags[px->row * width + px->col];
}

void ClassMap::validate() const {
  if (classes.size() != width * height) throw DataError("class map: size mismatch");
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] != kClassNodata && !legend.contains(classes[i])) {
      throw DataError("class map: class " + std::to_string(classes[i]) + " at pixel " +
                      std::to_string(i) + " is not in the legend");
    }
  }
}

// ---------------------------------------------------------------------------
// BSQ1 on-disk format

fs::path bsq_stem(const fs::path& path) {
  auto ext = path.extension();
  if (ext == ".json" || ext == ".bsq") {
    fs::path stem = path;
    stem.replace_extension();
    return stem;
  }
  return path;
}

namespace {

fs::path with_suffix(const fs::path& stem, const char* suffix) {
  fs::path p = stem;
  p += suffix;
  return p;
}

json transform_to_json(const GeoTransform& t) {
  return json::array({t.origin_x, t.origin_y, t.pixel_size_x, t.pixel_size_y});
}

json band_to_json(const BandSpec& b) {
  json j;
  j["name"] = b.name;
  if (b.center_nm) j["center_nm"] = *b.center_nm;
  if (b.fwhm_nm) j["fwhm_nm"] = *b.fwhm_nm;
  return j;
}

BandSpec band_from_json(const json& j) {
  BandSpec b;
  if (!j.is_object()) throw DataError("band entry must be an object");
  b.name = j.value("name", std::string{});
  if (j.contains("center_nm") && !j["center_nm"].is_null()) b.center_nm = j["center_nm"].get<double>();
  if (j.contains("fwhm_nm") && !j["fwhm_nm"].is_null()) b.fwhm_nm = j["fwhm_nm"].get<double>();
  b.validate();
  return b;
}

struct Header {
  std::string dtype;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<BandSpec> bands;
  GeoTransform transform;
  json raw;
};

Header read_header(const fs::path& stem) {
  const fs::path side = with_suffix(stem, ".json");
  json j;
  try {
    j = json::parse(read_file(side));
  } catch (const json::exception& e) {
    throw DataError("malformed header " + side.string() + ": " + e.what());
  }
  Header h;
  try {
    if (j.at("format").get<std::string>() != "BSQ1") {
      throw DataError("header " + side.string() + ": format must be BSQ1");
    }
    h.dtype = j.value("dtype", std::string("f32"));
    const auto w = j.at("width").get<std::int64_t>();
    const auto ht = j.at("height").get<std::int64_t>();
    if (w <= 0 || ht <= 0) throw DataError("header " + side.string() + ": non-positive size");
    h.width = static_cast<std::size_t>(w);
    h.height = static_cast<std::size_t>(ht);
    for (const auto& b : j.at("bands")) h.bands.push_back(band_from_json(b));
    const auto& t = j.at("transform");
    if (!t.is_array() || t.size() != 4) {
      throw DataError("header " + side.string() + ": transform needs 4 numbers");
    }
    h.transform = {t[0].get<double>(), t[1].get<double>(), t[2].get<double>(),
                   t[3].get<double>()};
    h.transform.validate();
  } catch (const json::exception& e) {
    throw DataError("malformed header " + side.string() + ": " + e.what());
  }
  h.raw = std::move(j);
  return h;
}

std::string read_payload(const fs::path& stem, std::size_t expected_bytes) {
  const fs::path bin = with_suffix(stem, ".bsq");
  std::string bytes = read_file(bin);
  if (bytes.size() != expected_bytes) {
    throw DataError("size mismatch: " + bin.string() + " holds " + std::to_string(bytes.size()) +
                    " bytes, header implies " + std::to_string(expected_bytes));
  }
  return bytes;
}

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

json u8_header(std::size_t w, std::size_t h, const GeoTransform& t, const std::string& band_name) {
  json j;
  j["format"] = "BSQ1";
  j["dtype"] = "u8";
  j["width"] = w;
  j["height"] = h;
  j["bands"] = json::array({json{{"name", band_name}}});
  j["nodata"] = 255;
  j["transform"] = transform_to_json(t);
  return j;
}

void write_pair(const fs::path& stem, const json& header, std::string_view payload) {
  atomic_write(with_suffix(stem, ".bsq"), payload);
  atomic_write(with_suffix(stem, ".json"), header.dump(2) + "\n");
}

Header read_u8_header(const fs::path& stem) {
  Header h = read_header(stem);
  if (h.dtype != "u8") throw DataError(stem.string() + ": expected dtype u8, found " + h.dtype);
  if (h.bands.size() != 1) throw DataError(stem.string() + ": u8 layers carry exactly one band");
  return h;
}

}  // namespace

RasterStack read_raster(const fs::path& path) {
  const fs::path stem = bsq_stem(path);
  Header h = read_header(stem);
  if (h.dtype != "f32") throw DataError(stem.string() + ": expected dtype f32, found " + h.dtype);
  if (h.raw.contains("nodata") && h.raw["nodata"] != "nan") {
    throw DataError(stem.string() + ": float rasters use nodata \"nan\"");
  }
  const std::size_t n = h.width * h.height * h.bands.size();
  if (h.bands.empty()) throw DataError(stem.string() + ": no bands declared");
  std::string bytes = read_payload(stem, n * sizeof(float));
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    data[i] = std::bit_cast<float>(to_little_endian(bits));
  }
  return RasterStack(h.width, h.height, std::move(h.bands), std::move(data), h.transform);
}

void write_raster(const RasterStack& stack, const fs::path& path) {
  const fs::path stem = bsq_stem(path);
  json j;
  j["format"] = "BSQ1";
  j["dtype"] = "f32";
  j["width"] = stack.width();
  j["height"] = stack.height();
  j["bands"] = json::array();
  for (const auto& b : stack.bands()) j["bands"].push_back(band_to_json(b));
  j["nodata"] = "nan";
  j["transform"] = transform_to_json(stack.transform());
  std::string payload(stack.data().size() * sizeof(float), '\0');
  for (std::size_t i = 0; i < stack.data().size(); ++i) {
    const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(stack.data()[i]));
    std::memcpy(payload.data() + 4 * i, &bits, 4);
  }
  write_pair(stem, j, payload);
}

ChangeMask read_change_mask(const fs::path& path) {
  const fs::path stem = bsq_stem(path);
  Header h = read_u8_header(stem);
  std::string bytes = read_payload(stem, h.width * h.height);
  ChangeMask m;
  m.width = h.width;
  m.height = h.height;
  m.transform = h.transform;
  m.flags.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto code = static_cast<std::uint8_t>(bytes[i]);
    if (code != 0 && code != 1 && code != 255) {
      throw DataError(stem.string() + ": illegal mask code " + std::to_string(code) +
                      " at pixel " + std::to_string(i));
    }
    m.flags[i] = static_cast<ChangeFlag>(code);
  }
  m.provenance = mask_provenance_from_string(h.raw.value("provenance", std::string("external")));
  if (h.raw.contains("threshold") && !h.raw["threshold"].is_null()) {
    m.threshold = h.raw["threshold"].get<double>();
  }
  return m;
}

void write_change_mask(const ChangeMask& mask, const fs::path& path) {
  if (mask.flags.size() != mask.width * mask.height) throw DataError("change mask: size mismatch");
  json j = u8_header(mask.width, mask.height, mask.transform, "change");
  j["provenance"] = to_string(mask.provenance);
  if (mask.threshold) j["threshold"] = *mask.threshold;
  std::string payload(mask.flags.size(), '\0');
  for (std::size_t i = 0; i < mask.flags.size(); ++i) {
    payload[i] = static_cast<char>(mask.flags[i]);
  }
  write_pair(bsq_stem(path), j, payload);
}

ClassMap read_class_map(const fs::path& path) {
  const fs::path stem = bsq_stem(path);
  Header h = read_u8_header(stem);
  std::string bytes = read_payload(stem, h.width * h.height);
  ClassMap m;
  m.width = h.width;
  m.height = h.height;
  m.transform = h.transform;
  m.classes.assign(bytes.begin(), bytes.end());
  if (h.raw.contains("legend")) {
    for (const auto& [k, v] : h.raw["legend"].items()) {
      m.legend[std::stoi(k)] = v.get<std::string>();
    }
  }
  m.validate();
  return m;
}

void write_class_map(const ClassMap& map, const fs::path& path) {
  map.validate();
  json j = u8_header(map.width, map.height, map.transform, "class");
  json legend = json::object();
  for (const auto& [id, name] : map.legend) legend[std::to_string(id)] = name;
  j["legend"] = legend;
  write_pair(bsq_stem(path), j, std::string(map.classes.begin(), map.classes.end()));
}

std::vector<BandSpec> read_band_list(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw DataError("malformed band list " + path.string() + ": " + e.what());
  }
  if (j.is_object() && !j.contains("bands")) throw DataError(path.string() + ": no \"bands\" entry");
  const json& arr = j.is_object() ? j["bands"] : j;
  if (!arr.is_array()) throw DataError(path.string() + ": band list must be an array");
  std::vector<BandSpec> out;
  try {
    for (const auto& b : arr) out.push_back(band_from_json(b));
  } catch (const json::exception& e) {
    throw DataError("malformed band list " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace lcmigrate
