#include "lcmigrate/samples.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "lcmigrate/error.hpp"
#include "lcmigrate/io_util.hpp"

namespace lcmigrate {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ChangeState s) {
  switch (s) {
    case ChangeState::stable: return "stable";
    case ChangeState::changed: return "changed";
    case ChangeState::unknown: return "unknown";
  }
  return "unknown";
}

ChangeState change_state_from_string(const std::string& s) {
  if (s == "stable") return ChangeState::stable;
  if (s == "changed") return ChangeState::changed;
  return ChangeState::unknown;
}

std::string to_string(Epoch e) { return e == Epoch::t0 ? "t0" : "t1"; }

std::optional<std::size_t> SampleSet::feature_dim(Epoch e) const {
  for (const auto& p : points) {
    if (p.features(e)) return p.features(e)->size();
  }
  return std::nullopt;
}

void SampleSet::validate() const {
  std::unordered_set<std::string> seen;
  const auto dim0 = feature_dim(Epoch::t0);
  const auto dim1 = feature_dim(Epoch::t1);
  for (const auto& p : points) {
    if (p.id.empty()) throw DataError("sample with empty id");
    if (!seen.insert(p.id).second) throw DataError("duplicate sample id '" + p.id + "'");
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
      throw DataError("sample '" + p.id + "': non-finite coordinate");
    }
    if (p.label_t0 < 0 || !legend.contains(p.label_t0)) {
      throw DataError("sample '" + p.id + "': label_t0 " + std::to_string(p.label_t0) +
                      " is not in the legend");
    }
    if (p.label_t1 && (*p.label_t1 < 0 || !legend.contains(*p.label_t1))) {
      throw DataError("sample '" + p.id + "': label_t1 " + std::to_string(*p.label_t1) +
                      " is not in the legend");
    }
    if (p.change == ChangeState::stable && p.label_t1 && *p.label_t1 != p.label_t0) {
      throw DataError("sample '" + p.id + "': flagged stable but label_t1 != label_t0");
    }
    if (p.features_t0 && p.features_t0->size() != *dim0) {
      throw DataError("sample '" + p.id + "': inconsistent t0 feature length");
    }
    if (p.features_t1 && p.features_t1->size() != *dim1) {
      throw DataError("sample '" + p.id + "': inconsistent t1 feature length");
    }
  }
}

SampleSet SampleSet::subset(std::span<const std::size_t> indices) const {
  SampleSet out;
  out.legend = legend;
  out.points.reserve(indices.size());
  for (auto i : indices) out.points.push_back(points.at(i));
  return out;
}

fs::path legend_path_for(const fs::path& csv) {
  fs::path p = csv;
  p.replace_extension(".legend.json");
  return p;
}

Legend read_legend(const fs::path& path) {
  Legend legend;
  try {
    json j = json::parse(read_file(path));
    for (const auto& [k, v] : j.items()) {
      int id = 0;
      auto [ptr, ec] = std::from_chars(k.data(), k.data() + k.size(), id);
      if (ec != std::errc{} || ptr != k.data() + k.size() || id < 0) {
        throw DataError("legend " + path.string() + ": bad class id '" + k + "'");
      }
      legend[id] = v.get<std::string>();
    }
  } catch (const json::exception& e) {
    throw DataError("malformed legend " + path.string() + ": " + e.what());
  }
  return legend;
}

void write_legend(const Legend& legend, const fs::path& path) {
  json j = json::object();
  for (const auto& [id, name] : legend) j[std::to_string(id)] = name;
  atomic_write(path, j.dump(2) + "\n");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

template <typename T>
T parse_number(const std::string& cell, const std::string& what, std::size_t line_no) {
  T v{};
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size()) {
    throw DataError("line " + std::to_string(line_no) + ": non-numeric " + what + " '" + cell + "'");
  }
  return v;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double parse_feature(const std::string& cell, std::size_t line_no) {
  if (cell == "nan" || cell == "NaN") return std::nan("");
  return parse_number<double>(cell, "feature", line_no);
}

const std::vector<std::string> kBaseColumns = {"id", "x", "y", "label_t0", "label_t1", "change_flag"};

}  // namespace

SampleSet read_samples(const fs::path& csv) {
  SampleSet set;
  set.legend = read_legend(legend_path_for(csv));
  std::ifstream in(csv);
  if (!in) throw DataError("cannot read: " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(csv.string() + ": empty file");
  const auto header = split_csv_line(line);
  if (header.size() < kBaseColumns.size() ||
      !std::equal(kBaseColumns.begin(), kBaseColumns.end(), header.begin())) {
    throw DataError(csv.string() + ": header must start with id,x,y,label_t0,label_t1,change_flag");
  }
  // Feature columns are f<i>_t0 / f<i>_t1 in index order.
  std::vector<std::size_t> cols_t0, cols_t1;
  for (std::size_t c = kBaseColumns.size(); c < header.size(); ++c) {
    const auto& h = header[c];
    const bool t0 = h.size() > 3 && h.ends_with("_t0");
    const bool t1 = h.size() > 3 && h.ends_with("_t1");
    if (h.empty() || h[0] != 'f' || (!t0 && !t1)) {
      throw DataError(csv.string() + ": unexpected column '" + h + "'");
    }
    auto& cols = t0 ? cols_t0 : cols_t1;
    const std::string expected = "f" + std::to_string(cols.size()) + (t0 ? "_t0" : "_t1");
    if (h != expected) throw DataError(csv.string() + ": expected column '" + expected + "', got '" + h + "'");
    cols.push_back(c);
  }

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError(csv.string() + ": line " + std::to_string(line_no) + " has " +
                      std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(header.size()));
    }
    SamplePoint p;
    p.id = cells[0];
    p.x = parse_number<double>(cells[1], "coordinate", line_no);
    p.y = parse_number<double>(cells[2], "coordinate", line_no);
    p.label_t0 = parse_number<int>(cells[3], "label_t0", line_no);
    if (!cells[4].empty()) p.label_t1 = parse_number<int>(cells[4], "label_t1", line_no);
    p.change = change_state_from_string(cells[5]);
    auto read_features = [&](const std::vector<std::size_t>& cols) -> std::optional<std::vector<double>> {
      if (cols.empty()) return std::nullopt;
      const bool any = std::any_of(cols.begin(), cols.end(), [&](auto c) { return !cells[c].empty(); });
      if (!any) return std::nullopt;
      std::vector<double> f;
      f.reserve(cols.size());
      for (auto c : cols) f.push_back(parse_feature(cells[c], line_no));
      return f;
    };
    p.features_t0 = read_features(cols_t0);
    p.features_t1 = read_features(cols_t1);
    set.points.push_back(std::move(p));
  }
  set.validate();
  return set;
}

void write_samples(const SampleSet& set, const fs::path& csv) {
  set.validate();
  const std::size_t d0 = set.feature_dim(Epoch::t0).value_or(0);
  const std::size_t d1 = set.feature_dim(Epoch::t1).value_or(0);
  std::ostringstream out;
  for (std::size_t i = 0; i < kBaseColumns.size(); ++i) out << (i ? "," : "") << kBaseColumns[i];
  for (std::size_t i = 0; i < d0; ++i) out << ",f" << i << "_t0";
  for (std::size_t i = 0; i < d1; ++i) out << ",f" << i << "_t1";
  out << '\n';
  for (const auto& p : set.points) {
    if (p.id.find(',') != std::string::npos) throw DataError("sample id contains a comma: " + p.id);
    out << p.id << ',' << format_double(p.x) << ',' << format_double(p.y) << ',' << p.label_t0 << ',';
    if (p.label_t1) out << *p.label_t1;
    out << ',' << to_string(p.change);
    auto write_features = [&](const std::optional<std::vector<double>>& f, std::size_t d) {
      for (std::size_t i = 0; i < d; ++i) {
        out << ',';
        if (f) out << format_double((*f)[i]);
      }
    };
    write_features(p.features_t0, d0);
    write_features(p.features_t1, d1);
    out << '\n';
  }
  write_legend(set.legend, legend_path_for(csv));
  atomic_write(csv, out.str());
}

ExtractionResult extract_features(const RasterStack& stack, const SampleSet& samples, Epoch epoch) {
  std::vector<std::string> outside;
  std::vector<std::optional<PixelIndex>> where(samples.points.size());
  for (std::size_t i = 0; i < samples.points.size(); ++i) {
    const auto& p = samples.points[i];
    where[i] = stack.transform().locate(p.x, p.y, stack.width(), stack.height());
    if (!where[i]) outside.push_back(p.id);
  }
  if (!outside.empty()) {
    std::string msg = "points outside raster extent:";
    for (const auto& id : outside) msg += " " + id;
    throw DataError(msg);
  }
  ExtractionResult result;
  result.samples.legend = samples.legend;
  for (std::size_t i = 0; i < samples.points.size(); ++i) {
    const std::size_t pixel = where[i]->row * stack.width() + where[i]->col;
    if (stack.is_nodata(pixel)) {
      result.nodata_ids.push_back(samples.points[i].id);
      continue;
    }
    SamplePoint p = samples.points[i];
    std::vector<double> f(stack.band_count());
    for (std::size_t b = 0; b < f.size(); ++b) f[b] = stack.value(b, pixel);
    p.features(epoch) = std::move(f);
    result.samples.points.push_back(std::move(p));
  }
  return result;
}

}  // namespace lcmigrate
