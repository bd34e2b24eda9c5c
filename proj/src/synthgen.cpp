#include "lcmigrate/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lcmigrate/error.hpp"
#include "lcmigrate/io_util.hpp"
#include "lcmigrate/rng.hpp"

namespace lcmigrate {

using nlohmann::json;

namespace {

// Stream ids for the independent random draws of one scene.
enum Stream : std::uint64_t {
  kMeans = 1,
  kClassFields = 100,
  kChangeField = 200,
  kTargetFields = 300,
  kNoiseT0 = 400,
  kNoiseT1 = 401,
  kPoints = 500,
  kNoveltyDirections = 600,
};

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double norm(const std::vector<double>& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

std::vector<BandSpec> synth_bands(int n) {
  std::vector<BandSpec> bands;
  for (int b = 0; b < n; ++b) {
    const double center = n == 1 ? 650.0 : 450.0 + (2200.0 - 450.0) * b / (n - 1);
    bands.push_back({"b" + std::to_string(b + 1), center, 30.0});
  }
  return bands;
}

Legend synth_legend(int n) {
  Legend legend;
  for (int c = 0; c < n; ++c) legend[c] = "class_" + std::to_string(c);
  return legend;
}

}  // namespace

void SynthConfig::validate() const {
  if (width == 0 || height == 0) throw DataError("synth: width and height must be positive");
  if (n_classes < 2 || n_classes > 254) throw DataError("synth: n_classes must lie in [2, 254]");
  if (n_bands < 1) throw DataError("synth: n_bands must be positive");
  if (!(noise_sigma > 0.0)) throw DataError("synth: noise_sigma must be > 0");
  if (!(change_fraction >= 0.0 && change_fraction < 1.0)) throw DataError("synth: change_fraction must lie in [0, 1)");
  if (!(change_mixing >= 0.0 && change_mixing < 1.0)) throw DataError("synth: change_mixing must lie in [0, 1)");
  if (expanding_class < -1 || expanding_class >= n_classes) throw DataError("synth: expanding_class out of range");
  if (!(change_novelty >= 0.0 && std::isfinite(change_novelty))) throw DataError("synth: change_novelty must be >= 0");
  if (!std::isfinite(expansion_bias)) throw DataError("synth: expansion_bias must be finite");
  if (!(correlation_length > 0.0)) throw DataError("synth: correlation_length must be > 0");
  if (!(pixel_size > 0.0)) throw DataError("synth: pixel_size must be > 0");
  if (n_reference_points > width * height) throw DataError("synth: more reference points than pixels");
  if (drift.size() != 1 && drift.size() != static_cast<std::size_t>(n_bands)) {
    throw DataError("synth: drift needs 1 or n_bands entries");
  }
  for (const auto& d : drift) {
    if (d.gain == 0.0 || !std::isfinite(d.gain) || !std::isfinite(d.offset)) throw DataError("synth: drift must be finite and invertible");
  }
  if (!class_means.empty()) {
    if (class_means.size() != static_cast<std::size_t>(n_classes)) throw DataError("synth: class_means needs n_classes rows");
    for (const auto& row : class_means) {
      if (row.size() != static_cast<std::size_t>(n_bands)) throw DataError("synth: class_means rows need n_bands values");
    }
  } else if (!(mean_high > mean_low)) {
    throw DataError("synth: mean_high must exceed mean_low");
  }
}

BandDrift SynthConfig::drift_for(int band) const {
  return drift.size() == 1 ? drift[0] : drift[static_cast<std::size_t>(band)];
}

json SynthConfig::to_json() const {
  json j;
  j["width"] = width;
  j["height"] = height;
  j["n_classes"] = n_classes;
  j["n_bands"] = n_bands;
  j["class_means"] = class_means;
  j["noise_sigma"] = noise_sigma;
  j["change_fraction"] = change_fraction;
  j["change_mixing"] = change_mixing;
  j["change_novelty"] = change_novelty;
  j["expanding_class"] = expanding_class;
  j["expansion_bias"] = expansion_bias;
  json d = json::array();
  for (const auto& x : drift) d.push_back({{"gain", x.gain}, {"offset", x.offset}});
  j["drift"] = d;
  j["correlation_length"] = correlation_length;
  j["n_reference_points"] = n_reference_points;
  j["seed"] = seed;
  j["pixel_size"] = pixel_size;
  j["origin_x"] = origin_x;
  j["origin_y"] = origin_y;
  j["mean_low"] = mean_low;
  j["mean_high"] = mean_high;
  return j;
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  try {
    if (j.contains("preset")) c = preset(j.at("preset").get<std::string>(), j.value("seed", std::uint64_t{0}));
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.n_bands = j.value("n_bands", c.n_bands);
    if (j.contains("class_means")) c.class_means = j.at("class_means").get<std::vector<std::vector<double>>>();
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.change_fraction = j.value("change_fraction", c.change_fraction);
    c.change_mixing = j.value("change_mixing", c.change_mixing);
    c.change_novelty = j.value("change_novelty", c.change_novelty);
    c.expanding_class = j.value("expanding_class", c.expanding_class);
    c.expansion_bias = j.value("expansion_bias", c.expansion_bias);
    if (j.contains("drift")) {
      c.drift.clear();
      const auto& d = j.at("drift");
      if (d.is_object()) {
        c.drift.push_back({d.value("gain", 1.0), d.value("offset", 0.0)});
      } else {
        for (const auto& x : d) c.drift.push_back({x.value("gain", 1.0), x.value("offset", 0.0)});
      }
    }
    c.correlation_length = j.value("correlation_length", c.correlation_length);
    c.n_reference_points = j.value("n_reference_points", c.n_reference_points);
    c.seed = j.value("seed", c.seed);
    c.pixel_size = j.value("pixel_size", c.pixel_size);
    c.origin_x = j.value("origin_x", c.origin_x);
    c.origin_y = j.value("origin_y", c.origin_y);
    c.mean_low = j.value("mean_low", c.mean_low);
    c.mean_high = j.value("mean_high", c.mean_high);
  } catch (const json::exception& e) {
    throw DataError(std::string("synth config: ") + e.what());
  }
  c.validate();
  return c;
}

SynthConfig SynthConfig::preset(const std::string& name, std::uint64_t seed) {
  SynthConfig c;
  c.seed = seed;
  c.n_bands = 6;
  if (name == "small") {
    c.width = 128;
    c.height = 128;
    c.n_classes = 4;
    c.change_fraction = 0.05;
    c.drift = {BandDrift{1.05, 0.0}};
    c.correlation_length = 5.0;
    c.n_reference_points = 400;
    return c;
  }
  if (name == "bench") {
    c.width = 256;
    c.height = 256;
    // Close class means, so the 10 % gain drift carries t1 pixels across class
    // boundaries; low noise keeps spectral shape separable after L2
    // normalization. Changed pixels take spectra the t0 data never shows.
    c.n_classes = 10;
    c.noise_sigma = 0.01;
    c.mean_low = 0.2;
    c.mean_high = 0.35;
    c.change_novelty = 6.0;
    c.change_fraction = 0.15;
    c.drift = {BandDrift{1.1, 0.0}};
    c.correlation_length = 8.0;
    c.n_reference_points = 1500;
    return c;
  }
  throw DataError("unknown synth preset '" + name + "' (expected small or bench)");
}

std::vector<std::vector<double>> generate_class_means(const SynthConfig& config) {
  Rng rng = make_rng(config.seed, kMeans);
  std::uniform_real_distribution<double> u(config.mean_low, config.mean_high);
  const double min_sep = 3.0 * config.noise_sigma;
  std::vector<std::vector<double>> means;
  for (int c = 0; c < config.n_classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
      std::vector<double> m(static_cast<std::size_t>(config.n_bands));
      for (auto& v : m) v = u(rng);
      placed = true;
      for (const auto& other : means) {
        std::vector<double> a = m, b = other;
        const double na = norm(a), nb = norm(b);
        for (auto& v : a) v /= na;
        for (auto& v : b) v /= nb;
        if (distance(m, other) < min_sep || distance(a, b) * std::min(na, nb) < min_sep) {
          placed = false;
          break;
        }
      }
      if (placed) means.push_back(std::move(m));
    }
    if (!placed) throw DataError("synth: could not place " + std::to_string(config.n_classes) + " separated class means");
  }
  return means;
}

std::vector<double> smooth_noise_field(std::size_t width, std::size_t height, double sigma_px, std::uint64_t seed,
                                       std::uint64_t stream) {
  Rng rng = make_rng(seed, stream);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> field(width * height);
  for (auto& v : field) v = n01(rng);

  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_px)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma_px * sigma_px));
    ksum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= ksum;
  auto reflect = [](long i, long n) {
    if (n == 1) return 0L;
    const long period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };
  const long w = static_cast<long>(width), h = static_cast<long>(height);
  std::vector<double> tmp(field.size());
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += kernel[static_cast<std::size_t>(k + radius)] * field[static_cast<std::size_t>(r * w + reflect(c + k, w))];
      tmp[static_cast<std::size_t>(r * w + c)] = s;
    }
  }
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += kernel[static_cast<std::size_t>(k + radius)] * tmp[static_cast<std::size_t>(reflect(r + k, h) * w + c)];
      field[static_cast<std::size_t>(r * w + c)] = s;
    }
  }
  // Rescale to unit variance so thresholds do not depend on the kernel width.
  const double mean = std::accumulate(field.begin(), field.end(), 0.0) / static_cast<double>(field.size());
  double ss = 0.0;
  for (double v : field) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(field.size()));
  for (auto& v : field) v = sd > 0.0 ? (v - mean) / sd : 0.0;
  return field;
}

SynthScene generate(const SynthConfig& input) {
  input.validate();
  SynthConfig config = input;
  if (config.class_means.empty()) config.class_means = generate_class_means(config);
  const std::size_t w = config.width, h = config.height, n = w * h;
  const auto nc = static_cast<std::size_t>(config.n_classes);
  const auto nb = static_cast<std::size_t>(config.n_bands);
  const GeoTransform transform{config.origin_x, config.origin_y, config.pixel_size, -config.pixel_size};
  const Legend legend = synth_legend(config.n_classes);

  // t0 classes: argmax over one smoothed field per class.
  std::vector<std::vector<double>> class_fields, target_fields;
  for (std::size_t c = 0; c < nc; ++c) {
    class_fields.push_back(smooth_noise_field(w, h, config.correlation_length, config.seed, kClassFields + c));
    target_fields.push_back(smooth_noise_field(w, h, config.correlation_length, config.seed, kTargetFields + c));
  }
  std::vector<std::uint8_t> class0(n), class1(n);
  if (config.expanding_class >= 0) {
    for (auto& v : class_fields[static_cast<std::size_t>(config.expanding_class)]) v -= config.expansion_bias;
  }
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < nc; ++c) {
      if (class_fields[c][p] > class_fields[best][p]) best = c;
    }
    class0[p] = static_cast<std::uint8_t>(best);
  }

  // Change: the highest values of another smoothed field, so changed pixels
  // come in clumps. Each changed pixel takes the locally dominant other class.
  class1 = class0;
  const auto n_changed = static_cast<std::size_t>(std::llround(config.change_fraction * static_cast<double>(n)));
  std::vector<std::uint8_t> changed(n, 0);
  if (n_changed > 0) {
    const auto change_field = smooth_noise_field(w, h, config.correlation_length, config.seed, kChangeField);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_changed - 1), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       if (change_field[a] != change_field[b]) return change_field[a] > change_field[b];
                       return a < b;
                     });
    for (std::size_t i = 0; i < n_changed; ++i) {
      const std::size_t p = order[i];
      changed[p] = 1;
      std::size_t best = nc;
      auto score = [&](std::size_t c) {
        return target_fields[c][p] + (static_cast<int>(c) == config.expanding_class ? config.expansion_bias : 0.0);
      };
      for (std::size_t c = 0; c < nc; ++c) {
        if (c == class0[p]) continue;
        if (best == nc || score(c) > score(best)) best = c;
      }
      class1[p] = static_cast<std::uint8_t>(best);
    }
  }

  // One unit direction per class for the novelty shift.
  std::vector<std::vector<double>> novelty(nc, std::vector<double>(nb, 0.0));
  if (config.change_novelty > 0.0) {
    std::normal_distribution<double> n01(0.0, 1.0);
    for (std::size_t c = 0; c < nc; ++c) {
      Rng rng = make_rng(config.seed, kNoveltyDirections + c);
      for (auto& v : novelty[c]) v = n01(rng);
      const double len = norm(novelty[c]);
      for (auto& v : novelty[c]) v *= config.change_novelty * config.noise_sigma / len;
    }
  }

  std::vector<float> data0(n * nb), data1(n * nb);
  {
    Rng rng0 = make_rng(config.seed, kNoiseT0);
    Rng rng1 = make_rng(config.seed, kNoiseT1);
    std::normal_distribution<double> noise(0.0, config.noise_sigma);
    for (std::size_t b = 0; b < nb; ++b) {
      const BandDrift d = config.drift_for(static_cast<int>(b));
      for (std::size_t p = 0; p < n; ++p) {
        data0[b * n + p] = static_cast<float>(config.class_means[class0[p]][b] + noise(rng0));
        double mean1 = config.class_means[class1[p]][b];
        if (changed[p]) {
          mean1 = (1.0 - config.change_mixing) * mean1 + config.change_mixing * config.class_means[class0[p]][b] +
                  novelty[class1[p]][b];
        }
        data1[b * n + p] = static_cast<float>(d.gain * (mean1 + noise(rng1)) + d.offset);
      }
    }
  }
  const auto bands = synth_bands(config.n_bands);
  SynthScene scene{config,
                   RasterStack(w, h, bands, std::move(data0), transform),
                   RasterStack(w, h, bands, std::move(data1), transform),
                   ClassMap{w, h, transform, class0, legend},
                   ClassMap{w, h, transform, class1, legend},
                   ChangeMask{},
                   SampleSet{}};
  scene.truth_change_mask.width = w;
  scene.truth_change_mask.height = h;
  scene.truth_change_mask.transform = transform;
  scene.truth_change_mask.provenance = MaskProvenance::manual;
  scene.truth_change_mask.flags.resize(n);
  for (std::size_t p = 0; p < n; ++p) {
    scene.truth_change_mask.flags[p] = changed[p] ? ChangeFlag::changed : ChangeFlag::stable;
  }

  // Reference points: distinct pixels drawn uniformly, kept in draw order.
  Rng rng = make_rng(config.seed, kPoints);
  std::vector<std::size_t> pixels(n);
  std::iota(pixels.begin(), pixels.end(), 0);
  scene.samples.legend = legend;
  const int id_width = static_cast<int>(std::to_string(config.n_reference_points).size());
  for (std::size_t i = 0; i < config.n_reference_points; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pixels[i], pixels[pick(rng)]);
    const std::size_t p = pixels[i];
    SamplePoint s;
    std::string num = std::to_string(i);
    s.id = "pt" + std::string(static_cast<std::size_t>(id_width) - num.size(), '0') + num;
    std::tie(s.x, s.y) = transform.pixel_center(p % w, p / w);
    s.label_t0 = class0[p];
    s.label_t1 = class1[p];
    s.change = changed[p] ? ChangeState::changed : ChangeState::stable;
    scene.samples.points.push_back(std::move(s));
  }
  return scene;
}

std::vector<std::filesystem::path> write_scene(const SynthScene& scene, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  auto add = [&](const std::filesystem::path& p) { out.push_back(p); };
  write_raster(scene.raster_t0, dir / "t0");
  add(dir / "t0.json");
  add(dir / "t0.bsq");
  write_raster(scene.raster_t1, dir / "t1");
  add(dir / "t1.json");
  add(dir / "t1.bsq");
  write_class_map(scene.classmap_t0, dir / "classmap_t0");
  add(dir / "classmap_t0.json");
  add(dir / "classmap_t0.bsq");
  write_class_map(scene.classmap_t1, dir / "classmap_t1");
  add(dir / "classmap_t1.json");
  add(dir / "classmap_t1.bsq");
  write_change_mask(scene.truth_change_mask, dir / "truth_change");
  add(dir / "truth_change.json");
  add(dir / "truth_change.bsq");
  write_samples(scene.samples, dir / "samples.csv");
  add(dir / "samples.csv");
  add(legend_path_for(dir / "samples.csv"));
  atomic_write(dir / "synth_config.json", scene.config.to_json().dump(2) + "\n");
  add(dir / "synth_config.json");
  return out;
}

}  // namespace lcmigrate
