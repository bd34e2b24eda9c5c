#include "lcmigrate/migration.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lcmigrate/change_detection.hpp"
#include "lcmigrate/error.hpp"
#include "lcmigrate/io_util.hpp"
#include "lcmigrate/preprocess.hpp"
#include "lcmigrate/rng.hpp"

namespace lcmigrate {

using nlohmann::json;

std::string experiment_id(Experiment e) {
  switch (e) {
    case Experiment::E1_gold: return "1";
    case Experiment::E2_1_naive: return "2.1";
    case Experiment::E2_2_naive_norm: return "2.2";
    case Experiment::E3_wessels: return "3";
    case Experiment::E4_1_stable_manual: return "4.1";
    case Experiment::E4_2_stable_auto: return "4.2";
    case Experiment::E5_1_ssl_manual: return "5.1";
    case Experiment::E5_2_ssl_auto: return "5.2";
  }
  return "?";
}

std::string experiment_name(Experiment e) {
  switch (e) {
    case Experiment::E1_gold: return "E1_gold";
    case Experiment::E2_1_naive: return "E2_1_naive";
    case Experiment::E2_2_naive_norm: return "E2_2_naive_norm";
    case Experiment::E3_wessels: return "E3_wessels";
    case Experiment::E4_1_stable_manual: return "E4_1_stable_manual";
    case Experiment::E4_2_stable_auto: return "E4_2_stable_auto";
    case Experiment::E5_1_ssl_manual: return "E5_1_ssl_manual";
    case Experiment::E5_2_ssl_auto: return "E5_2_ssl_auto";
  }
  return "?";
}

Experiment experiment_from_string(const std::string& s) {
  for (auto e : kAllExperiments) {
    if (s == experiment_id(e) || s == experiment_name(e) || s == "E" + experiment_id(e)) return e;
  }
  throw DataError("unknown experiment '" + s + "'");
}

std::string to_string(ChangeSource s) { return s == ChangeSource::mask ? "mask" : "manual_flags"; }

namespace {
bool is_e4(Experiment e) { return e == Experiment::E4_1_stable_manual || e == Experiment::E4_2_stable_auto; }
bool is_e5(Experiment e) { return e == Experiment::E5_1_ssl_manual || e == Experiment::E5_2_ssl_auto; }
}  // namespace

ExperimentSpec ExperimentSpec::defaults(Experiment e, std::uint64_t seed) {
  ExperimentSpec s;
  s.experiment = e;
  s.seed = seed;
  s.forest.seed = seed;
  s.change_source = (e == Experiment::E4_1_stable_manual || e == Experiment::E5_1_ssl_manual)
                        ? ChangeSource::manual_flags
                        : ChangeSource::mask;
  s.normalization = e == Experiment::E2_2_naive_norm || is_e4(e) || is_e5(e);
  return s;
}

bool ExperimentSpec::uses_change_information() const {
  return experiment == Experiment::E3_wessels || is_e4(experiment) || is_e5(experiment);
}

void ExperimentSpec::validate() const {
  forest.validate();
  if (experiment == Experiment::E3_wessels && change_source != ChangeSource::mask) {
    throw DataError("experiment 3 samples from stable map areas and needs a change mask");
  }
  if (confidence_floor && std::isnan(*confidence_floor)) throw DataError("confidence floor is NaN");
}

json ExperimentSpec::to_json() const {
  json j;
  j["experiment"] = experiment_id(experiment);
  j["name"] = experiment_name(experiment);
  j["change_source"] = uses_change_information() ? json(to_string(change_source)) : json(nullptr);
  j["normalization"] = normalization;
  j["seed"] = seed;
  j["confidence_floor"] = confidence_floor ? json(*confidence_floor) : json(nullptr);
  json f;
  f["n_trees"] = forest.n_trees;
  f["max_features"] = forest.max_features ? json(*forest.max_features) : json("sqrt");
  f["min_samples_leaf"] = forest.min_samples_leaf;
  f["max_depth"] = forest.max_depth ? json(*forest.max_depth) : json(nullptr);
  f["seed"] = forest.seed;
  j["forest"] = f;
  if (experiment == Experiment::E3_wessels) {
    j["sample_total"] = sample_total ? json(*sample_total) : json(nullptr);
    j["min_per_class"] = min_per_class;
  }
  return j;
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::t0_reference: return "t0_reference";
    case Provenance::t1_reference: return "t1_reference";
    case Provenance::t1_stable: return "t1_stable";
    case Provenance::t1_pseudo: return "t1_pseudo";
    case Provenance::map_sample: return "map_sample";
  }
  return "?";
}

// ---------------------------------------------------------------------------

std::size_t TrainingBundle::count(Provenance p) const {
  return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), p));
}

void TrainingBundle::append(const SampleSet& samples, Epoch epoch, Provenance prov,
                            const std::vector<int>& row_labels) {
  if (row_labels.size() != samples.size()) throw DataError("bundle: label count mismatch");
  if (samples.size() == 0) return;
  const auto dim = samples.feature_dim(epoch);
  if (!dim) throw DataError("bundle: samples carry no " + to_string(epoch) + " features");
  if (features.rows() > 0 && static_cast<std::size_t>(features.cols()) != *dim) {
    throw DataError("bundle: feature dimension mismatch between row groups");
  }
  const Eigen::Index old_rows = features.rows();
  FeatureMatrix grown(old_rows + static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(*dim));
  if (old_rows > 0) grown.topRows(old_rows) = features;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& p = samples.points[i];
    const auto& f = p.features(epoch);
    if (!f) throw DataError("sample '" + p.id + "' has no " + to_string(epoch) + " features");
    for (std::size_t b = 0; b < *dim; ++b) {
      grown(old_rows + static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) = (*f)[b];
    }
    labels.push_back(row_labels[i]);
    provenance.push_back(prov);
    weights.push_back(1.0);
    row_ids.push_back(p.id + "@" + to_string(epoch));
    x.push_back(p.x);
    y.push_back(p.y);
  }
  features = std::move(grown);
}

void TrainingBundle::write_csv(const std::filesystem::path& path) const {
  std::ostringstream out;
  out << "row_id,provenance,label,weight\n";
  for (std::size_t i = 0; i < size(); ++i) {
    out << row_ids[i] << ',' << to_string(provenance[i]) << ',' << labels[i] << ',' << weights[i] << '\n';
  }
  atomic_write(path, out.str());
}

FeatureMatrix feature_matrix(const SampleSet& samples, Epoch epoch) {
  const auto dim = samples.feature_dim(epoch);
  if (!dim) throw DataError("samples carry no " + to_string(epoch) + " features");
  FeatureMatrix m(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(*dim));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& f = samples.points[i].features(epoch);
    if (!f) throw DataError("sample '" + samples.points[i].id + "' has no " + to_string(epoch) + " features");
    for (std::size_t b = 0; b < *dim; ++b) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) = (*f)[b];
  }
  return m;
}

// ---------------------------------------------------------------------------

namespace {

StableSplit partition(const SampleSet& samples, const std::vector<ChangeState>& states) {
  StableSplit out;
  out.stable.legend = samples.legend;
  out.changed.legend = samples.legend;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    SamplePoint p = samples.points[i];
    switch (states[i]) {
      case ChangeState::stable:
        p.label_t1 = p.label_t0;
        p.change = ChangeState::stable;
        out.stable.points.push_back(std::move(p));
        break;
      case ChangeState::changed:
        p.label_t1.reset();
        p.change = ChangeState::changed;
        out.changed.points.push_back(std::move(p));
        break;
      case ChangeState::unknown:
        out.unknown_ids.push_back(p.id);
        break;
    }
  }
  return out;
}

}  // namespace

StableSplit filter_stable(const SampleSet& samples) {
  std::vector<ChangeState> states;
  states.reserve(samples.size());
  for (const auto& p : samples.points) states.push_back(p.change);
  return partition(samples, states);
}

StableSplit filter_stable(const SampleSet& samples, const ChangeMask& mask) {
  std::vector<ChangeState> states;
  states.reserve(samples.size());
  for (const auto& p : samples.points) {
    switch (mask.flag_at(p.x, p.y)) {
      case ChangeFlag::stable: states.push_back(ChangeState::stable); break;
      case ChangeFlag::changed: states.push_back(ChangeState::changed); break;
      default: states.push_back(ChangeState::unknown); break;
    }
  }
  return partition(samples, states);
}

std::map<int, std::size_t> area_weighted_allocation(const std::map<int, std::size_t>& class_pixel_counts,
                                                     std::size_t total, std::size_t min_per_class) {
  if (class_pixel_counts.empty()) throw DataError("allocation: no classes");
  if (total < class_pixel_counts.size()) {
    throw DataError("allocation: total " + std::to_string(total) + " is smaller than the class count");
  }
  unsigned __int128 area = 0;
  for (const auto& [c, n] : class_pixel_counts) area += n;
  if (area == 0) throw DataError("allocation: total class area is zero");

  struct Share {
    int cls;
    std::size_t base;
    unsigned __int128 remainder;
  };
  std::vector<Share> shares;
  std::size_t assigned = 0;
  for (const auto& [c, n] : class_pixel_counts) {
    const unsigned __int128 q = static_cast<unsigned __int128>(total) * n;
    shares.push_back({c, static_cast<std::size_t>(q / area), q % area});
    assigned += shares.back().base;
  }
  // Remaining units go to the largest remainders; equal remainders favour the
  // larger class id.
  std::vector<std::size_t> order(shares.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
    if (shares[l].remainder != shares[r].remainder) return shares[l].remainder > shares[r].remainder;
    return shares[l].cls > shares[r].cls;
  });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++shares[order[i % order.size()]].base;

  std::map<int, std::size_t> out;
  for (const auto& s : shares) out[s.cls] = std::max(s.base, min_per_class);
  return out;
}

MapSampling stratified_sample_from_map(const ClassMap& class_map, const ChangeMask& stable_mask,
                                       const std::map<int, std::size_t>& allocation, std::uint64_t seed) {
  if (!same_geometry(class_map.width, class_map.height, class_map.transform, stable_mask.width,
                     stable_mask.height, stable_mask.transform)) {
    throw DataError("class map and stable mask do not share geometry");
  }
  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t p = 0; p < class_map.classes.size(); ++p) {
    const auto c = class_map.classes[p];
    if (c == kClassNodata || stable_mask.flags[p] != ChangeFlag::stable) continue;
    strata[c].push_back(p);
  }
  MapSampling out;
  out.samples.legend = class_map.legend;
  for (const auto& [cls, want] : allocation) {
    auto& pixels = strata[cls];
    std::vector<std::size_t> chosen;
    if (pixels.size() <= want) {
      chosen = pixels;
      if (pixels.size() < want) out.shortfall[cls] = want - pixels.size();
    } else {
      Rng rng = make_rng(seed, static_cast<std::uint64_t>(cls));
      for (std::size_t i = 0; i < want; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pixels.size() - 1);
        std::swap(pixels[i], pixels[pick(rng)]);
      }
      chosen.assign(pixels.begin(), pixels.begin() + static_cast<std::ptrdiff_t>(want));
      std::sort(chosen.begin(), chosen.end());
    }
    for (auto p : chosen) {
      SamplePoint s;
      s.id = "map_" + std::to_string(p);
      auto [x, y] = class_map.transform.pixel_center(p % class_map.width, p / class_map.width);
      s.x = x;
      s.y = y;
      s.label_t0 = cls;
      s.label_t1 = cls;
      s.change = ChangeState::stable;
      out.samples.points.push_back(std::move(s));
    }
  }
  return out;
}

PseudoLabels pseudo_label(const TrainedModel& model, const SampleSet& changed,
                          std::optional<double> confidence_floor) {
  PseudoLabels out;
  out.samples.legend = changed.legend;
  if (changed.size() == 0) return out;
  for (const auto& p : changed.points) {
    if (!p.features_t1) throw DataError("pseudo_label: sample '" + p.id + "' has no t1 features");
  }
  const FeatureMatrix x = feature_matrix(changed, Epoch::t1);
  const Eigen::MatrixXd proba = model.predict_proba(x);
  const auto& classes = model.classes();
  for (std::size_t i = 0; i < changed.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < proba.cols(); ++c) {
      if (proba(row, c) > proba(row, best)) best = c;
    }
    if (confidence_floor && proba(row, best) < *confidence_floor) {
      ++out.dropped;
      continue;
    }
    SamplePoint p = changed.points[i];
    p.label_t1 = classes[static_cast<std::size_t>(best)];
    p.change = ChangeState::changed;
    out.samples.points.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::pair<SampleSet, std::size_t> prepare_samples(const ExperimentSpec& spec, const SampleSet& samples,
                                                  const RasterPair& rasters) {
  SampleSet current = samples;
  std::size_t dropped = 0;
  for (Epoch e : {Epoch::t0, Epoch::t1}) {
    const RasterStack& r = e == Epoch::t0 ? rasters.t0 : rasters.t1;
    const bool missing = std::any_of(current.points.begin(), current.points.end(),
                                     [&](const SamplePoint& p) { return !p.features(e); });
    if (missing) {
      SampleSet need;
      need.legend = current.legend;
      std::vector<SamplePoint> kept;
      for (auto& p : current.points) (p.features(e) ? kept : need.points).push_back(std::move(p));
      auto extracted = extract_features(r, need, e);
      dropped += extracted.nodata_ids.size();
      for (auto& p : extracted.samples.points) kept.push_back(std::move(p));
      // Restore the caller's order.
      std::map<std::string, std::size_t> rank;
      for (std::size_t i = 0; i < samples.size(); ++i) rank[samples.points[i].id] = i;
      std::sort(kept.begin(), kept.end(),
                [&](const SamplePoint& a, const SamplePoint& b) { return rank[a.id] < rank[b.id]; });
      current.points = std::move(kept);
    }
    if (r.band_count() != current.feature_dim(e).value_or(r.band_count())) {
      throw DataError(to_string(e) + " features have " + std::to_string(*current.feature_dim(e)) +
                      " values but the raster has " + std::to_string(r.band_count()) + " bands");
    }
  }
  if (spec.normalization) {
    std::vector<SamplePoint> kept;
    for (auto& p : current.points) {
      auto n0 = l2_normalize(*p.features_t0);
      auto n1 = l2_normalize(*p.features_t1);
      if (!n0 || !n1) {
        ++dropped;
        continue;
      }
      p.features_t0 = std::move(*n0);
      p.features_t1 = std::move(*n1);
      kept.push_back(std::move(p));
    }
    current.points = std::move(kept);
  }
  return {std::move(current), dropped};
}

namespace {

std::vector<int> labels_t0(const SampleSet& s) {
  std::vector<int> out;
  out.reserve(s.size());
  for (const auto& p : s.points) out.push_back(p.label_t0);
  return out;
}

std::vector<int> labels_t1(const SampleSet& s) {
  std::vector<int> out;
  out.reserve(s.size());
  for (const auto& p : s.points) {
    if (!p.label_t1) throw DataError("sample '" + p.id + "' has no t1 label");
    out.push_back(*p.label_t1);
  }
  return out;
}

std::unique_ptr<TrainedModel> fit_bundle(const Classifier& classifier, const TrainingBundle& bundle,
                                         const Legend& legend) {
  auto model = classifier.fit(bundle.features, bundle.labels, bundle.row_ids);
  model->set_legend(legend);
  return model;
}

StableSplit split_for(const ExperimentSpec& spec, const SampleSet& samples, const ChangeMask* mask) {
  if (spec.change_source == ChangeSource::mask) {
    if (!mask) throw DataError("experiment " + experiment_id(spec.experiment) + " needs a change mask");
    return filter_stable(samples, *mask);
  }
  return filter_stable(samples);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, const SampleSet& samples,
                                const RasterPair& rasters, const ChangeMask* mask,
                                const Classifier& classifier, const RunOptions& options) {
  spec.validate();
  samples.validate();
  if (rasters.t0.band_count() != rasters.t1.band_count()) {
    throw DataError("t0 and t1 rasters have different band counts");
  }
  if (spec.uses_change_information() && spec.change_source == ChangeSource::mask && !mask) {
    throw DataError("experiment " + experiment_id(spec.experiment) + " needs a change mask");
  }
  ExperimentResult result;
  auto [prepared, excluded] = options.samples_prepared ? std::pair<SampleSet, std::size_t>{samples, 0}
                                                       : prepare_samples(spec, samples, rasters);
  result.preprocessing_excluded = excluded;
  if (excluded > 0) {
    result.warnings.push_back(std::to_string(excluded) + " sample(s) dropped during feature preparation");
  }

  std::optional<RasterStack> norm_t0, norm_t1;
  auto raster_t1 = [&]() -> const RasterStack& {
    if (!spec.normalization) return rasters.t1;
    if (!norm_t1) norm_t1 = l2_normalize(rasters.t1).stack;
    return *norm_t1;
  };
  auto raster_t0 = [&]() -> const RasterStack& {
    if (!spec.normalization) return rasters.t0;
    if (!norm_t0) norm_t0 = l2_normalize(rasters.t0).stack;
    return *norm_t0;
  };

  const Experiment e = spec.experiment;
  TrainingBundle& bundle = result.bundle;
  if (e == Experiment::E1_gold) {
    SampleSet relabeled;
    relabeled.legend = prepared.legend;
    for (const auto& p : prepared.points) {
      if (p.label_t1) relabeled.points.push_back(p);
    }
    if (relabeled.size() < prepared.size()) {
      result.warnings.push_back(std::to_string(prepared.size() - relabeled.size()) +
                                " sample(s) without a t1 label left out of gold-standard training");
    }
    bundle.append(relabeled, Epoch::t1, Provenance::t1_reference, labels_t1(relabeled));
    result.model = fit_bundle(classifier, bundle, samples.legend);
  } else if (e == Experiment::E2_1_naive || e == Experiment::E2_2_naive_norm) {
    bundle.append(prepared, Epoch::t0, Provenance::t0_reference, labels_t0(prepared));
    result.model = fit_bundle(classifier, bundle, samples.legend);
  } else if (e == Experiment::E3_wessels) {
    TrainingBundle t0_bundle;
    t0_bundle.append(prepared, Epoch::t0, Provenance::t0_reference, labels_t0(prepared));
    auto t0_model = fit_bundle(classifier, t0_bundle, samples.legend);
    const RasterStack& r0 = raster_t0();
    const ClassMap map_t0 = predict_raster(*t0_model, r0, &samples.legend);
    const ChangeMask grid_mask = resample_mask(*mask, r0.width(), r0.height(), r0.transform());
    std::map<int, std::size_t> areas;
    std::size_t stable_pixels = 0;
    for (const auto& [id, name] : samples.legend) areas[id] = 0;
    for (std::size_t p = 0; p < map_t0.classes.size(); ++p) {
      if (map_t0.classes[p] == kClassNodata || grid_mask.flags[p] != ChangeFlag::stable) continue;
      ++areas[map_t0.classes[p]];
      ++stable_pixels;
    }
    if (stable_pixels == 0) throw DataError("experiment 3: no stable pixels to sample from");
    const std::size_t total = std::max<std::size_t>(
        spec.sample_total.value_or(static_cast<std::size_t>(std::ceil(1e-4 * static_cast<double>(stable_pixels)))),
        areas.size());
    result.allocation = area_weighted_allocation(areas, total, spec.min_per_class);
    MapSampling drawn = stratified_sample_from_map(map_t0, grid_mask, result.allocation, spec.seed);
    result.shortfall = drawn.shortfall;
    for (const auto& [cls, n] : drawn.shortfall) {
      result.warnings.push_back("class " + std::to_string(cls) + ": " + std::to_string(n) +
                                " allocated map samples unavailable");
    }
    auto extracted = extract_features(raster_t1(), drawn.samples, Epoch::t1);
    if (!extracted.nodata_ids.empty()) {
      result.warnings.push_back(std::to_string(extracted.nodata_ids.size()) +
                                " map sample(s) fall on t1 nodata and were skipped");
    }
    bundle.append(extracted.samples, Epoch::t1, Provenance::map_sample, labels_t0(extracted.samples));
    result.model = fit_bundle(classifier, bundle, samples.legend);
  } else {
    // 4.x and stage 1 of 5.x.
    StableSplit split = split_for(spec, prepared, mask);
    result.unknown_excluded = split.unknown_ids.size();
    if (!split.unknown_ids.empty()) {
      result.warnings.push_back(std::to_string(split.unknown_ids.size()) +
                                " sample(s) with unknown change state excluded from t1 training");
    }
    bundle.append(prepared, Epoch::t0, Provenance::t0_reference, labels_t0(prepared));
    bundle.append(split.stable, Epoch::t1, Provenance::t1_stable, labels_t0(split.stable));
    result.model = fit_bundle(classifier, bundle, samples.legend);
    if (is_e5(e)) {
      PseudoLabels pseudo = pseudo_label(*result.model, split.changed, spec.confidence_floor);
      result.pseudo_dropped = pseudo.dropped;
      bundle.append(pseudo.samples, Epoch::t1, Provenance::t1_pseudo, labels_t1(pseudo.samples));
      result.stage1_model = std::move(result.model);
      result.model = fit_bundle(classifier, bundle, samples.legend);
    }
  }
  if (options.produce_map) result.map_t1 = predict_raster(*result.model, raster_t1(), &samples.legend);
  return result;
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const SampleSet& samples,
                                const RasterPair& rasters, const ChangeMask* mask, const RunOptions& options) {
  RandomForest forest(spec.forest);
  return run_experiment(spec, samples, rasters, mask, forest, options);
}

ReferenceMask irmad_reference_mask(const RasterStack& t0, const RasterStack& t1, const SampleSet& reference,
                                   const IrmadOptions& options) {
  ReferenceMask out;
  out.irmad = irmad(t0, t1, options);
  std::vector<double> z;
  std::vector<bool> changed;
  for (const auto& p : reference.points) {
    if (p.change == ChangeState::unknown) continue;
    const auto px = t0.transform().locate(p.x, p.y, t0.width(), t0.height());
    if (!px) continue;
    const double v = out.irmad.z.values[px->row * t0.width() + px->col];
    if (std::isnan(v)) continue;
    z.push_back(v);
    changed.push_back(p.change == ChangeState::changed);
  }
  out.reference_points = z.size();
  if (z.empty()) throw DataError("no reference point with a known change flag falls on valid IRMAD output");
  const auto positives = static_cast<std::size_t>(std::count(changed.begin(), changed.end(), true));
  if (positives == 0 || positives == changed.size()) {
    // No precision-recall curve without both classes; use the customary
    // 99.9th percentile instead.
    out.warnings.push_back("reference points are all " + std::string(positives == 0 ? "stable" : "changed") +
                           "; thresholding Z at the 99.9th percentile");
    out.mask = threshold_percentile(out.irmad.z, 99.9);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.optimum = {*out.mask.threshold, nan, nan, nan};
    return out;
  }
  out.optimum = threshold_pr_optimal(z, changed);
  out.mask = threshold_value(out.irmad.z, out.optimum.threshold, MaskProvenance::irmad_pr);
  return out;
}

}  // namespace lcmigrate
