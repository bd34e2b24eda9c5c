#include "lcmigrate/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "lcmigrate/error.hpp"
#include "lcmigrate/rng.hpp"

namespace lcmigrate {

using nlohmann::json;

std::vector<std::size_t> FoldAssignment::fold_sizes() const {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
  for (int f : fold) ++sizes[static_cast<std::size_t>(f)];
  return sizes;
}

namespace {

double sq_dist(const Coord& a, const Coord& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  return dx * dx + dy * dy;
}

// Nearest centroid, ties to the lowest index. Returns the total inertia.
double assign(std::span<const Coord> coords, const std::vector<Coord>& centroids, std::vector<int>& labels) {
  double inertia = 0.0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    int best = 0;
    double best_d = sq_dist(coords[i], centroids[0]);
    for (std::size_t c = 1; c < centroids.size(); ++c) {
      const double d = sq_dist(coords[i], centroids[c]);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    labels[i] = best;
    inertia += best_d;
  }
  return inertia;
}

std::vector<Coord> kmeans_pp(std::span<const Coord> coords, int k, Rng& rng) {
  const std::size_t n = coords.size();
  std::vector<Coord> centroids;
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  centroids.push_back(coords[first(rng)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(coords[i], centroids[0]);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (static_cast<int>(centroids.size()) < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double run = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        run += d2[i];
        if (d2[i] > 0.0 && run > target) {
          pick = i;
          break;
        }
      }
      if (pick == n) {  // rounding at the tail
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    }
    if (pick == n) throw DataError("kmeans: ran out of distinct coordinates");
    centroids.push_back(coords[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(coords[i], centroids.back()));
  }
  return centroids;
}

}  // namespace

FoldAssignment kmeans_folds(std::span<const Coord> coords, int k, std::uint64_t seed,
                            const KMeansOptions& options, KMeansTrace* trace) {
  if (k < 1) throw DataError("kmeans: k must be at least 1");
  if (options.restarts < 1 || options.max_iter < 1) throw DataError("kmeans: restarts and max_iter must be positive");
  std::set<Coord> distinct(coords.begin(), coords.end());
  if (distinct.size() < static_cast<std::size_t>(k)) {
    throw DataError("kmeans: " + std::to_string(distinct.size()) + " distinct coordinates for k=" +
                    std::to_string(k));
  }
  for (const auto& c : coords) {
    if (!std::isfinite(c[0]) || !std::isfinite(c[1])) throw DataError("kmeans: non-finite coordinate");
  }
  const std::size_t n = coords.size();
  FoldAssignment best;
  best.k = k;
  best.seed = seed;
  best.inertia = std::numeric_limits<double>::infinity();
  if (trace) trace->inertia.clear();

  for (int restart = 0; restart < options.restarts; ++restart) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(restart));
    std::vector<Coord> centroids = kmeans_pp(coords, k, rng);
    std::vector<int> labels(n, -1), previous;
    std::vector<double> history;
    for (int it = 0; it < options.max_iter; ++it) {
      previous = labels;
      history.push_back(assign(coords, centroids, labels));
      if (labels == previous) break;
      std::vector<Coord> sums(static_cast<std::size_t>(k), Coord{0.0, 0.0});
      std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
      for (std::size_t i = 0; i < n; ++i) {
        auto& s = sums[static_cast<std::size_t>(labels[i])];
        s[0] += coords[i][0];
        s[1] += coords[i][1];
        ++counts[static_cast<std::size_t>(labels[i])];
      }
      for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
        if (counts[c] > 0) {
          centroids[c] = {sums[c][0] / static_cast<double>(counts[c]), sums[c][1] / static_cast<double>(counts[c])};
          continue;
        }
        // Empty cluster: move it onto the point farthest from its centroid.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = sq_dist(coords[i], centroids[static_cast<std::size_t>(labels[i])]);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        centroids[c] = coords[far];
        labels[far] = static_cast<int>(c);
      }
    }
    const double inertia = assign(coords, centroids, labels);
    if (trace) trace->inertia.push_back(std::move(history));
    if (inertia < best.inertia) {
      best.inertia = inertia;
      best.fold = labels;
      best.centroids = centroids;
    }
  }
  return best;
}

std::vector<Coord> coordinates(const SampleSet& samples) {
  std::vector<Coord> out;
  out.reserve(samples.size());
  for (const auto& p : samples.points) out.push_back({p.x, p.y});
  return out;
}

LltoSplit llto_split(const SampleSet& samples, std::span<const int> folds, int test_fold) {
  if (folds.size() != samples.size()) throw DataError("llto_split: fold ids do not match the samples");
  LltoSplit out;
  out.train.legend = samples.legend;
  out.test.legend = samples.legend;
  bool any = false;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& p = samples.points[i];
    if (folds[i] != test_fold) {
      out.train.points.push_back(p);
      continue;
    }
    any = true;
    out.discarded_t0_ids.push_back(p.id);
    if (!p.label_t1) {
      out.unlabeled_test_ids.push_back(p.id);
      continue;
    }
    SamplePoint t1 = p;
    t1.features_t0.reset();
    out.test.points.push_back(std::move(t1));
  }
  if (!any || out.test.size() == 0) {
    throw DataError("llto_split: test fold " + std::to_string(test_fold) + " has no labelled t1 samples");
  }
  return out;
}

SampleSet proximity_filter(const SampleSet& validation, std::span<const Coord> training, double radius_m) {
  SampleSet out;
  out.legend = validation.legend;
  if (!(radius_m > 0.0) || training.empty()) {
    out.points = validation.points;
    return out;
  }
  // Uniform grid with cells of one radius; only the 3x3 neighbourhood can
  // hold a point closer than the radius.
  auto cell = [&](double v) { return static_cast<long long>(std::floor(v / radius_m)); };
  struct KeyHash {
    std::size_t operator()(const std::pair<long long, long long>& k) const {
      return std::hash<long long>()(k.first) * 1000003u ^ std::hash<long long>()(k.second);
    }
  };
  std::unordered_map<std::pair<long long, long long>, std::vector<Coord>, KeyHash> grid;
  for (const auto& t : training) grid[{cell(t[0]), cell(t[1])}].push_back(t);
  const double r2 = radius_m * radius_m;
  for (const auto& p : validation.points) {
    const long long cx = cell(p.x), cy = cell(p.y);
    bool near = false;
    for (long long dx = -1; dx <= 1 && !near; ++dx) {
      for (long long dy = -1; dy <= 1 && !near; ++dy) {
        auto it = grid.find({cx + dx, cy + dy});
        if (it == grid.end()) continue;
        for (const auto& t : it->second) {
          if (sq_dist({p.x, p.y}, t) < r2) {
            near = true;
            break;
          }
        }
      }
    }
    if (!near) out.points.push_back(p);
  }
  return out;
}

Metrics metrics(std::span<const int> truth, std::span<const int> predicted, const Legend& legend) {
  if (truth.size() != predicted.size()) throw DataError("metrics: truth and prediction lengths differ");
  if (truth.empty()) throw DataError("metrics: no samples");
  Metrics m;
  std::map<int, std::size_t> index;
  for (const auto& [id, name] : legend) {
    index[id] = m.classes.size();
    m.classes.push_back(id);
  }
  const std::size_t c = m.classes.size();
  m.confusion.assign(c, std::vector<std::size_t>(c, 0));
  auto at = [&](int label) {
    auto it = index.find(label);
    if (it == index.end()) throw DataError("metrics: label " + std::to_string(label) + " is not in the legend");
    return it->second;
  };
  for (std::size_t i = 0; i < truth.size(); ++i) ++m.confusion[at(truth[i])][at(predicted[i])];

  std::size_t diag = 0;
  double f1_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < c; ++i) {
    diag += m.confusion[i][i];
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += m.confusion[i][j];
      col += m.confusion[j][i];
    }
    const double tp = static_cast<double>(m.confusion[i][i]);
    const double precision = col == 0 ? 0.0 : tp / static_cast<double>(col);
    const double recall = row == 0 ? 0.0 : tp / static_cast<double>(row);
    const double f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    m.per_class_f1[m.classes[i]] = f1;
    m.support[m.classes[i]] = row;
    if (row > 0) {
      f1_sum += f1;
      ++present;
    }
  }
  m.accuracy = static_cast<double>(diag) / static_cast<double>(truth.size());
  m.macro_f1 = f1_sum / static_cast<double>(present);
  return m;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<int> t1_labels(const SampleSet& s) {
  std::vector<int> out;
  for (const auto& p : s.points) out.push_back(*p.label_t1);
  return out;
}

std::vector<int> t0_labels(const SampleSet& s) {
  std::vector<int> out;
  for (const auto& p : s.points) out.push_back(p.label_t0);
  return out;
}

json metrics_json(const Metrics& m) {
  json j;
  j["classes"] = m.classes;
  j["confusion"] = m.confusion;
  j["macro_f1"] = m.macro_f1;
  j["accuracy"] = m.accuracy;
  json support = json::object(), f1 = json::object();
  for (const auto& [c, n] : m.support) support[std::to_string(c)] = n;
  for (const auto& [c, v] : m.per_class_f1) f1[std::to_string(c)] = v;
  j["support"] = support;
  j["per_class_f1"] = f1;
  return j;
}

void aggregate(EvalReport& report) {
  std::map<std::string, std::vector<double>> values;
  for (const auto& f : report.folds) {
    values["macro_f1"].push_back(f.metrics.macro_f1);
    values["accuracy"].push_back(f.metrics.accuracy);
    for (const auto& [epoch, v] : f.epoch_macro_f1) values["macro_f1_" + epoch].push_back(v);
  }
  report.mean.clear();
  std::map<std::string, double> sd;
  for (const auto& [name, v] : values) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    report.mean[name] = mean;
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      sd[name] = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
  }
  if (report.folds.size() > 1) report.std = sd;
  else report.std.reset();
}

FoldRecord score(const TrainedModel& model, const SampleSet& test, const Legend& legend) {
  FoldRecord rec;
  const auto predicted = model.predict(feature_matrix(test, Epoch::t1));
  rec.metrics = metrics(t1_labels(test), predicted, legend);
  rec.test_points = test.size();
  return rec;
}

void fill_from_bundle(FoldRecord& rec, FoldAudit& audit, const TrainingBundle& bundle, const SampleSet& test) {
  rec.train_rows = bundle.size();
  for (auto p : {Provenance::t0_reference, Provenance::t1_reference, Provenance::t1_stable, Provenance::t1_pseudo,
                 Provenance::map_sample}) {
    if (bundle.count(p) > 0) rec.provenance_counts[to_string(p)] = bundle.count(p);
  }
  audit.train_row_ids = bundle.row_ids;
  for (std::size_t i = 0; i < bundle.size(); ++i) audit.train_coords.push_back({bundle.x[i], bundle.y[i]});
  for (const auto& p : test.points) {
    audit.test_ids.push_back(p.id);
    audit.test_coords.push_back({p.x, p.y});
  }
}

}  // namespace

json EvalReport::to_json() const {
  json j;
  j["spec"] = spec.to_json();
  j["seed"] = seed;
  j["k"] = k;
  j["fold_sizes"] = fold_sizes;
  json fs = json::array();
  for (const auto& f : folds) {
    json r = metrics_json(f.metrics);
    r["fold"] = f.fold;
    r["train_rows"] = f.train_rows;
    r["test_points"] = f.test_points;
    r["provenance_counts"] = f.provenance_counts;
    if (!f.epoch_macro_f1.empty()) r["epoch_macro_f1"] = f.epoch_macro_f1;
    fs.push_back(std::move(r));
  }
  j["folds"] = fs;
  j["mean"] = mean;
  j["std"] = std ? json(*std) : json(nullptr);
  j["warnings"] = warnings;
  return j;
}

EvalReport cross_validate(const ExperimentSpec& spec, const SampleSet& samples, const RasterPair& rasters,
                          const ChangeMask* mask, const CrossValidateOptions& options) {
  spec.validate();
  samples.validate();
  EvalReport report;
  report.spec = spec;
  report.seed = options.seed;

  auto [prepared, dropped] = prepare_samples(spec, samples, rasters);
  if (dropped > 0) report.warnings.push_back(std::to_string(dropped) + " sample(s) dropped during feature preparation");
  RunOptions run;
  run.produce_map = false;
  run.samples_prepared = true;
  const RandomForest forest(spec.forest);

  if (spec.experiment == Experiment::E3_wessels) {
    report.k = 1;
    ExperimentResult result = run_experiment(spec, prepared, rasters, mask, forest, run);
    for (const auto& w : result.warnings) report.warnings.push_back(w);
    std::vector<Coord> train_coords;
    for (std::size_t i = 0; i < result.bundle.size(); ++i) train_coords.push_back({result.bundle.x[i], result.bundle.y[i]});
    SampleSet labelled;
    labelled.legend = prepared.legend;
    for (const auto& p : prepared.points) {
      if (p.label_t1) labelled.points.push_back(p);
    }
    SampleSet validation = proximity_filter(labelled, train_coords, options.proximity_radius_m);
    report.warnings.push_back(std::to_string(labelled.size() - validation.size()) +
                              " validation point(s) removed by the proximity filter");
    if (validation.size() == 0) throw DataError("experiment 3: proximity filter removed every validation point");
    FoldRecord rec = score(*result.model, validation, prepared.legend);
    FoldAudit audit;
    fill_from_bundle(rec, audit, result.bundle, validation);
    report.fold_sizes = {validation.size()};
    report.folds.push_back(std::move(rec));
    report.audit.push_back(std::move(audit));
    aggregate(report);
    return report;
  }

  const auto coords = coordinates(prepared);
  const FoldAssignment folds = kmeans_folds(coords, options.k, options.seed);
  report.k = options.k;
  report.fold_sizes = folds.fold_sizes();
  for (int f = 0; f < options.k; ++f) {
    LltoSplit split = llto_split(prepared, folds.fold, f);
    ExperimentResult result = run_experiment(spec, split.train, rasters, mask, forest, run);
    for (const auto& w : result.warnings) report.warnings.push_back("fold " + std::to_string(f) + ": " + w);
    if (!split.unlabeled_test_ids.empty()) {
      report.warnings.push_back("fold " + std::to_string(f) + ": " + std::to_string(split.unlabeled_test_ids.size()) +
                                " test point(s) without a t1 label skipped");
    }
    FoldRecord rec = score(*result.model, split.test, prepared.legend);
    rec.fold = f;
    FoldAudit audit;
    audit.fold = f;
    audit.discarded_t0_ids = split.discarded_t0_ids;
    fill_from_bundle(rec, audit, result.bundle, split.test);

    if (spec.experiment == Experiment::E1_gold && options.per_epoch_scores) {
      rec.epoch_macro_f1["t1"] = rec.metrics.macro_f1;
      // Same folds, one epoch: train on the other folds' t0 data, score on
      // this fold's t0 data.
      SampleSet test_t0;
      test_t0.legend = prepared.legend;
      for (std::size_t i = 0; i < prepared.size(); ++i) {
        if (folds.fold[i] == f) test_t0.points.push_back(prepared.points[i]);
      }
      auto model_t0 = forest.fit(feature_matrix(split.train, Epoch::t0), t0_labels(split.train));
      const auto pred = model_t0->predict(feature_matrix(test_t0, Epoch::t0));
      rec.epoch_macro_f1["t0"] = metrics(t0_labels(test_t0), pred, prepared.legend).macro_f1;
    }
    report.folds.push_back(std::move(rec));
    report.audit.push_back(std::move(audit));
  }
  aggregate(report);
  return report;
}

Subsample stratified_subsample(const SampleSet& samples, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DataError("sample fraction must lie in (0, 1]");
  Subsample out;
  out.samples.legend = samples.legend;
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples.points[i].label_t0].push_back(i);
  std::vector<std::size_t> keep;
  for (auto& [cls, idx] : by_class) {
    const auto want = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    if (want == 0) {
      out.warnings.push_back("class " + std::to_string(cls) + " has no samples at fraction " +
                             std::to_string(fraction) + " and is dropped");
      continue;
    }
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(cls));
    for (std::size_t i = 0; i < want; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(want));
    out.per_class[cls] = want;
  }
  std::sort(keep.begin(), keep.end());
  for (auto i : keep) out.samples.points.push_back(samples.points[i]);
  return out;
}

SweepResult fraction_sweep(const ExperimentSpec& spec, const SampleSet& samples, const RasterPair& rasters,
                           const ChangeMask* mask, std::span<const double> fractions,
                           const CrossValidateOptions& options) {
  if (fractions.empty()) throw DataError("sweep: no fractions given");
  SweepResult out;
  double cumulative = 0.0;
  ExperimentSpec gold_spec = ExperimentSpec::defaults(Experiment::E1_gold, spec.seed);
  gold_spec.forest = spec.forest;
  for (double f : fractions) {
    const auto start = std::chrono::steady_clock::now();
    SweepEntry e;
    e.fraction = f;
    Subsample sub = stratified_subsample(samples, f, options.seed);
    for (const auto& w : sub.warnings) out.warnings.push_back(w);
    e.n_samples = sub.samples.size();
    e.per_class = sub.per_class;
    e.report = cross_validate(spec, sub.samples, rasters, mask, options);
    e.gold = spec.experiment == Experiment::E1_gold ? e.report
                                                    : cross_validate(gold_spec, sub.samples, rasters, mask, options);
    e.macro_f1_delta = e.report.mean.at("macro_f1") - e.gold.mean.at("macro_f1");
    e.accuracy_delta = e.report.mean.at("accuracy") - e.gold.mean.at("accuracy");
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    cumulative += e.wall_seconds;
    e.cumulative_seconds = cumulative;
    out.entries.push_back(std::move(e));
  }
  return out;
}

json SweepResult::to_json() const {
  json entries_json = json::array();
  for (const auto& e : entries) {
    json j;
    j["fraction"] = e.fraction;
    j["n_samples"] = e.n_samples;
    json pc = json::object();
    for (const auto& [c, n] : e.per_class) pc[std::to_string(c)] = n;
    j["per_class"] = pc;
    j["report"] = e.report.to_json();
    j["gold"] = e.gold.to_json();
    j["macro_f1_delta"] = e.macro_f1_delta;
    j["accuracy_delta"] = e.accuracy_delta;
    j["wall_seconds"] = e.wall_seconds;
    j["cumulative_seconds"] = e.cumulative_seconds;
    entries_json.push_back(std::move(j));
  }
  return json{{"entries", entries_json}, {"warnings", warnings}};
}

std::string SweepResult::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "fraction,n_samples,macro_f1,macro_f1_std,accuracy,gold_macro_f1,macro_f1_delta,accuracy_delta,"
         "wall_seconds,cumulative_seconds\n";
  for (const auto& e : entries) {
    const double sd = e.report.std ? e.report.std->at("macro_f1") : std::numeric_limits<double>::quiet_NaN();
    out << e.fraction << ',' << e.n_samples << ',' << e.report.mean.at("macro_f1") << ',';
    if (std::isnan(sd)) out << ""; else out << sd;
    out << ',' << e.report.mean.at("accuracy") << ',' << e.gold.mean.at("macro_f1") << ',' << e.macro_f1_delta
        << ',' << e.accuracy_delta << ',' << e.wall_seconds << ',' << e.cumulative_seconds << '\n';
  }
  return out.str();
}

std::vector<std::string> llto_violations(const EvalReport& report) {
  std::vector<std::string> out;
  for (const auto& a : report.audit) {
    const std::set<Coord> train(a.train_coords.begin(), a.train_coords.end());
    for (std::size_t i = 0; i < a.test_coords.size(); ++i) {
      if (train.count(a.test_coords[i])) {
        out.push_back("fold " + std::to_string(a.fold) + ": test point " + a.test_ids[i] +
                      " shares its coordinate with a training row");
      }
    }
    const std::set<std::string> rows(a.train_row_ids.begin(), a.train_row_ids.end());
    for (const auto& id : a.discarded_t0_ids) {
      for (const char* epoch : {"@t0", "@t1"}) {
        if (rows.count(id + epoch)) {
          out.push_back("fold " + std::to_string(a.fold) + ": held-out point " + id + " trains as " + id + epoch);
        }
      }
    }
  }
  return out;
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "fold,metric,value\n";
  for (const auto& f : report.folds) {
    out << f.fold << ",macro_f1," << f.metrics.macro_f1 << '\n';
    out << f.fold << ",accuracy," << f.metrics.accuracy << '\n';
    for (const auto& [epoch, v] : f.epoch_macro_f1) out << f.fold << ",macro_f1_" << epoch << ',' << v << '\n';
  }
  for (const auto& [name, v] : report.mean) out << "mean," << name << ',' << v << '\n';
  if (report.std) {
    for (const auto& [name, v] : *report.std) out << "std," << name << ',' << v << '\n';
  }
  return out.str();
}

}  // namespace lcmigrate
