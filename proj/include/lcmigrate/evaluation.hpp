#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lcmigrate/migration.hpp"
#include "lcmigrate/raster.hpp"
#include "lcmigrate/samples.hpp"

namespace lcmigrate {

using Coord = std::array<double, 2>;

struct FoldAssignment {
  int k = 0;
  std::vector<int> fold;           // per input coordinate, in [0, k)
  std::vector<Coord> centroids;
  std::uint64_t seed = 0;
  double inertia = 0.0;

  std::vector<std::size_t> fold_sizes() const;
};

struct KMeansOptions {
  int restarts = 10;
  int max_iter = 300;
};

/// Inertia after every Lloyd iteration, one list per restart.
struct KMeansTrace {
  std::vector<std::vector<double>> inertia;
};

/// k-means++ seeded Lloyd iterations; the restart with the lowest inertia
/// wins. Each point belongs to its nearest centroid, ties to the lowest index.
FoldAssignment kmeans_folds(std::span<const Coord> coords, int k, std::uint64_t seed,
                            const KMeansOptions& options = {}, KMeansTrace* trace = nullptr);

std::vector<Coord> coordinates(const SampleSet& samples);

/// Leave-location-and-time-out split. Training keeps every point outside the
/// test fold with both epochs; the test set holds the test fold's points at t1
/// only (their t0 features are removed and the points need a t1 label).
struct LltoSplit {
  SampleSet train;
  SampleSet test;
  std::vector<std::string> discarded_t0_ids;
  std::vector<std::string> unlabeled_test_ids;  // test-fold points without a t1 label
};

LltoSplit llto_split(const SampleSet& samples, std::span<const int> folds, int test_fold);

/// Drops validation points closer than radius_m to any training coordinate.
/// A point exactly radius_m away is kept.
SampleSet proximity_filter(const SampleSet& validation, std::span<const Coord> training, double radius_m);

struct Metrics {
  std::vector<int> classes;                          // legend order
  std::vector<std::vector<std::size_t>> confusion;   // [truth][predicted]
  double accuracy = 0.0;
  double macro_f1 = 0.0;                             // over classes present in truth
  std::map<int, double> per_class_f1;
  std::map<int, std::size_t> support;
};

Metrics metrics(std::span<const int> truth, std::span<const int> predicted, const Legend& legend);

struct FoldRecord {
  int fold = 0;
  Metrics metrics;
  std::size_t train_rows = 0;
  std::size_t test_points = 0;
  std::map<std::string, std::size_t> provenance_counts;
  /// Within-epoch macro-F1 of a model trained and tested on one epoch
  /// (experiment 1 only).
  std::map<std::string, double> epoch_macro_f1;
};

/// Which rows and coordinates each fold trained and tested on.
struct FoldAudit {
  int fold = 0;
  std::vector<std::string> train_row_ids;
  std::vector<Coord> train_coords;
  std::vector<std::string> test_ids;
  std::vector<Coord> test_coords;
  std::vector<std::string> discarded_t0_ids;
};

struct EvalReport {
  ExperimentSpec spec;
  std::uint64_t seed = 0;
  int k = 0;
  std::vector<std::size_t> fold_sizes;
  std::vector<FoldRecord> folds;
  std::map<std::string, double> mean;
  std::optional<std::map<std::string, double>> std;  // absent with a single fold
  std::vector<FoldAudit> audit;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

struct CrossValidateOptions {
  int k = 5;
  std::uint64_t seed = 0;
  double proximity_radius_m = 100.0;  // experiment 3 holdout
  bool per_epoch_scores = true;       // experiment 1 only
};

/// k-fold LLTO evaluation of one experiment. Experiment 3 trains once from
/// map samples and is scored on every labelled t1 point at least
/// proximity_radius_m from a map sample.
EvalReport cross_validate(const ExperimentSpec& spec, const SampleSet& samples, const RasterPair& rasters,
                          const ChangeMask* mask, const CrossValidateOptions& options);

struct Subsample {
  SampleSet samples;
  std::map<int, std::size_t> per_class;
  std::vector<std::string> warnings;
};

/// Keeps round(fraction * n_c) points of every t0 class, chosen uniformly per
/// class; output preserves the input order.
Subsample stratified_subsample(const SampleSet& samples, double fraction, std::uint64_t seed);

struct SweepEntry {
  double fraction = 0.0;
  std::size_t n_samples = 0;
  std::map<int, std::size_t> per_class;
  EvalReport report;
  EvalReport gold;             // experiment 1 on the same subsample
  double macro_f1_delta = 0.0;  // report - gold, fold means
  double accuracy_delta = 0.0;
  double wall_seconds = 0.0;
  double cumulative_seconds = 0.0;
};

struct SweepResult {
  std::vector<SweepEntry> entries;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

SweepResult fraction_sweep(const ExperimentSpec& spec, const SampleSet& samples, const RasterPair& rasters,
                           const ChangeMask* mask, std::span<const double> fractions,
                           const CrossValidateOptions& options);

/// Audits the folds of an LLTO report: every coordinate a fold tested on must
/// be absent from its training rows, and none of the test fold's points may
/// appear in training at either epoch. Returns one message per violation.
std::vector<std::string> llto_violations(const EvalReport& report);

/// Long-format CSV of a report: fold,metric,value (fold "mean"/"std" rows last).
std::string report_csv(const EvalReport& report);

}  // namespace lcmigrate
