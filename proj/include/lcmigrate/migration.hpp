#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lcmigrate/change_detection.hpp"
#include "lcmigrate/classifier.hpp"
#include "lcmigrate/raster.hpp"
#include "lcmigrate/samples.hpp"

namespace lcmigrate {

enum class Experiment {
  E1_gold,
  E2_1_naive,
  E2_2_naive_norm,
  E3_wessels,
  E4_1_stable_manual,
  E4_2_stable_auto,
  E5_1_ssl_manual,
  E5_2_ssl_auto,
};

inline constexpr Experiment kAllExperiments[] = {
    Experiment::E1_gold,           Experiment::E2_1_naive,       Experiment::E2_2_naive_norm,
    Experiment::E3_wessels,        Experiment::E4_1_stable_manual, Experiment::E4_2_stable_auto,
    Experiment::E5_1_ssl_manual,   Experiment::E5_2_ssl_auto,
};

/// Short id used on the command line and in reports: "1", "2.1", ... "5.2".
std::string experiment_id(Experiment e);
std::string experiment_name(Experiment e);
/// Accepts the short id or the enum name (e.g. "5.2" or "E5_2_ssl_auto").
Experiment experiment_from_string(const std::string& s);

enum class ChangeSource { manual_flags, mask };
std::string to_string(ChangeSource s);

struct ExperimentSpec {
  Experiment experiment = Experiment::E5_2_ssl_auto;
  ChangeSource change_source = ChangeSource::mask;
  bool normalization = false;
  ForestConfig forest;
  std::uint64_t seed = 0;
  std::optional<double> confidence_floor;
  // Stable-area map sampling (experiment 3 only).
  std::optional<std::size_t> sample_total;  // default: 0.01 % of stable pixels
  std::size_t min_per_class = 0;

  /// Per-experiment defaults: manual-flag change source for x.1 variants,
  /// mask for x.2 and 3; L2 normalization for 2.2, 4.x and 5.x.
  static ExperimentSpec defaults(Experiment e, std::uint64_t seed);
  bool uses_change_information() const;
  void validate() const;
  nlohmann::json to_json() const;
};

enum class Provenance { t0_reference, t1_reference, t1_stable, t1_pseudo, map_sample };
std::string to_string(Provenance p);

/// The exact rows a model was fitted on.
struct TrainingBundle {
  FeatureMatrix features;
  std::vector<int> labels;
  std::vector<Provenance> provenance;
  std::vector<double> weights;
  std::vector<std::string> row_ids;  // "<sample id>@t0" / "<sample id>@t1"
  std::vector<double> x, y;          // map coordinates of each row

  std::size_t size() const { return labels.size(); }
  std::size_t count(Provenance p) const;
  /// Appends one row per point using the features of `epoch` and the given
  /// labels.
  void append(const SampleSet& samples, Epoch epoch, Provenance provenance,
              const std::vector<int>& labels);
  /// CSV with columns row_id,provenance,label,weight.
  void write_csv(const std::filesystem::path& path) const;
};

struct StableSplit {
  SampleSet stable;   // label_t1 set to label_t0
  SampleSet changed;  // label_t1 cleared; never used as a training label
  std::vector<std::string> unknown_ids;
};

/// Partition by the points' own change flags.
StableSplit filter_stable(const SampleSet& samples);
/// Partition by mask lookup at each point; points on mask nodata or outside
/// the mask are unknown.
StableSplit filter_stable(const SampleSet& samples, const ChangeMask& mask);

/// Largest-remainder rounding of total * area share per class, then raised to
/// min_per_class. The result may sum to more than `total`.
std::map<int, std::size_t> area_weighted_allocation(const std::map<int, std::size_t>& class_pixel_counts,
                                                     std::size_t total, std::size_t min_per_class);

struct MapSampling {
  SampleSet samples;
  std::map<int, std::size_t> shortfall;  // allocated minus drawn, where positive
};

/// Uniform sampling without replacement inside each (class, stable) stratum.
MapSampling stratified_sample_from_map(const ClassMap& class_map, const ChangeMask& stable_mask,
                                       const std::map<int, std::size_t>& allocation, std::uint64_t seed);

struct PseudoLabels {
  SampleSet samples;  // label_t1 holds the prediction
  std::size_t dropped = 0;
};

/// Labels changed samples from their t1 features. With a floor, samples whose
/// top class probability is below it are dropped.
PseudoLabels pseudo_label(const TrainedModel& model, const SampleSet& changed,
                          std::optional<double> confidence_floor = std::nullopt);

struct RasterPair {
  const RasterStack& t0;
  const RasterStack& t1;
};

struct RunOptions {
  bool produce_map = true;
  /// The samples already went through prepare_samples with this spec.
  bool samples_prepared = false;
};

struct ExperimentResult {
  std::unique_ptr<TrainedModel> model;
  std::unique_ptr<TrainedModel> stage1_model;  // experiments 5.x
  TrainingBundle bundle;
  std::optional<ClassMap> map_t1;
  std::size_t unknown_excluded = 0;
  std::size_t pseudo_dropped = 0;
  std::size_t preprocessing_excluded = 0;
  std::map<int, std::size_t> allocation;
  std::map<int, std::size_t> shortfall;
  std::vector<std::string> warnings;
};

/// Brings samples into the feature space an experiment trains in: features
/// are read from the rasters where missing and, when `spec.normalization` is set,
/// L2-normalized at both epochs. Points that cannot be prepared are dropped;
/// their count is returned.
std::pair<SampleSet, std::size_t> prepare_samples(const ExperimentSpec& spec, const SampleSet& samples,
                                                  const RasterPair& rasters);

ExperimentResult run_experiment(const ExperimentSpec& spec, const SampleSet& samples,
                                const RasterPair& rasters, const ChangeMask* mask,
                                const Classifier& classifier, const RunOptions& options = {});

/// Convenience overload using RandomForest(spec.forest).
ExperimentResult run_experiment(const ExperimentSpec& spec, const SampleSet& samples,
                                const RasterPair& rasters, const ChangeMask* mask,
                                const RunOptions& options = {});

FeatureMatrix feature_matrix(const SampleSet& samples, Epoch epoch);

struct ReferenceMask {
  ChangeMask mask;
  IrmadResult irmad;
  PrOptimum optimum;
  std::size_t reference_points = 0;  // points with a known change flag on valid Z
  std::vector<std::string> warnings;
};

/// IRMAD change mask thresholded where the reference points' own change flags
/// give the best changed-class F1. When the flags are all one state the
/// 99.9th percentile of Z is used instead, with a warning.
ReferenceMask irmad_reference_mask(const RasterStack& t0, const RasterStack& t1, const SampleSet& reference,
                                   const IrmadOptions& options = {});

}  // namespace lcmigrate
