#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lcmigrate/evaluation.hpp"
#include "lcmigrate/migration.hpp"
#include "lcmigrate/synthgen.hpp"

namespace lcmigrate::app {

inline constexpr const char* kToolVersion = "lcmigrate 1.0.0";

/// Experiment settings used on synthetic scenes. Map sampling for experiment 3
/// targets as many pixels as there are reference points, since 0.01 % of a
/// desk-sized scene is only a handful of pixels.
ExperimentSpec benchmark_spec(Experiment e, const SynthConfig& config);

struct ExperimentOutcome {
  Experiment experiment;
  EvalReport report;
  double seconds = 0.0;
};

struct BenchmarkRun {
  SynthScene scene;
  ReferenceMask mask;
  std::vector<ExperimentOutcome> outcomes;
  double scene_seconds = 0.0;
  double mask_seconds = 0.0;

  const ExperimentOutcome& outcome(Experiment e) const;
};

/// Generates the scene, derives the IRMAD change mask from the reference
/// points and cross-validates each requested experiment.
BenchmarkRun run_benchmark(const SynthConfig& config, std::span<const Experiment> experiments, int k);

/// One row per experiment in ladder order: approach, experiment id, fold
/// mean and standard deviation of macro-F1 and accuracy, and rank by macro-F1.
std::string ranking_csv(const BenchmarkRun& run);
/// The same table rendered for reading, "mean (std)" per cell.
std::string ranking_text(const BenchmarkRun& run);

int run_cli(int argc, char** argv);

}  // namespace lcmigrate::app
