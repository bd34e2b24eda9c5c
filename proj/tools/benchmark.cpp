#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "app.hpp"

namespace lcmigrate::app {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string approach(Experiment e) {
  switch (e) {
    case Experiment::E1_gold: return "Gold standard";
    case Experiment::E2_1_naive: return "Naive baseline";
    case Experiment::E2_2_naive_norm: return "Naive baseline + normalisation";
    case Experiment::E3_wessels: return "Stable-area map sampling";
    case Experiment::E4_1_stable_manual: return "Cross-temporal stable (manual)";
    case Experiment::E4_2_stable_auto: return "Cross-temporal stable (IRMAD)";
    case Experiment::E5_1_ssl_manual: return "Common Ground SSL (manual)";
    case Experiment::E5_2_ssl_auto: return "Common Ground SSL (IRMAD)";
  }
  return "?";
}

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::vector<std::size_t> ranks(const BenchmarkRun& run) {
  std::vector<std::size_t> order(run.outcomes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return run.outcomes[a].report.mean.at("macro_f1") > run.outcomes[b].report.mean.at("macro_f1");
  });
  std::vector<std::size_t> rank(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r + 1;
  return rank;
}

double sd_of(const EvalReport& r, const std::string& key) {
  if (!r.std) return std::nan("");
  auto it = r.std->find(key);
  return it == r.std->end() ? std::nan("") : it->second;
}

}  // namespace

ExperimentSpec benchmark_spec(Experiment e, const SynthConfig& config) {
  ExperimentSpec spec = ExperimentSpec::defaults(e, config.seed);
  if (e == Experiment::E3_wessels) spec.sample_total = config.n_reference_points;
  return spec;
}

const ExperimentOutcome& BenchmarkRun::outcome(Experiment e) const {
  for (const auto& o : outcomes) {
    if (o.experiment == e) return o;
  }
  throw std::out_of_range("experiment " + experiment_id(e) + " was not run");
}

BenchmarkRun run_benchmark(const SynthConfig& config, std::span<const Experiment> experiments, int k) {
  auto start = std::chrono::steady_clock::now();
  BenchmarkRun run{generate(config), {}, {}, 0.0, 0.0};
  run.scene_seconds = seconds_since(start);

  const bool needs_mask = std::any_of(experiments.begin(), experiments.end(), [&](Experiment e) {
    return benchmark_spec(e, config).uses_change_information() &&
           benchmark_spec(e, config).change_source == ChangeSource::mask;
  });
  if (needs_mask) {
    start = std::chrono::steady_clock::now();
    run.mask = irmad_reference_mask(run.scene.raster_t0, run.scene.raster_t1, run.scene.samples);
    run.mask_seconds = seconds_since(start);
  }
  const RasterPair rasters{run.scene.raster_t0, run.scene.raster_t1};
  CrossValidateOptions cv;
  cv.k = k;
  cv.seed = config.seed;
  for (Experiment e : experiments) {
    start = std::chrono::steady_clock::now();
    const ExperimentSpec spec = benchmark_spec(e, config);
    EvalReport report = cross_validate(spec, run.scene.samples, rasters, needs_mask ? &run.mask.mask : nullptr, cv);
    run.outcomes.push_back({e, std::move(report), seconds_since(start)});
  }
  return run;
}

std::string ranking_csv(const BenchmarkRun& run) {
  std::ostringstream out;
  out << "approach,experiment,macro_f1_mean,macro_f1_std,accuracy_mean,accuracy_std,macro_f1_t0,macro_f1_t1,rank\n";
  const auto rank = ranks(run);
  for (std::size_t i = 0; i < run.outcomes.size(); ++i) {
    const auto& o = run.outcomes[i];
    const auto& m = o.report.mean;
    auto opt = [&](const std::string& key) { return m.count(key) ? num(m.at(key)) : std::string(); };
    out << approach(o.experiment) << ',' << experiment_id(o.experiment) << ',' << num(m.at("macro_f1")) << ','
        << num(sd_of(o.report, "macro_f1")) << ',' << num(m.at("accuracy")) << ','
        << num(sd_of(o.report, "accuracy")) << ',' << opt("macro_f1_t0") << ',' << opt("macro_f1_t1") << ','
        << rank[i] << '\n';
  }
  return out.str();
}

std::string ranking_text(const BenchmarkRun& run) {
  auto cell = [](const EvalReport& r, const std::string& key) {
    std::string s = fixed2(r.mean.at(key));
    const double sd = sd_of(r, key);
    if (!std::isnan(sd)) s += " (" + fixed2(sd) + ")";
    return s;
  };
  std::vector<std::array<std::string, 5>> rows;
  rows.push_back({"Approach", "Exp. ID", "Macro-F1", "Accuracy", "Rank"});
  const auto rank = ranks(run);
  for (std::size_t i = 0; i < run.outcomes.size(); ++i) {
    const auto& o = run.outcomes[i];
    rows.push_back({approach(o.experiment), experiment_id(o.experiment), cell(o.report, "macro_f1"),
                    cell(o.report, "accuracy"), std::to_string(rank[i])});
    if (o.report.mean.count("macro_f1_t0")) {
      rows.push_back({"", "", "t0: " + cell(o.report, "macro_f1_t0"), "", ""});
      rows.push_back({"", "", "t1: " + cell(o.report, "macro_f1_t1"), "", ""});
    }
  }
  std::array<std::size_t, 5> width{};
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      out << rows[i][c] << std::string(width[c] - rows[i][c].size(), ' ');
      out << (c + 1 < rows[i].size() ? "  " : "");
    }
    out << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return out.str();
}

}  // namespace lcmigrate::app
