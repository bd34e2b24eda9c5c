#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "app.hpp"
#include "json.hpp"
#include "lcmigrate/change_detection.hpp"
#include "lcmigrate/classifier.hpp"
#include "lcmigrate/error.hpp"
#include "lcmigrate/io_util.hpp"
#include "lcmigrate/parallel.hpp"
#include "lcmigrate/preprocess.hpp"

namespace lcmigrate::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Files behind a path: both halves of a BSQ1 stem, a CSV with its legend, or
// the file itself.
std::vector<fs::path> files_of(const fs::path& p) {
  const fs::path stem = bsq_stem(p);
  if (fs::exists(fs::path(stem).concat(".json")) && fs::exists(fs::path(stem).concat(".bsq"))) {
    return {fs::path(stem).concat(".json"), fs::path(stem).concat(".bsq")};
  }
  std::vector<fs::path> out{p};
  if (p.extension() == ".csv" && fs::exists(legend_path_for(p))) out.push_back(legend_path_for(p));
  return out;
}

class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> argv) : command_(std::move(command)), argv_(std::move(argv)) {}

  void input(const fs::path& p) {
    for (const auto& f : files_of(p)) inputs_.push_back(f);
  }
  void output(const fs::path& p) {
    for (const auto& f : files_of(p)) outputs_.push_back(f);
  }
  void seed(std::uint64_t s) { seed_ = s; }
  void stage(const std::string& name, std::chrono::steady_clock::time_point start) {
    stages_.push_back({name, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()});
  }
  void note(const std::string& key, json value) { extra_[key] = std::move(value); }

  void write(const fs::path& path) const {
    json j;
    j["tool"] = kToolVersion;
    j["command"] = command_;
    j["argv"] = argv_;
    j["seed"] = seed_ ? json(*seed_) : json(nullptr);
    auto hashed = [](const std::vector<fs::path>& files) {
      json arr = json::array();
      for (const auto& f : files) arr.push_back({{"path", f.string()}, {"sha256", sha256_file(f)}});
      return arr;
    };
    j["inputs"] = hashed(inputs_);
    j["outputs"] = hashed(outputs_);
    json st = json::array();
    for (const auto& [name, secs] : stages_) st.push_back({{"stage", name}, {"seconds", secs}});
    j["stages"] = st;
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    atomic_write(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  std::optional<std::uint64_t> seed_;
  std::vector<fs::path> inputs_, outputs_;
  std::vector<std::pair<std::string, double>> stages_;
  json extra_ = json::object();
};

fs::path manifest_path(const std::string& flag, const fs::path& primary_output) {
  if (!flag.empty()) return flag;
  return fs::path(bsq_stem(primary_output)).concat(".manifest.json");
}

void write_json(const fs::path& path, const json& j) { atomic_write(path, j.dump(2) + "\n"); }

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

struct ForestFlags {
  int n_trees = 100;
  int max_features = 0;  // 0: sqrt(d)
  int min_samples_leaf = 1;
  int max_depth = 0;     // 0: unlimited

  void add(CLI::App* sub) {
    sub->add_option("--n-trees", n_trees, "Trees in the forest")->capture_default_str();
    sub->add_option("--max-features", max_features, "Features tried per split (0: sqrt of the dimension)")
        ->capture_default_str();
    sub->add_option("--min-samples-leaf", min_samples_leaf, "Minimum rows per leaf")->capture_default_str();
    sub->add_option("--max-depth", max_depth, "Maximum tree depth (0: unlimited)")->capture_default_str();
  }
  ForestConfig config(std::uint64_t seed) const {
    ForestConfig c;
    c.n_trees = n_trees;
    if (max_features > 0) c.max_features = max_features;
    c.min_samples_leaf = min_samples_leaf;
    if (max_depth > 0) c.max_depth = max_depth;
    c.seed = seed;
    c.validate();
    return c;
  }
};

// Inputs shared by migrate, eval and sweep.
struct ExperimentFlags {
  std::string experiment;
  std::string t0, t1, samples, mask;
  bool manual_flags = false;
  bool normalize = false, no_normalize = false;
  std::uint64_t seed = 0;
  std::optional<double> confidence_floor;
  std::optional<std::size_t> sample_total;
  std::size_t min_per_class = 0;
  ForestFlags forest;

  void add(CLI::App* sub) {
    sub->add_option("--experiment", experiment, "1, 2.1, 2.2, 3, 4.1, 4.2, 5.1 or 5.2")->required();
    sub->add_option("--t0-raster", t0, "t0 image (BSQ1 stem)")->required();
    sub->add_option("--t1-raster", t1, "t1 image (BSQ1 stem)")->required();
    sub->add_option("--samples", samples, "Reference sample CSV")->required();
    auto* m = sub->add_option("--mask", mask, "Change mask (BSQ1 stem)");
    auto* f = sub->add_flag("--manual-flags", manual_flags, "Use the samples' own change flags");
    m->excludes(f);
    auto* n = sub->add_flag("--normalize", normalize, "Force L2 normalization on");
    auto* nn = sub->add_flag("--no-normalize", no_normalize, "Force L2 normalization off");
    n->excludes(nn);
    sub->add_option("--seed", seed, "Random seed")->required();
    sub->add_option("--confidence-floor", confidence_floor, "Drop pseudo-labels below this class probability");
    sub->add_option("--sample-total", sample_total, "Experiment 3 map sample target");
    sub->add_option("--min-per-class", min_per_class, "Experiment 3 per-class minimum")->capture_default_str();
    forest.add(sub);
  }

  ExperimentSpec spec() const {
    ExperimentSpec s = ExperimentSpec::defaults(experiment_from_string(experiment), seed);
    if (!mask.empty()) s.change_source = ChangeSource::mask;
    if (manual_flags) s.change_source = ChangeSource::manual_flags;
    if (normalize) s.normalization = true;
    if (no_normalize) s.normalization = false;
    s.confidence_floor = confidence_floor;
    s.sample_total = sample_total;
    s.min_per_class = min_per_class;
    s.forest = forest.config(seed);
    s.validate();
    return s;
  }
};

struct LoadedInputs {
  RasterStack t0;
  RasterStack t1;
  SampleSet samples;
  std::optional<ChangeMask> mask;
};

LoadedInputs load_inputs(const ExperimentFlags& f, const ExperimentSpec& spec, Manifest& manifest) {
  LoadedInputs in{read_raster(f.t0), read_raster(f.t1), read_samples(f.samples), std::nullopt};
  manifest.input(f.t0);
  manifest.input(f.t1);
  manifest.input(f.samples);
  if (!f.mask.empty()) {
    in.mask = load_external_mask(f.mask);
    manifest.input(f.mask);
  } else if (spec.uses_change_information() && spec.change_source == ChangeSource::mask) {
    throw DataError("experiment " + experiment_id(spec.experiment) + " needs --mask (or --manual-flags)");
  }
  return in;
}

FeatureMatrix features_for(SampleSet& samples, Epoch epoch, const std::string& raster, bool normalize) {
  if (!samples.feature_dim(epoch)) {
    if (raster.empty()) throw DataError("samples carry no " + to_string(epoch) + " features; pass --raster");
    auto extracted = extract_features(read_raster(raster), samples, epoch);
    if (!extracted.nodata_ids.empty()) {
      warn(std::to_string(extracted.nodata_ids.size()) + " sample(s) on nodata skipped");
    }
    samples = std::move(extracted.samples);
  }
  if (normalize) {
    for (auto& p : samples.points) {
      auto& f = epoch == Epoch::t0 ? p.features_t0 : p.features_t1;
      auto n = l2_normalize(*f);
      if (!n) throw DataError("sample '" + p.id + "' has a zero-norm feature vector");
      f = std::move(*n);
    }
  }
  return feature_matrix(samples, epoch);
}

std::vector<std::string> argv_vector(int argc, char** argv) { return {argv, argv + argc}; }

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Land-cover training data migration between image epochs"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();
  unsigned threads = 0;
  std::string manifest_flag;
  app.add_option("--threads", threads, "Worker thread cap (default: available cores)");
  app.add_option("--manifest", manifest_flag, "Run manifest path (default: next to the main output)");
  app.set_config("--flags-file", "", "TOML file with flag values; [subcommand] sections mirror flag names");

  const auto args = argv_vector(argc, argv);
  std::function<void()> action;
  auto on = [&](CLI::App* sub, std::function<void()> fn) { sub->callback([&action, fn] { action = fn; }); };

  // synth ------------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate a synthetic bi-temporal scene");
  std::string synth_config, synth_preset, synth_out;
  std::uint64_t synth_seed = 0;
  auto* sc = synth->add_option("--config", synth_config, "Scene configuration JSON");
  auto* sp = synth->add_option("--preset", synth_preset, "small or bench");
  sc->excludes(sp);
  synth->add_option("--seed", synth_seed, "Random seed")->required();
  synth->add_option("--out-dir", synth_out, "Output directory")->required();
  on(synth, [&] {
    const auto start = std::chrono::steady_clock::now();
    SynthConfig config;
    if (!synth_config.empty()) {
      try {
        config = SynthConfig::from_json(json::parse(read_file(synth_config)));
      } catch (const json::exception& e) {
        throw DataError(std::string("synth config: ") + e.what());
      }
    } else if (!synth_preset.empty()) {
      config = SynthConfig::preset(synth_preset, synth_seed);
    }
    config.seed = synth_seed;
    const SynthScene scene = generate(config);
    const auto files = write_scene(scene, synth_out);
    Manifest m("synth", args);
    if (!synth_config.empty()) m.input(synth_config);
    m.seed(synth_seed);
    for (const auto& f : files) m.output(f);
    m.note("config", scene.config.to_json());
    m.stage("generate", start);
    m.write(manifest_flag.empty() ? fs::path(synth_out) / "manifest.json" : fs::path(manifest_flag));
  });

  // normalize --------------------------------------------------------------
  auto* normalize = app.add_subcommand("normalize", "L2-normalize every pixel's spectrum");
  std::string norm_in, norm_out;
  normalize->add_option("--input", norm_in, "Input image (BSQ1 stem)")->required();
  normalize->add_option("--output", norm_out, "Output image (BSQ1 stem)")->required();
  on(normalize, [&] {
    const auto start = std::chrono::steady_clock::now();
    auto result = l2_normalize(read_raster(norm_in));
    if (result.zero_norm_pixels > 0) warn(std::to_string(result.zero_norm_pixels) + " zero-norm pixel(s) set to nodata");
    write_raster(result.stack, norm_out);
    Manifest m("normalize", args);
    m.input(norm_in);
    m.output(norm_out);
    m.note("zero_norm_pixels", result.zero_norm_pixels);
    m.stage("normalize", start);
    m.write(manifest_path(manifest_flag, norm_out));
  });

  // resample ---------------------------------------------------------------
  auto* resample = app.add_subcommand("resample", "Gaussian spectral resampling onto a target band set");
  std::string rs_in, rs_bands, rs_out;
  resample->add_option("--input", rs_in, "Input image (BSQ1 stem)")->required();
  resample->add_option("--target-bands", rs_bands, "Target bands: JSON array or a BSQ1 sidecar")->required();
  resample->add_option("--output", rs_out, "Output image (BSQ1 stem)")->required();
  on(resample, [&] {
    const auto start = std::chrono::steady_clock::now();
    const RasterStack src = read_raster(rs_in);
    const auto target = read_band_list(rs_bands);
    const auto plan = build_resampling_plan(src.bands(), target);
    if (plan.uncovered_count() > 0) {
      warn(std::to_string(plan.uncovered_count()) + " of " + std::to_string(plan.target_count()) +
           " target band(s) have no spectral support and are nodata");
    }
    write_raster(apply_resampling(plan, src, target), rs_out);
    Manifest m("resample", args);
    m.input(rs_in);
    m.input(rs_bands);
    m.output(rs_out);
    m.note("uncovered_bands", plan.uncovered_count());
    m.stage("resample", start);
    m.write(manifest_path(manifest_flag, rs_out));
  });

  // composite --------------------------------------------------------------
  auto* composite = app.add_subcommand("composite", "Per-pixel median over co-registered images, ignoring nodata");
  std::vector<std::string> comp_in;
  std::string comp_out;
  composite->add_option("--inputs", comp_in, "Input images (BSQ1 stems)")->required()->delimiter(',');
  composite->add_option("--output", comp_out, "Output image (BSQ1 stem)")->required();
  on(composite, [&] {
    const auto start = std::chrono::steady_clock::now();
    std::vector<RasterStack> stacks;
    Manifest m("composite", args);
    for (const auto& p : comp_in) {
      stacks.push_back(read_raster(p));
      m.input(p);
    }
    write_raster(masked_median_composite(stacks), comp_out);
    m.output(comp_out);
    m.stage("composite", start);
    m.write(manifest_path(manifest_flag, comp_out));
  });

  // drop-bands -------------------------------------------------------------
  auto* drop = app.add_subcommand("drop-bands", "Remove bands by zero-based index");
  std::string drop_in, drop_out;
  std::vector<std::size_t> drop_idx;
  drop->add_option("--input", drop_in, "Input image (BSQ1 stem)")->required();
  drop->add_option("--bands", drop_idx, "Zero-based band indices to remove")->required()->delimiter(',');
  drop->add_option("--output", drop_out, "Output image (BSQ1 stem)")->required();
  on(drop, [&] {
    const auto start = std::chrono::steady_clock::now();
    write_raster(drop_bands(read_raster(drop_in), drop_idx), drop_out);
    Manifest m("drop-bands", args);
    m.input(drop_in);
    m.output(drop_out);
    m.stage("drop-bands", start);
    m.write(manifest_path(manifest_flag, drop_out));
  });

  // irmad ------------------------------------------------------------------
  auto* irmad_cmd = app.add_subcommand("irmad", "IRMAD chi-square change statistic");
  std::string ir_t0, ir_t1, ir_out, ir_report;
  IrmadOptions ir_opts;
  irmad_cmd->add_option("--t0", ir_t0, "t0 image (BSQ1 stem)")->required();
  irmad_cmd->add_option("--t1", ir_t1, "t1 image (BSQ1 stem)")->required();
  irmad_cmd->add_option("--out", ir_out, "Chi-square image (BSQ1 stem)")->required();
  irmad_cmd->add_option("--report", ir_report, "Iteration report JSON (rho history as an array of arrays)");
  irmad_cmd->add_option("--max-iter", ir_opts.max_iter, "Iteration cap")->capture_default_str();
  irmad_cmd->add_option("--tol", ir_opts.tol, "Stop when max |delta rho| falls below this")->capture_default_str();
  on(irmad_cmd, [&] {
    const auto start = std::chrono::steady_clock::now();
    const IrmadResult r = irmad(read_raster(ir_t0), read_raster(ir_t1), ir_opts);
    for (const auto& w : r.warnings) warn(w);
    write_raster(to_raster(r.z), ir_out);
    Manifest m("irmad", args);
    m.input(ir_t0);
    m.input(ir_t1);
    m.output(ir_out);
    json rep;
    rep["iterations"] = r.iterations;
    rep["converged"] = r.converged;
    rep["df"] = r.df;
    rep["effective_df"] = r.effective_df;
    rep["degenerate_components"] = r.degenerate_components;
    rep["rho_history"] = r.rho_history;
    rep["warnings"] = r.warnings;
    if (!ir_report.empty()) {
      write_json(ir_report, rep);
      m.output(ir_report);
    }
    m.note("irmad", rep);
    m.stage("irmad", start);
    m.write(manifest_path(manifest_flag, ir_out));
  });

  // mask -------------------------------------------------------------------
  auto* mask_cmd = app.add_subcommand("mask", "Threshold a chi-square image into a change mask");
  std::string mk_z, mk_out, mk_samples;
  std::optional<double> mk_pct, mk_thr;
  mask_cmd->add_option("--stat", mk_z, "Chi-square image (BSQ1 stem)")->required();
  auto* o1 = mask_cmd->add_option("--percentile", mk_pct, "Changed above this percentile of Z");
  auto* o2 = mask_cmd->add_option("--threshold", mk_thr, "Changed above this Z value");
  auto* o3 = mask_cmd->add_option("--pr", mk_samples,
                                  "Sample CSV whose change flags pick the best-F1 threshold");
  o1->excludes(o2)->excludes(o3);
  o2->excludes(o3);
  mask_cmd->add_option("--out", mk_out, "Change mask (BSQ1 stem)")->required();
  on(mask_cmd, [&] {
    const auto start = std::chrono::steady_clock::now();
    const StatImage z = stat_from_raster(read_raster(mk_z));
    Manifest m("mask", args);
    m.input(mk_z);
    ChangeMask mask;
    if (mk_pct) {
      mask = threshold_percentile(z, *mk_pct);
    } else if (mk_thr) {
      mask = threshold_value(z, *mk_thr, MaskProvenance::manual);
    } else if (!mk_samples.empty()) {
      const SampleSet s = read_samples(mk_samples);
      m.input(mk_samples);
      std::vector<double> zs;
      std::vector<bool> changed;
      for (const auto& p : s.points) {
        if (p.change == ChangeState::unknown) continue;
        auto px = z.transform.locate(p.x, p.y, z.width, z.height);
        if (!px || std::isnan(z.values[px->row * z.width + px->col])) continue;
        zs.push_back(z.values[px->row * z.width + px->col]);
        changed.push_back(p.change == ChangeState::changed);
      }
      const PrOptimum opt = threshold_pr_optimal(zs, changed);
      mask = threshold_value(z, opt.threshold, MaskProvenance::irmad_pr);
      m.note("pr_optimum", {{"threshold", opt.threshold}, {"precision", opt.precision}, {"recall", opt.recall},
                            {"f1", opt.f1}, {"points", zs.size()}});
    } else {
      throw CLI::RequiredError("one of --percentile, --threshold or --pr");
    }
    write_change_mask(mask, mk_out);
    m.output(mk_out);
    m.note("changed_pixels", mask.count(ChangeFlag::changed));
    m.stage("mask", start);
    m.write(manifest_path(manifest_flag, mk_out));
  });

  // fit --------------------------------------------------------------------
  auto* fit = app.add_subcommand("fit", "Train a random forest on one epoch of a sample set");
  std::string fit_samples, fit_raster, fit_out, fit_epoch = "t0";
  bool fit_norm = false;
  std::uint64_t fit_seed = 0;
  ForestFlags fit_forest;
  fit->add_option("--samples", fit_samples, "Sample CSV")->required();
  fit->add_option("--epoch", fit_epoch, "t0 or t1")->check(CLI::IsMember({"t0", "t1"}))->capture_default_str();
  fit->add_option("--raster", fit_raster, "Image to read features from when the CSV has none");
  fit->add_flag("--normalize", fit_norm, "L2-normalize features first");
  fit->add_option("--seed", fit_seed, "Random seed")->required();
  fit->add_option("--out-model", fit_out, "Model file")->required();
  fit_forest.add(fit);
  on(fit, [&] {
    const auto start = std::chrono::steady_clock::now();
    SampleSet s = read_samples(fit_samples);
    const Epoch e = fit_epoch == "t1" ? Epoch::t1 : Epoch::t0;
    if (e == Epoch::t1) {
      SampleSet labelled;
      labelled.legend = s.legend;
      for (auto& p : s.points) {
        if (p.label_t1) labelled.points.push_back(std::move(p));
      }
      s = std::move(labelled);
    }
    const FeatureMatrix x = features_for(s, e, fit_raster, fit_norm);
    std::vector<int> y;
    std::vector<std::string> ids;
    for (const auto& p : s.points) {
      y.push_back(e == Epoch::t1 ? *p.label_t1 : p.label_t0);
      ids.push_back(p.id);
    }
    auto model = RandomForest(fit_forest.config(fit_seed)).fit(x, y, ids);
    model->set_legend(s.legend);
    model->save(fit_out);
    Manifest m("fit", args);
    m.seed(fit_seed);
    m.input(fit_samples);
    if (!fit_raster.empty()) m.input(fit_raster);
    m.output(fit_out);
    m.note("rows", s.size());
    m.stage("fit", start);
    m.write(manifest_path(manifest_flag, fit_out));
  });

  // predict ----------------------------------------------------------------
  auto* predict = app.add_subcommand("predict", "Predict classes for sample points");
  std::string pr_model, pr_samples, pr_raster, pr_out, pr_epoch = "t1";
  bool pr_norm = false;
  predict->add_option("--model", pr_model, "Model file")->required();
  predict->add_option("--samples", pr_samples, "Sample CSV")->required();
  predict->add_option("--epoch", pr_epoch, "t0 or t1")->check(CLI::IsMember({"t0", "t1"}))->capture_default_str();
  predict->add_option("--raster", pr_raster, "Image to read features from when the CSV has none");
  predict->add_flag("--normalize", pr_norm, "L2-normalize features first");
  predict->add_option("--out", pr_out, "Prediction CSV")->required();
  on(predict, [&] {
    const auto start = std::chrono::steady_clock::now();
    const auto model = load_model(pr_model);
    SampleSet s = read_samples(pr_samples);
    const FeatureMatrix x = features_for(s, pr_epoch == "t0" ? Epoch::t0 : Epoch::t1, pr_raster, pr_norm);
    const Eigen::MatrixXd proba = model->predict_proba(x);
    const auto labels = model->predict(x);
    std::ostringstream out;
    out.precision(17);
    out << "id,predicted";
    for (int c : model->classes()) out << ",p_" << c;
    out << '\n';
    for (std::size_t i = 0; i < s.size(); ++i) {
      out << s.points[i].id << ',' << labels[i];
      for (Eigen::Index c = 0; c < proba.cols(); ++c) out << ',' << proba(static_cast<Eigen::Index>(i), c);
      out << '\n';
    }
    atomic_write(pr_out, out.str());
    Manifest m("predict", args);
    m.input(pr_model);
    m.input(pr_samples);
    if (!pr_raster.empty()) m.input(pr_raster);
    m.output(pr_out);
    m.stage("predict", start);
    m.write(manifest_path(manifest_flag, pr_out));
  });

  // predict-raster ---------------------------------------------------------
  auto* predict_r = app.add_subcommand("predict-raster", "Classify every pixel of an image");
  std::string prr_model, prr_raster, prr_out;
  bool prr_norm = false;
  predict_r->add_option("--model", prr_model, "Model file")->required();
  predict_r->add_option("--raster", prr_raster, "Image (BSQ1 stem)")->required();
  predict_r->add_flag("--normalize", prr_norm, "L2-normalize pixels first");
  predict_r->add_option("--output", prr_out, "Class map (BSQ1 stem)")->required();
  on(predict_r, [&] {
    const auto start = std::chrono::steady_clock::now();
    const auto model = load_model(prr_model);
    RasterStack r = read_raster(prr_raster);
    if (prr_norm) r = l2_normalize(r).stack;
    write_class_map(predict_raster(*model, r), prr_out);
    Manifest m("predict-raster", args);
    m.input(prr_model);
    m.input(prr_raster);
    m.output(prr_out);
    m.stage("predict-raster", start);
    m.write(manifest_path(manifest_flag, prr_out));
  });

  // migrate ----------------------------------------------------------------
  auto* migrate = app.add_subcommand("migrate", "Run one experiment of the migration ladder");
  ExperimentFlags mig;
  std::string mig_model, mig_map, mig_bundle;
  mig.add(migrate);
  migrate->add_option("--out-model", mig_model, "Model file")->required();
  migrate->add_option("--out-map", mig_map, "t1 class map (BSQ1 stem)");
  migrate->add_option("--out-bundle", mig_bundle, "Training bundle CSV");
  on(migrate, [&] {
    const auto start = std::chrono::steady_clock::now();
    const ExperimentSpec spec = mig.spec();
    Manifest m("migrate", args);
    m.seed(spec.seed);
    LoadedInputs in = load_inputs(mig, spec, m);
    RunOptions opts;
    opts.produce_map = !mig_map.empty();
    ExperimentResult r = run_experiment(spec, in.samples, {in.t0, in.t1}, in.mask ? &*in.mask : nullptr, opts);
    for (const auto& w : r.warnings) warn(w);
    r.model->save(mig_model);
    m.output(mig_model);
    if (r.map_t1) {
      write_class_map(*r.map_t1, mig_map);
      m.output(mig_map);
    }
    if (!mig_bundle.empty()) {
      r.bundle.write_csv(mig_bundle);
      m.output(mig_bundle);
    }
    json counts = json::object();
    for (auto p : {Provenance::t0_reference, Provenance::t1_reference, Provenance::t1_stable, Provenance::t1_pseudo,
                   Provenance::map_sample}) {
      counts[to_string(p)] = r.bundle.count(p);
    }
    m.note("spec", spec.to_json());
    m.note("provenance_counts", counts);
    m.note("unknown_excluded", r.unknown_excluded);
    m.note("pseudo_dropped", r.pseudo_dropped);
    m.note("warnings", r.warnings);
    m.stage("migrate", start);
    m.write(manifest_path(manifest_flag, mig_model));
  });

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "Spatiotemporal cross-validation of one experiment");
  ExperimentFlags ev;
  int ev_k = 5;
  double ev_radius = 100.0;
  std::string ev_out, ev_csv, ev_audit;
  ev.add(eval);
  eval->add_option("--k", ev_k, "Fold count")->capture_default_str();
  eval->add_option("--radius", ev_radius, "Experiment 3 proximity filter radius in meters")->capture_default_str();
  eval->add_option("--out", ev_out, "Report JSON")->required();
  eval->add_option("--out-csv", ev_csv, "Report as long-format CSV");
  eval->add_option("--audit", ev_audit, "Per-fold train/test membership JSON");
  on(eval, [&] {
    const auto start = std::chrono::steady_clock::now();
    const ExperimentSpec spec = ev.spec();
    Manifest m("eval", args);
    m.seed(spec.seed);
    LoadedInputs in = load_inputs(ev, spec, m);
    CrossValidateOptions cv;
    cv.k = ev_k;
    cv.seed = spec.seed;
    cv.proximity_radius_m = ev_radius;
    const EvalReport report = cross_validate(spec, in.samples, {in.t0, in.t1}, in.mask ? &*in.mask : nullptr, cv);
    for (const auto& w : report.warnings) warn(w);
    write_json(ev_out, report.to_json());
    m.output(ev_out);
    if (!ev_csv.empty()) {
      atomic_write(ev_csv, report_csv(report));
      m.output(ev_csv);
    }
    if (!ev_audit.empty()) {
      json a = json::array();
      for (const auto& f : report.audit) {
        a.push_back({{"fold", f.fold}, {"train_row_ids", f.train_row_ids}, {"train_coords", f.train_coords},
                     {"test_ids", f.test_ids}, {"test_coords", f.test_coords},
                     {"discarded_t0_ids", f.discarded_t0_ids}});
      }
      write_json(ev_audit, {{"folds", a}, {"violations", llto_violations(report)}});
      m.output(ev_audit);
    }
    m.stage("eval", start);
    m.write(manifest_path(manifest_flag, ev_out));
  });

  // sweep ------------------------------------------------------------------
  auto* sweep = app.add_subcommand("sweep", "Cross-validate over increasing training-sample fractions");
  ExperimentFlags sw;
  int sw_k = 5;
  std::vector<double> sw_fractions;
  std::string sw_out, sw_csv;
  sw.add(sweep);
  sweep->add_option("--k", sw_k, "Fold count")->capture_default_str();
  sweep->add_option("--fractions", sw_fractions, "Comma-separated fractions in (0, 1]")->required()->delimiter(',');
  sweep->add_option("--out", sw_out, "Sweep JSON")->required();
  sweep->add_option("--out-csv", sw_csv, "One row per fraction");
  on(sweep, [&] {
    const auto start = std::chrono::steady_clock::now();
    const ExperimentSpec spec = sw.spec();
    Manifest m("sweep", args);
    m.seed(spec.seed);
    LoadedInputs in = load_inputs(sw, spec, m);
    CrossValidateOptions cv;
    cv.k = sw_k;
    cv.seed = spec.seed;
    const SweepResult r =
        fraction_sweep(spec, in.samples, {in.t0, in.t1}, in.mask ? &*in.mask : nullptr, sw_fractions, cv);
    for (const auto& w : r.warnings) warn(w);
    write_json(sw_out, r.to_json());
    m.output(sw_out);
    if (!sw_csv.empty()) {
      atomic_write(sw_csv, r.to_csv());
      m.output(sw_csv);
    }
    m.stage("sweep", start);
    m.write(manifest_path(manifest_flag, sw_out));
  });

  // reproduce --------------------------------------------------------------
  auto* reproduce = app.add_subcommand("reproduce", "Run the full experiment ladder on a synthetic benchmark");
  std::uint64_t rp_seed = 0;
  std::string rp_out, rp_preset = "bench", rp_config;
  int rp_k = 5;
  reproduce->add_option("--seed", rp_seed, "Random seed")->required();
  reproduce->add_option("--out-dir", rp_out, "Output directory")->required();
  reproduce->add_option("--preset", rp_preset, "Scene preset")->check(CLI::IsMember({"small", "bench"}))
      ->capture_default_str();
  reproduce->add_option("--k", rp_k, "Fold count")->capture_default_str();
  reproduce->add_option("--synth-config", rp_config, "Scene configuration JSON used instead of the preset");
  on(reproduce, [&] {
    auto start = std::chrono::steady_clock::now();
    const fs::path out(rp_out);
    Manifest m("reproduce", args);
    m.seed(rp_seed);
    SynthConfig config = SynthConfig::preset(rp_preset, rp_seed);
    if (!rp_config.empty()) {
      try {
        config = SynthConfig::from_json(json::parse(read_file(rp_config)));
      } catch (const json::exception& e) {
        throw DataError(std::string("synth config: ") + e.what());
      }
      m.input(rp_config);
    }
    config.seed = rp_seed;
    const BenchmarkRun run = run_benchmark(config, kAllExperiments, rp_k);
    m.stage("benchmark", start);

    start = std::chrono::steady_clock::now();
    for (const auto& f : write_scene(run.scene, out / "scene")) m.output(f);
    write_change_mask(run.mask.mask, out / "scene" / "irmad_mask");
    m.output(out / "scene" / "irmad_mask");
    write_raster(to_raster(run.mask.irmad.z), out / "scene" / "irmad_z");
    m.output(out / "scene" / "irmad_z");
    fs::create_directories(out / "reports");
    fs::create_directories(out / "models");
    fs::create_directories(out / "maps");
    const RasterPair rasters{run.scene.raster_t0, run.scene.raster_t1};
    for (const auto& o : run.outcomes) {
      const std::string id = experiment_id(o.experiment);
      const fs::path report = out / "reports" / ("exp_" + id + ".json");
      write_json(report, o.report.to_json());
      m.output(report);
      // Final model for each experiment, trained on every reference point.
      const ExperimentSpec spec = benchmark_spec(o.experiment, config);
      ExperimentResult r = run_experiment(spec, run.scene.samples, rasters, &run.mask.mask);
      const fs::path model = out / "models" / ("exp_" + id + ".lcrf");
      r.model->save(model);
      m.output(model);
      write_class_map(*r.map_t1, out / "maps" / ("exp_" + id));
      m.output(out / "maps" / ("exp_" + id));
    }
    atomic_write(out / "ranking.csv", ranking_csv(run));
    atomic_write(out / "ranking.txt", ranking_text(run));
    m.output(out / "ranking.csv");
    m.output(out / "ranking.txt");
    m.stage("final models and outputs", start);
    m.note("irmad", {{"iterations", run.mask.irmad.iterations},
                     {"converged", run.mask.irmad.converged},
                     {"threshold", run.mask.optimum.threshold},
                     {"reference_f1", run.mask.optimum.f1},
                     {"reference_points", run.mask.reference_points},
                     {"warnings", run.mask.warnings}});
    for (const auto& w : run.mask.warnings) std::cerr << "warning: " << w << '\n';
    m.write(manifest_flag.empty() ? out / "manifest.json" : fs::path(manifest_flag));
    std::cout << ranking_text(run);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  try {
    set_max_threads(threads);
    if (action) action();
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace lcmigrate::app
