#include "cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <type_traits>

#include <CLI11.hpp>

#include "disagg/data_prep.hpp"
#include "disagg/error.hpp"
#include "disagg/grid_io.hpp"
#include "disagg/serialize.hpp"
#include "disagg/version.hpp"

namespace disagg::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

// Typed, path-aware access to one config section.
class Section {
 public:
  Section(const json* node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ != nullptr && !node_->is_null() && !node_->is_object()) {
      throw ValidationError("config field '" + path_ + "' must be an object");
    }
  }

  bool has(const char* key) const {
    return node_ != nullptr && node_->is_object() && node_->contains(key) &&
           !node_->at(key).is_null();
  }
  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
  const json& raw(const char* key) const { return node_->at(key); }

  Section sub(const char* key) const { return Section(has(key) ? &raw(key) : nullptr, where(key)); }

  void allow(std::initializer_list<const char*> keys) const {
    if (node_ == nullptr || node_->is_null()) return;
    const std::set<std::string> ok(keys.begin(), keys.end());
    for (const auto& [key, _] : node_->items()) {
      if (!ok.contains(key)) throw ValidationError("unknown config field '" + where(key.c_str()) + "'");
    }
  }

  std::string str(const char* key, std::string def) const {
    if (!has(key)) return def;
    if (!raw(key).is_string()) throw ValidationError("config field '" + where(key) + "' must be a string");
    return raw(key).get<std::string>();
  }
  double num(const char* key, double def) const {
    if (!has(key)) return def;
    if (!raw(key).is_number()) throw ValidationError("config field '" + where(key) + "' must be a number");
    return raw(key).get<double>();
  }
  std::uint64_t count(const char* key, std::uint64_t def) const {
    if (!has(key)) return def;
    if (!raw(key).is_number_unsigned()) {
      throw ValidationError("config field '" + where(key) + "' must be a non-negative integer");
    }
    return raw(key).get<std::uint64_t>();
  }
  bool flag(const char* key, bool def) const {
    if (!has(key)) return def;
    if (!raw(key).is_boolean()) throw ValidationError("config field '" + where(key) + "' must be a boolean");
    return raw(key).get<bool>();
  }
  template <typename T>
  T as(const char* key, T def) const {
    if (!has(key)) return def;
    try {
      return raw(key).get<T>();
    } catch (const json::exception& e) {
      throw ValidationError("config field '" + where(key) + "': " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("config field '" + where(key) + "': " + e.what());
    }
  }

 private:
  const json* node_;
  std::string path_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

struct Inputs {
  grid::RasterStack stack;
  grid::Raster population;
  grid::RegionSet regions;
  grid::RegionMask mask;
  prep::RegionData data;
};

void require_path(const fs::path& p, const char* field) {
  if (p.empty()) throw ValidationError(std::string("config field '") + field + "' is required");
}

Inputs load_inputs(const RunConfig& cfg, bool with_regions = true) {
  require_path(cfg.covariates, "paths.covariates");
  require_path(cfg.population, "paths.population");
  Inputs in;
  in.stack = grid::read_covariate_dir(cfg.covariates);
  in.population = grid::read_ascii_grid(cfg.population);
  const auto report = grid::check_alignment(in.stack, in.population);
  if (!report.aligned()) {
    std::string names;
    for (const auto& m : report.mismatches) names += (names.empty() ? "" : ", ") + m;
    throw ValidationError("population raster is not aligned with the covariates (" + names + ")");
  }
  if (!with_regions) return in;
  require_path(cfg.shapes, "paths.shapes");
  in.regions = grid::read_region_file(cfg.shapes, cfg.id_field, cfg.response_field);
  in.mask = grid::rasterize_regions(in.regions, in.population);
  in.data = prep::prepare_region_data(in.stack, in.population, in.regions, in.mask);
  return in;
}

model::DisaggModel train_model(const RunConfig& cfg, const prep::PaddedDataset& data,
                               model::FitHistory* history) {
  auto m = model::build_model(cfg.spec, data, derive_seed(cfg.seed, 100));
  auto train = cfg.train;
  train.seed = derive_seed(cfg.seed, 101);
  auto h = model::fit(m, data, train);
  if (history != nullptr) *history = std::move(h);
  return m;
}

class Run {
 public:
  Run(RunConfig cfg, std::string command, std::size_t jobs, std::ostream& out)
      : cfg_(std::move(cfg)), command_(std::move(command)), jobs_(jobs), out_(out) {
    fs::create_directories(cfg_.output);
  }

  const RunConfig& cfg() const { return cfg_; }
  std::size_t jobs() const { return jobs_; }
  std::ostream& out() { return out_; }

  template <typename F>
  auto stage(const std::string& name, F&& fn) {
    const auto start = std::chrono::steady_clock::now();
    auto finish = [&] {
      stages_.push_back({{"name", name},
                         {"seconds", std::chrono::duration<double>(
                                         std::chrono::steady_clock::now() - start)
                                         .count()}});
    };
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      finish();
    } else {
      auto result = fn();
      finish();
      return result;
    }
  }

  fs::path artifact(const fs::path& relative) {
    const fs::path full = cfg_.output / relative;
    if (full.has_parent_path()) fs::create_directories(full.parent_path());
    artifacts_.push_back(relative.generic_string());
    return full;
  }

  std::ofstream open(const fs::path& relative) {
    std::ofstream f(artifact(relative));
    if (!f) throw Error("cannot write '" + (cfg_.output / relative).string() + "'");
    return f;
  }

  void write_manifest() {
    json manifest = {
        {"command", command_},
        {"config_hash", hex(fnv1a(cfg_.doc.dump()))},
        {"seed", cfg_.seed},
        {"jobs", jobs_},
        {"versions", {{"disagg", kVersion}, {"cxx_standard", static_cast<long>(__cplusplus)},
#if defined(__VERSION__)
                      {"compiler", __VERSION__}
#else
                      {"compiler", "unknown"}
#endif
                     }},
        {"stages", stages_},
        {"artifacts", artifacts_},
        {"config", cfg_.doc}};
    std::ofstream f(cfg_.output / "manifest.json");
    if (!f) throw Error("cannot write manifest");
    f << manifest.dump(2) << '\n';
  }

 private:
  RunConfig cfg_;
  std::string command_;
  std::size_t jobs_;
  std::ostream& out_;
  json stages_ = json::array();
  std::vector<std::string> artifacts_;
};

void write_prediction(Run& run, const model::Prediction& pred) {
  grid::write_ascii_grid(run.artifact("prediction/rate.asc"), pred.rate);
  if (pred.count) grid::write_ascii_grid(run.artifact("prediction/count.asc"), *pred.count);
  if (pred.spatial_effect) {
    grid::write_ascii_grid(run.artifact("prediction/spatial_effect.asc"), *pred.spatial_effect);
  }
}

void cmd_prepare(Run& run) {
  const auto in = run.stage("prepare", [&] { return load_inputs(run.cfg()); });
  const auto padded = run.stage("pad", [&] { return prep::make_padded(in.data); });
  const fs::path dir = "dataset";
  prep::save_dataset(run.cfg().output / dir, padded);
  for (const char* f : {"covariates.f64", "population.f64", "xy.f64", "response.f64", "dataset.json"}) {
    run.artifact(dir / f);
  }
  auto csv = run.open("region_pixels.csv");
  csv << "region_id,pixels,response\n";
  for (std::size_t r = 0; r < padded.n_regions; ++r) {
    csv << padded.region_ids[r] << ',' << padded.true_lengths[r] << ',' << fmt(padded.response[r])
        << '\n';
  }
  run.out() << "prepare: " << padded.n_regions << " regions, Pmax " << padded.pmax << ", "
            << padded.n_channels << " covariates\n";
}

void cmd_fit(Run& run) {
  const auto& cfg = run.cfg();
  const auto in = run.stage("prepare", [&] { return load_inputs(cfg); });
  const auto padded = run.stage("pad", [&] { return prep::make_padded(in.data); });
  model::FitHistory history;
  const auto m = run.stage("fit", [&] { return train_model(cfg, padded, &history); });

  model::save_model(run.artifact("model.json"), m);
  {
    auto f = run.open("history.csv");
    model::write_history_csv(f, history);
  }
  const auto pred = run.stage("predict", [&] { return model::predict_raster(m, in.stack, &in.population); });
  write_prediction(run, pred);

  const auto fitted = model::forward_disagg(m, padded).agg;
  const auto reagg = model::reaggregate(pred.rate, in.population, in.mask);
  auto csv = run.open("regions.csv");
  csv << "region_id,observed,fitted,reaggregated,population,incidence\n";
  for (std::size_t r = 0; r < padded.n_regions; ++r) {
    const auto& a = reagg[in.data.tables[r].region_index];
    csv << padded.region_ids[r] << ',' << fmt(padded.response[r]) << ',' << fmt(fitted[r]) << ','
        << fmt(a.count) << ',' << fmt(a.population) << ',' << (a.rate ? fmt(*a.rate) : "") << '\n';
  }
  const auto metrics = eval::compute_metrics(padded.response, fitted);
  {
    auto f = run.open("metrics.csv");
    f << "metric,value\npoisson," << fmt(metrics.poisson) << "\nmae," << fmt(metrics.mae)
      << "\nrmse," << fmt(metrics.rmse) << "\npearson,"
      << (metrics.pearson ? fmt(*metrics.pearson) : "") << '\n';
  }
  if (m.spec.is_linear()) {
    auto f = run.open("weights.csv");
    f << "variable,value\n";
    for (const auto& w : model::extract_weights(m)) f << w.name << ',' << fmt(w.value) << '\n';
  }
  run.out() << "fit: " << history.size() << " epochs (" << history.stop_reason << "), final loss "
            << (history.loss.empty() ? std::string("n/a") : fmt(history.loss.back())) << '\n';
}

model::DisaggModel load_configured_model(const RunConfig& cfg) {
  if (!cfg.model_path) throw ValidationError("config field 'paths.model' is required");
  return model::load_model(*cfg.model_path);
}

void cmd_predict(Run& run) {
  const auto& cfg = run.cfg();
  const auto m = load_configured_model(cfg);
  const auto stack = run.stage("prepare", [&] {
    require_path(cfg.covariates, "paths.covariates");
    return grid::read_covariate_dir(cfg.covariates);
  });
  std::optional<grid::Raster> population;
  if (!cfg.population.empty()) population = grid::read_ascii_grid(cfg.population);
  const auto pred = run.stage("predict", [&] {
    return model::predict_raster(m, stack, population ? &*population : nullptr);
  });
  write_prediction(run, pred);
  run.out() << "predict: wrote " << (cfg.output / "prediction").string() << '\n';
}

void cmd_cv(Run& run) {
  const auto& cfg = run.cfg();
  const auto in = run.stage("prepare", [&] { return load_inputs(cfg); });
  const auto report = run.stage("cv", [&] {
    return eval::repeated_cross_validate(in.data, cfg.spec, cfg.train, cfg.k, cfg.repeats, cfg.seed,
                                         {run.jobs(), cfg.ci});
  });
  {
    auto f = run.open("cv_losses.csv");
    eval::write_cv_losses_csv(f, report);
  }
  {
    auto f = run.open("cv_summary.csv");
    eval::write_summary_csv(f, {{"cv", report.summary}});
  }
  {
    auto f = run.open("folds.csv");
    eval::write_folds_csv(f, report.splits, in.data.region_ids);
  }
  run.out() << "cv: " << report.cells.size() << " losses, mean " << fmt(report.summary.mean)
            << ", sd " << fmt(report.summary.sd) << '\n';
}

void cmd_ncv(Run& run) {
  const auto& cfg = run.cfg();
  const auto in = run.stage("prepare", [&] { return load_inputs(cfg); });
  eval::HyperGrid grid;
  if (cfg.hypergrid_path) {
    grid = eval::load_hypergrid(*cfg.hypergrid_path);
  } else {
    grid = eval::sample_hypergrid(cfg.sampler, cfg.spec, derive_seed(cfg.seed, 200));
  }
  eval::save_hypergrid(run.artifact("hypergrid.json"), grid);
  const auto report = run.stage("ncv", [&] {
    return eval::nested_cross_validate(in.data, grid, cfg.train, cfg.k_outer, cfg.k_inner, cfg.seed,
                                       {run.jobs(), cfg.ci, cfg.disqualify_nonfinite});
  });
  {
    auto f = run.open("ncv_report.csv");
    eval::write_ncv_report_csv(f, report);
  }
  {
    auto f = run.open("ncv_candidates.csv");
    f << "outer_fold,hyper_index,mean_inner_loss\n";
    for (const auto& fold : report.folds) {
      for (std::size_t c = 0; c < fold.candidate_inner_loss.size(); ++c) {
        f << (fold.outer_fold + 1) << ',' << c << ',' << fmt(fold.candidate_inner_loss[c]) << '\n';
      }
    }
  }
  run.out() << "ncv: " << grid.candidates.size() << " candidates, mean inner loss "
            << fmt(report.mean_inner_loss) << ", mean outer loss " << fmt(report.mean_outer_loss)
            << '\n';
}

void cmd_mc_dropout(Run& run) {
  const auto& cfg = run.cfg();
  model::DisaggModel m;
  grid::RasterStack stack;
  std::optional<grid::Raster> population;
  if (cfg.model_path) {
    m = load_configured_model(cfg);
    stack = run.stage("prepare", [&] {
      require_path(cfg.covariates, "paths.covariates");
      return grid::read_covariate_dir(cfg.covariates);
    });
    if (!cfg.population.empty()) population = grid::read_ascii_grid(cfg.population);
  } else {
    auto in = run.stage("prepare", [&] { return load_inputs(cfg); });
    const auto padded = prep::make_padded(in.data);
    m = run.stage("fit", [&] { return train_model(cfg, padded, nullptr); });
    model::save_model(run.artifact("model.json"), m);
    stack = std::move(in.stack);
    population = std::move(in.population);
  }
  if (cfg.mc_scale == unc::Scale::count && !population) {
    throw ValidationError("config field 'uncertainty.scale' = count needs 'paths.population'");
  }
  const auto samples = run.stage("sample", [&] {
    return unc::mc_dropout_predict(m, stack, cfg.mc_samples, cfg.mc_seed, run.jobs(), cfg.mc_scale,
                                   population ? &*population : nullptr);
  });
  const auto summary = unc::summarize_samples(samples);
  for (const char* name : {"mean", "median", "sd", "min", "max", "lower95", "upper95"}) {
    run.artifact(fs::path("uncertainty") / (std::string(name) + ".asc"));
  }
  unc::write_summary_rasters(cfg.output / "uncertainty", summary);
  const auto picked = unc::pick_pixels(samples, cfg.normality_pixels, derive_seed(cfg.mc_seed, 1));
  {
    auto f = run.open("normality.csv");
    unc::write_normality_csv(f, unc::normality_report(samples, cfg.normality_pixels,
                                                      derive_seed(cfg.mc_seed, 1)));
  }
  {
    auto f = run.open("samples.csv");
    unc::write_samples_csv(f, samples, picked);
  }
  run.out() << "mc-dropout: " << samples.n_samples() << " samples over " << samples.n_pixels()
            << " pixels\n";
}

void cmd_synth(Run& run) {
  const auto& cfg = run.cfg();
  const auto data = run.stage("generate", [&] { return synth::generate_dataset(cfg.synth); });
  for (const auto& p : synth::write_dataset(cfg.output, data)) {
    run.artifact(fs::relative(p, cfg.output));
  }
  const json template_cfg = {
      {"seed", cfg.seed},
      {"paths",
       {{"shapes", "regions.geojson"}, {"covariates", "covariates"},
        {"population", "population.asc"}, {"output", "run"}}},
      {"id_field", "id"},
      {"response_field", "response"},
      {"model", {{"layers_cov", json::array()}, {"link", "log"}}},
      {"train", {{"epochs", 1000}}}};
  auto f = run.open("run.json");
  f << template_cfg.dump(2) << '\n';
  run.out() << "synth: " << data.regions.size() << " regions on a " << cfg.synth.nrows << "x"
            << cfg.synth.ncols << " grid\n";
}

void cmd_bench(Run& run) {
  const auto& cfg = run.cfg();
  const auto padded = prep::make_padded(load_inputs(cfg).data);
  const std::vector<eval::TimingTask> tasks = {
      {"prepare", [&] { (void)prep::make_padded(load_inputs(cfg).data); }},
      {"fit", [&] { (void)train_model(cfg, padded, nullptr); }}};
  const auto report = run.stage("bench", [&] {
    return eval::timing_benchmark(tasks, cfg.bench_repeats, cfg.ci);
  });
  {
    auto f = run.open("timing.csv");
    eval::write_timing_csv(f, report);
  }
  {
    auto f = run.open("timing_summary.csv");
    eval::write_summary_csv(f, report.summary);
  }
  for (const auto& [name, s] : report.summary) {
    run.out() << "bench " << name << ": mean " << fmt(s.mean) << " s, sd " << fmt(s.sd) << " s\n";
  }
}

json load_config_doc(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("config '" + path + "': " + e.what());
  }
}

}  // namespace

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("override '" + assignment + "' must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw ValidationError("override key '" + key + "' has an empty component");
    if (node->is_null()) *node = json::object();
    if (!node->is_object()) {
      throw ValidationError("override '" + key + "' descends into a non-object field");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

RunConfig parse_run_config(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ValidationError("config must be a JSON object");
  RunConfig cfg;
  cfg.doc = doc;
  const Section root(&doc, "");
  root.allow({"seed", "paths", "id_field", "response_field", "model", "train", "evaluation",
              "uncertainty", "synth", "bench"});
  cfg.seed = root.count("seed", 0);

  const auto paths = root.sub("paths");
  paths.allow({"shapes", "covariates", "population", "output", "model", "hypergrid"});
  cfg.shapes = resolve(base_dir, paths.str("shapes", ""));
  cfg.covariates = resolve(base_dir, paths.str("covariates", ""));
  cfg.population = resolve(base_dir, paths.str("population", ""));
  cfg.output = resolve(base_dir, paths.str("output", "out"));
  if (paths.has("model")) cfg.model_path = resolve(base_dir, paths.str("model", ""));
  if (paths.has("hypergrid")) cfg.hypergrid_path = resolve(base_dir, paths.str("hypergrid", ""));
  cfg.id_field = root.str("id_field", cfg.id_field);
  cfg.response_field = root.str("response_field", cfg.response_field);

  const auto model_sec = root.sub("model");
  model_sec.allow({"layers_cov", "layers_xy", "xy_as_covariates", "link"});
  cfg.spec.layers_cov = model_sec.as("layers_cov", std::vector<nn::LayerSpec>{});
  if (model_sec.has("layers_xy")) {
    cfg.spec.layers_xy = model_sec.as("layers_xy", std::vector<nn::LayerSpec>{});
  }
  cfg.spec.xy_as_covariates = model_sec.flag("xy_as_covariates", false);
  if (cfg.spec.layers_xy && cfg.spec.xy_as_covariates) {
    throw ValidationError(
        "config fields 'model.layers_xy' and 'model.xy_as_covariates' are mutually exclusive");
  }
  try {
    cfg.spec.link = model::link_from_string(model_sec.str("link", "log"));
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config field 'model.link': ") + e.what());
  }

  const auto train = root.sub("train");
  train.allow({"epochs", "optimizer", "validation_split", "early_stopping"});
  cfg.train.epochs = train.count("epochs", cfg.train.epochs);
  cfg.train.optimizer = train.as("optimizer", cfg.train.optimizer);
  cfg.train.validation_split = train.num("validation_split", cfg.train.validation_split);
  if (train.has("early_stopping")) {
    cfg.train.early_stopping = train.as("early_stopping", model::EarlyStoppingConfig{});
  }
  try {
    cfg.train.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config field 'train': ") + e.what());
  }

  const auto ev = root.sub("evaluation");
  ev.allow({"k", "repeats", "k_outer", "k_inner", "ci", "hypergrid_sampler", "disqualify_nonfinite"});
  cfg.k = ev.count("k", cfg.k);
  cfg.repeats = ev.count("repeats", cfg.repeats);
  cfg.k_outer = ev.count("k_outer", cfg.k_outer);
  cfg.k_inner = ev.count("k_inner", cfg.k_inner);
  const auto ci = ev.str("ci", "student_t");
  if (ci == "student_t") {
    cfg.ci = eval::CiMethod::student_t;
  } else if (ci == "normal") {
    cfg.ci = eval::CiMethod::normal;
  } else {
    throw ValidationError("config field 'evaluation.ci' must be 'student_t' or 'normal'");
  }
  cfg.disqualify_nonfinite = ev.flag("disqualify_nonfinite", cfg.disqualify_nonfinite);
  const auto hs = ev.sub("hypergrid_sampler");
  hs.allow({"max_depth", "min_nodes", "max_nodes", "rates", "per_depth"});
  cfg.sampler.max_depth = hs.count("max_depth", cfg.sampler.max_depth);
  cfg.sampler.min_nodes = hs.count("min_nodes", cfg.sampler.min_nodes);
  cfg.sampler.max_nodes = hs.count("max_nodes", cfg.sampler.max_nodes);
  cfg.sampler.rates = hs.as("rates", cfg.sampler.rates);
  cfg.sampler.per_depth = hs.as("per_depth", cfg.sampler.per_depth);

  const auto u = root.sub("uncertainty");
  u.allow({"samples", "seed", "scale", "normality_pixels"});
  cfg.mc_samples = u.count("samples", cfg.mc_samples);
  cfg.mc_seed = u.count("seed", cfg.seed);
  const auto scale = u.str("scale", "rate");
  if (scale == "rate") {
    cfg.mc_scale = unc::Scale::rate;
  } else if (scale == "count") {
    cfg.mc_scale = unc::Scale::count;
  } else {
    throw ValidationError("config field 'uncertainty.scale' must be 'rate' or 'count'");
  }
  cfg.normality_pixels = u.count("normality_pixels", cfg.normality_pixels);

  const auto s = root.sub("synth");
  s.allow({"nrows", "ncols", "n_regions", "beta", "surface_amplitude", "pop_lo", "pop_hi",
           "smooth_window", "cellsize", "xll", "yll", "seed"});
  cfg.synth.nrows = s.count("nrows", cfg.synth.nrows);
  cfg.synth.ncols = s.count("ncols", cfg.synth.ncols);
  cfg.synth.n_regions = s.count("n_regions", cfg.synth.n_regions);
  cfg.synth.beta = s.as("beta", cfg.synth.beta);
  cfg.synth.surface_amplitude = s.num("surface_amplitude", cfg.synth.surface_amplitude);
  cfg.synth.pop_lo = s.num("pop_lo", cfg.synth.pop_lo);
  cfg.synth.pop_hi = s.num("pop_hi", cfg.synth.pop_hi);
  cfg.synth.smooth_window = s.count("smooth_window", cfg.synth.smooth_window);
  cfg.synth.cellsize = s.num("cellsize", cfg.synth.cellsize);
  cfg.synth.xll = s.num("xll", cfg.synth.xll);
  cfg.synth.yll = s.num("yll", cfg.synth.yll);
  cfg.synth.seed = s.count("seed", cfg.seed);
  try {
    cfg.synth.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config field 'synth': ") + e.what());
  }

  const auto b = root.sub("bench");
  b.allow({"repeats"});
  cfg.bench_repeats = b.count("repeats", cfg.bench_repeats);
  return cfg;
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Disaggregation regression with feed-forward networks", "disagg"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1, 1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::size_t jobs = 1;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"prepare", "Build the padded training tensors"},
      {"fit", "Train a model and write prediction rasters"},
      {"predict", "Predict rate rasters from a saved model"},
      {"cv", "Repeated stratified k-fold cross-validation"},
      {"ncv", "Nested cross-validation over a hyperparameter grid"},
      {"mc-dropout", "Monte Carlo dropout uncertainty rasters"},
      {"synth", "Generate a synthetic dataset with known truth"},
      {"bench", "Time data preparation and model fitting"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "Run configuration (JSON)");
    sub->add_option("--set", overrides, "Override a config field: key.path=value")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->add_option("-j,--jobs", jobs, "Worker threads for cv, ncv and mc-dropout")
        ->check(CLI::PositiveNumber);
  }

  std::vector<std::string> argv_store;
  argv_store.emplace_back("disagg");
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    json doc = load_config_doc(config_path);
    if (const char* env = std::getenv("DISAGG_SEED"); env != nullptr && *env != '\0') {
      try {
        std::size_t used = 0;
        const auto seed = std::stoull(env, &used);
        if (used != std::string(env).size()) throw std::invalid_argument(env);
        doc["seed"] = seed;
      } catch (const std::exception&) {
        throw ValidationError(std::string("DISAGG_SEED must be a non-negative integer, got '") + env + "'");
      }
    }
    for (const auto& o : overrides) apply_override(doc, o);
    const fs::path base = config_path.empty() ? fs::current_path() : fs::absolute(config_path).parent_path();
    cfg = parse_run_config(doc, base);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const json::exception& e) {
    err << "error: config: " << e.what() << '\n';
    return kExitInvalid;
  }

  const std::map<std::string, std::function<void(Run&)>> handlers = {
      {"prepare", cmd_prepare}, {"fit", cmd_fit},           {"predict", cmd_predict},
      {"cv", cmd_cv},           {"ncv", cmd_ncv},           {"mc-dropout", cmd_mc_dropout},
      {"synth", cmd_synth},     {"bench", cmd_bench}};
  try {
    Run run(std::move(cfg), command, jobs, out);
    handlers.at(command)(run);
    run.write_manifest();
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

int run_command(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_command(args, std::cout, std::cerr);
}

}  // namespace disagg::cli
