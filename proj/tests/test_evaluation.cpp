#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "disagg/error.hpp"
#include "disagg/evaluation.hpp"
#include "disagg/serialize.hpp"
#include "disagg/synth.hpp"
#include "support.hpp"

using namespace disagg;
using namespace disagg::eval;

namespace {

std::vector<double> lognormal(std::uint64_t seed, std::size_t n) {
  RngStream rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = std::exp(rng.normal());
  return v;
}

double max_fold_deviation(const std::vector<double>& y, const std::vector<std::size_t>& labels,
                          std::size_t k) {
  const double global = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  std::vector<double> sum(k, 0.0), cnt(k, 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    sum[labels[i]] += y[i];
    cnt[labels[i]] += 1.0;
  }
  double worst = 0.0;
  for (std::size_t f = 0; f < k; ++f) worst = std::max(worst, std::abs(sum[f] / cnt[f] - global));
  return worst;
}

double sample_sd(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

prep::RegionData synth_data(std::uint64_t seed, std::size_t regions = 20) {
  synth::SynthSpec s;
  s.nrows = 10;
  s.ncols = 10;
  s.n_regions = regions;
  s.seed = seed;
  return synth::to_region_data(synth::generate_dataset(s));
}

model::TrainConfig tiny_train() {
  model::TrainConfig c;
  c.epochs = 5;
  c.optimizer = nn::AdamConfig{0.01};
  return c;
}

}  // namespace

TEST_CASE("stratified folds: sorted blocks take one of each") {
  std::vector<double> y{7, 3, 10, 1, 5, 9, 2, 8, 4, 6};
  const auto f = stratified_folds(y, 5, 1);
  for (std::size_t fold = 0; fold < 5; ++fold) {
    const auto m = f.members(fold);
    REQUIRE(m.size() == 2);
    const int low = (y[m[0]] <= 5) + (y[m[1]] <= 5);
    CHECK(low == 1);
  }
}

TEST_CASE("stratified folds: leave-one-out and argument checks") {
  std::vector<double> y{3, 1, 2, 5};
  const auto f = stratified_folds(y, 4, 9);
  for (std::size_t fold = 0; fold < 4; ++fold) CHECK(f.members(fold).size() == 1);
  CHECK_THROWS_AS(stratified_folds(y, 1, 0), ValidationError);
  CHECK_THROWS_AS(stratified_folds(y, 5, 0), ValidationError);
}

TEST_CASE("stratified folds: exact partition over 100 seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto y = lognormal(seed, 37);
    const auto f = stratified_folds(y, 5, seed);
    std::vector<int> seen(y.size(), 0);
    std::size_t total = 0;
    for (std::size_t fold = 0; fold < 5; ++fold) {
      const auto m = f.members(fold);
      CHECK(m.size() >= 7);
      CHECK(m.size() <= 8);
      for (auto i : m) ++seen[i];
      total += m.size();
      CHECK(f.complement(fold).size() == y.size() - m.size());
    }
    CHECK(total == y.size());
    for (int s : seen) CHECK(s == 1);
  }
}

TEST_CASE("stratified folds: balance on lognormal responses") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto y = lognormal(1000 + seed, 100);
    const auto f = stratified_folds(y, 5, seed);
    CHECK(max_fold_deviation(y, f.labels, 5) <= 0.5 * sample_sd(y));
  }
}

TEST_CASE("stratification beats uniform random folds") {
  std::size_t wins = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto y = lognormal(5000 + seed, 100);
    const auto strat = stratified_folds(y, 5, seed);
    // Uniform random partition into equal folds.
    std::vector<std::size_t> labels(y.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 5;
    RngStream rng(derive_seed(seed, 77));
    rng.shuffle(std::span<std::size_t>(labels));
    if (max_fold_deviation(y, strat.labels, 5) <= max_fold_deviation(y, labels, 5)) ++wins;
  }
  CHECK(wins >= 190);
}

TEST_CASE("summary: student t interval on a 50-run timing sample") {
  // mean 148.12 s, sd 40.90, 50 runs: 95% CI 136.49 to 159.74.
  std::vector<double> z(50);
  RngStream rng(3);
  for (auto& v : z) v = rng.normal();
  const double zm = std::accumulate(z.begin(), z.end(), 0.0) / 50.0;
  const double zs = [&] {
    double ss = 0.0;
    for (double v : z) ss += (v - zm) * (v - zm);
    return std::sqrt(ss / 49.0);
  }();
  std::vector<double> values;
  for (double v : z) values.push_back(148.12 + 40.90 * (v - zm) / zs);
  const auto s = summarize(values);
  CHECK(s.n == 50);
  CHECK(s.mean == doctest::Approx(148.12).epsilon(1e-12));
  CHECK(s.sd == doctest::Approx(40.90).epsilon(1e-12));
  // Inputs and outputs are rounded to 2 decimals in the table.
  CHECK(std::abs(s.ci_lower - 136.49) < 0.01);
  CHECK(std::abs(s.ci_upper - 159.74) < 0.01);

  const auto n = summarize(values, CiMethod::normal);
  CHECK(n.ci_upper - n.mean == doctest::Approx(1.96 * 40.90 / std::sqrt(50.0)));
}

TEST_CASE("summary: degenerate inputs") {
  const std::vector<double> one{4.0};
  const auto s = summarize(one);
  CHECK(s.mean == 4.0);
  CHECK(std::isnan(s.sd));
  CHECK(std::isnan(s.ci_lower));
  CHECK_THROWS_AS(summarize(std::vector<double>{}), ValidationError);
  const std::vector<double> flat{2.0, 2.0, 2.0};
  CHECK(summarize(flat).ci_lower == 2.0);
}

TEST_CASE("metrics closed forms") {
  const std::vector<double> y{1, 2, 3};
  auto m = compute_metrics(y, y);
  CHECK(m.mae == 0.0);
  CHECK(m.rmse == 0.0);
  CHECK(*m.pearson == doctest::Approx(1.0));
  m = compute_metrics(std::vector<double>{0, 2}, std::vector<double>{1, 1});
  CHECK(m.mae == 1.0);
  CHECK(m.rmse == 1.0);
  CHECK_FALSE(m.pearson.has_value());
  m = compute_metrics(y, std::vector<double>{3, 2, 1});
  CHECK(*m.pearson == doctest::Approx(-1.0));
}

TEST_CASE("repeated cv: shape, shared splits and reproducibility") {
  const auto data = synth_data(1);
  model::ModelSpec linear;
  model::ModelSpec hidden;
  hidden.layers_cov = {nn::Dense{3, nn::Activation::relu}};
  const auto a = repeated_cross_validate(data, linear, tiny_train(), 5, 20, 42);
  const auto b = repeated_cross_validate(data, hidden, tiny_train(), 5, 20, 42);
  CHECK(a.cells.size() == 100);
  CHECK(a.splits.size() == 20);
  CHECK(a.splits == b.splits);
  CHECK(a.summary.n == 100);

  const auto again = repeated_cross_validate(data, linear, tiny_train(), 5, 20, 42);
  for (std::size_t i = 0; i < a.cells.size(); ++i) CHECK(a.cells[i].loss == again.cells[i].loss);

  const auto parallel = repeated_cross_validate(data, linear, tiny_train(), 5, 20, 42, {4});
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    CHECK(a.cells[i].loss == parallel.cells[i].loss);
    CHECK(parallel.cells[i].repeat == i / 5);
    CHECK(parallel.cells[i].fold == i % 5);
  }

  std::ostringstream csv;
  write_cv_losses_csv(csv, a);
  std::istringstream in(csv.str());
  std::string line;
  std::size_t rows = 0;
  std::getline(in, line);
  CHECK(line == "repeat,fold,loss");
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 100);
  CHECK(csv.str().find("\n1,1,") != std::string::npos);
  CHECK(csv.str().find("\n20,5,") != std::string::npos);
}

TEST_CASE("cv on identical regions: out-of-sample equals in-sample") {
  prep::RegionData data;
  data.covariate_names = {"c"};
  for (std::size_t r = 0; r < 10; ++r) {
    prep::PixelTable t;
    t.region_index = r;
    t.pixels = {0, 1};
    t.covariates = Matrix(2, 1);
    t.covariates(0, 0) = 1.0;
    t.covariates(1, 0) = -1.0;
    t.xy = Matrix(2, 2, 0.5);
    t.population = {100, 200};
    data.tables.push_back(t);
    data.responses.push_back(30.0);
    data.region_ids.push_back("r" + std::to_string(r));
  }
  const std::vector<std::size_t> train{0, 1, 2, 3, 4, 5, 6, 7}, test{8, 9};
  model::TrainConfig cfg = tiny_train();
  cfg.epochs = 50;
  const double out = fit_and_score(data, train, test, {}, cfg, 3);
  const double in = fit_and_score(data, train, train, {}, cfg, 3);
  CHECK(out == doctest::Approx(in).epsilon(1e-12));
}

TEST_CASE("cv failures name the cell") {
  auto data = synth_data(2);
  model::TrainConfig bad = tiny_train();
  bad.early_stopping = model::EarlyStoppingConfig{model::Monitor::val_loss, 0.0, 3};
  CHECK_THROWS_AS(repeated_cross_validate(data, {}, bad, 5, 1, 0), ValidationError);
  model::ModelSpec s;
  s.layers_cov = {nn::Dense{2, nn::Activation::linear}};
  model::TrainConfig explode = tiny_train();
  explode.optimizer = nn::SgdConfig{1e6};
  try {
    repeated_cross_validate(data, s, explode, 5, 1, 0);
    FAIL("expected a numeric failure");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("cv repeat 1 fold") != std::string::npos);
  }
}

TEST_CASE("hypergrid: combination counts and sampled size") {
  HyperGridConfig cfg;
  CHECK(hypergrid_combinations(cfg, 1) == 57);
  CHECK(hypergrid_combinations(cfg, 2) == 1083);
  CHECK(hypergrid_combinations(cfg, 3) == 20577);
  CHECK(hypergrid_combinations(cfg, 4) == 390963);
  std::uint64_t total = 0;
  for (std::size_t d = 1; d <= 4; ++d) total += hypergrid_combinations(cfg, d);
  CHECK(total == 412680);

  model::ModelSpec base;
  base.covariate_names = {"a", "b", "c", "d"};
  const auto grid = sample_hypergrid(cfg, base, 7);
  CHECK(grid.candidates.size() == 207);
  std::set<std::string> unique;
  for (const auto& c : grid.candidates) {
    const std::size_t depth = c.layers_cov.size() / 2;
    CHECK(depth >= 1);
    CHECK(depth <= 4);
    const double rate = std::get<nn::Dropout>(c.layers_cov[1]).rate;
    for (std::size_t i = 0; i < c.layers_cov.size(); i += 2) {
      const auto& d = std::get<nn::Dense>(c.layers_cov[i]);
      CHECK(d.units >= 2);
      CHECK(d.units <= 20);
      CHECK(d.activation == nn::Activation::relu);
      CHECK(std::get<nn::Dropout>(c.layers_cov[i + 1]).rate == rate);
    }
    CHECK(c.covariate_names == base.covariate_names);
    unique.insert(nlohmann::json(c).dump());
  }
  CHECK(unique.size() == 207);

  const auto again = sample_hypergrid(cfg, base, 7);
  CHECK(hypergrid_to_json(again) == hypergrid_to_json(grid));
  CHECK(hypergrid_to_json(sample_hypergrid(cfg, base, 8)) != hypergrid_to_json(grid));
}

TEST_CASE("hypergrid: file round trip and validation") {
  support::TempDir dir("hyper");
  HyperGridConfig cfg;
  cfg.max_depth = 2;
  cfg.per_depth = {3, 4};
  const auto grid = sample_hypergrid(cfg, {}, 1);
  CHECK(grid.candidates.size() == 7);
  save_hypergrid(dir.path() / "g.json", grid);
  CHECK(hypergrid_to_json(load_hypergrid(dir.path() / "g.json")) == hypergrid_to_json(grid));
  CHECK_THROWS_AS(hypergrid_from_json(nlohmann::json::object()), ValidationError);
  cfg.per_depth = {1};
  CHECK_THROWS_AS(sample_hypergrid(cfg, {}, 1), ValidationError);
}

TEST_CASE("nested cv: single candidate, leakage and report layout") {
  const auto data = synth_data(3, 25);
  HyperGrid grid;
  grid.candidates.push_back({});
  const auto report = nested_cross_validate(data, grid, tiny_train(), 5, 3, 11);
  REQUIRE(report.folds.size() == 5);
  for (const auto& f : report.folds) {
    CHECK(f.best_index == 0);
    const std::set<std::size_t> test(f.test_regions.begin(), f.test_regions.end());
    REQUIRE(f.inner_train_regions.size() == 3);
    std::set<std::size_t> inner_val_union;
    for (std::size_t i = 0; i < 3; ++i) {
      for (auto r : f.inner_train_regions[i]) CHECK(test.count(r) == 0);
      for (auto r : f.inner_val_regions[i]) {
        CHECK(test.count(r) == 0);
        inner_val_union.insert(r);
      }
    }
    CHECK(inner_val_union.size() + test.size() == data.size());
    // Plain outer CV of the only candidate.
    const double direct =
        fit_and_score(data, report.outer.complement(f.outer_fold), f.test_regions, {},
                      tiny_train(), derive_seed(11, 2000 + f.outer_fold));
    CHECK(f.outer_loss == direct);
  }
  std::ostringstream csv;
  write_ncv_report_csv(csv, report);
  CHECK(csv.str().rfind("outer_fold,best_hyper_index,inner_loss,outer_loss\n1,0,", 0) == 0);
  CHECK(csv.str().find("\nmean,,") != std::string::npos);

  const auto parallel = nested_cross_validate(data, grid, tiny_train(), 5, 3, 11, {3});
  for (std::size_t j = 0; j < 5; ++j) CHECK(parallel.folds[j].outer_loss == report.folds[j].outer_loss);
}

TEST_CASE("nested cv ties go to the lower index") {
  const auto data = synth_data(4, 15);
  HyperGrid grid;
  grid.candidates = {model::ModelSpec{}, model::ModelSpec{}};
  model::TrainConfig frozen = tiny_train();
  frozen.epochs = 1;
  frozen.optimizer = nn::SgdConfig{0.0};
  const auto report = nested_cross_validate(data, grid, frozen, 3, 2, 5);
  for (const auto& f : report.folds) {
    CHECK(f.candidate_inner_loss[0] == f.candidate_inner_loss[1]);
    CHECK(f.best_index == 0);
  }
}

TEST_CASE("nested cv: diverging candidates abort or are disqualified") {
  const auto data = synth_data(3, 20);
  model::ModelSpec deep;
  for (int i = 0; i < 3; ++i) deep.layers_cov.emplace_back(nn::Dense{8, nn::Activation::linear});
  HyperGrid grid;
  grid.candidates = {deep, model::ModelSpec{}};
  model::TrainConfig wild;
  wild.epochs = 20;
  wild.optimizer = nn::AdamConfig{1.0};
  CHECK_THROWS_WITH_AS(nested_cross_validate(data, grid, wild, 3, 3, 1),
                       doctest::Contains("candidate 0"), NumericError);

  EvalOptions opts;
  opts.disqualify_nonfinite = true;
  const auto report = nested_cross_validate(data, grid, wild, 3, 3, 1, opts);
  std::size_t out = 0;
  for (const auto& f : report.folds) {
    if (std::isinf(f.candidate_inner_loss[0])) {
      ++out;
      CHECK(f.best_index == 1);
    }
    CHECK(std::isfinite(f.inner_loss));
    CHECK(std::isfinite(f.outer_loss));
  }
  CHECK(out > 0);

  grid.candidates = {deep};
  CHECK_THROWS_WITH_AS(nested_cross_validate(data, grid, wild, 3, 3, 1, opts),
                       doctest::Contains("disqualified"), NumericError);
}

TEST_CASE("timing harness") {
  std::vector<TimingTask> tasks{{"noop", [] {}}, {"sleep", [] {
                                                  std::this_thread::sleep_for(
                                                      std::chrono::microseconds(200));
                                                }}};
  const auto report = timing_benchmark(tasks, 50);
  CHECK(report.rows.size() == 100);
  CHECK(report.rows[0].task == "noop");
  CHECK(report.rows[1].task == "sleep");
  REQUIRE(report.summary.size() == 2);
  CHECK(report.summary[0].second.n == 50);
  CHECK(report.summary[0].second.sd < 1e-3);
  CHECK(report.summary[1].second.mean >= 2e-4);
  CHECK_THROWS_AS(timing_benchmark(tasks, 1), ValidationError);
  std::ostringstream csv;
  write_timing_csv(csv, report);
  CHECK(csv.str().rfind("task,run,seconds\nnoop,1,", 0) == 0);
}

TEST_CASE("folds csv is 1-based") {
  FoldAssignment f{{0, 1, 1, 0}, 2, 3};
  std::ostringstream csv;
  write_folds_csv(csv, {f}, {"a", "b", "c", "d"});
  CHECK(csv.str() == "repeat,region_id,fold\n1,a,1\n1,b,2\n1,c,2\n1,d,1\n");
}
