#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "disagg/error.hpp"
#include "disagg/synth.hpp"
#include "support.hpp"

using namespace disagg;
using namespace disagg::synth;

namespace {

SynthSpec small(std::uint64_t seed) {
  SynthSpec s;
  s.nrows = 20;
  s.ncols = 20;
  s.n_regions = 25;
  s.seed = seed;
  return s;
}

prep::PaddedDataset pad_raw(const std::vector<std::vector<double>>& xs,
                            const std::vector<double>& pops, const std::vector<double>& y) {
  std::vector<prep::PixelTable> tables;
  for (std::size_t r = 0; r < xs.size(); ++r) {
    prep::PixelTable t;
    t.region_index = r;
    t.pixels = {r};
    t.covariates = Matrix(1, xs[r].size());
    for (std::size_t c = 0; c < xs[r].size(); ++c) t.covariates(0, c) = xs[r][c];
    t.xy = Matrix(1, 2);
    t.population = {pops[r]};
    tables.push_back(std::move(t));
  }
  return prep::pad_dataset(tables, y);
}

}  // namespace

TEST_CASE("generator: determinism and layout") {
  const auto a = generate_dataset(small(3));
  const auto b = generate_dataset(small(3));
  CHECK(a.covariates.layers() == b.covariates.layers());
  CHECK(a.population == b.population);
  CHECK(a.observed == b.observed);
  CHECK(a.mask == b.mask);
  CHECK(a.covariates.names() == std::vector<std::string>{"cov01", "cov02"});
  CHECK(a.regions.size() == 25);
  CHECK(a.regions.regions[0].id == "R01");
  CHECK(a.mask.assigned_count() == 400);
  for (double p : a.population.values) {
    CHECK(p >= 500.0);
    CHECK(p <= 1500.0);
  }
  const auto c = generate_dataset(small(4));
  CHECK_FALSE(c.observed == a.observed);
}

TEST_CASE("generator: covariates are standardized") {
  const auto d = generate_dataset(small(5));
  for (const auto& layer : d.covariates.layers()) {
    double m = 0.0, ss = 0.0;
    for (double v : layer.values) m += v;
    m /= static_cast<double>(layer.size());
    for (double v : layer.values) ss += (v - m) * (v - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(std::sqrt(ss / static_cast<double>(layer.size())) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("generator: zero coefficients give unit rate") {
  SynthSpec s = small(6);
  s.beta = {0.0, 0.0, 0.0};
  const auto d = generate_dataset(s);
  for (double v : d.true_rate.values) CHECK(v == 1.0);
  const auto pops = model::reaggregate(d.true_rate, d.population, d.mask);
  for (std::size_t r = 0; r < d.regions.size(); ++r) {
    CHECK(d.expected[r] == doctest::Approx(pops[r].population).epsilon(1e-14));
  }
}

TEST_CASE("generator: observed incidence tracks the true rate") {
  // Monte Carlo check over 50 seeds: pooled observed/expected ratio near 1.
  double ratio_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SynthSpec s;
    s.seed = seed;
    const auto d = generate_dataset(s);
    double obs = 0.0, exp_total = 0.0, pop = 0.0, weighted = 0.0;
    for (std::size_t r = 0; r < d.regions.size(); ++r) {
      obs += d.observed[r];
      exp_total += d.expected[r];
    }
    for (std::size_t c = 0; c < d.population.size(); ++c) {
      pop += d.population.values[c];
      weighted += d.true_rate.values[c] * d.population.values[c];
    }
    CHECK(exp_total == doctest::Approx(weighted).epsilon(1e-12));
    ratio_sum += obs / exp_total;
    const double incidence = obs / pop;
    CHECK(incidence > std::exp(-3.0) * 0.9);
    CHECK(incidence < std::exp(-3.0) * 1.3);
  }
  CHECK(std::abs(ratio_sum / 50.0 - 1.0) < 0.005);
}

TEST_CASE("generator: invalid specs") {
  SynthSpec s = small(1);
  s.n_regions = 0;
  CHECK_THROWS_AS(generate_dataset(s), ValidationError);
  s = small(1);
  s.beta.clear();
  CHECK_THROWS_AS(generate_dataset(s), ValidationError);
  s = small(1);
  s.pop_hi = 1.0;
  CHECK_THROWS_AS(generate_dataset(s), ValidationError);
}

TEST_CASE("writer produces readable files") {
  support::TempDir dir("synth");
  const auto d = generate_dataset(small(8));
  const auto files = write_dataset(dir.path(), d);
  for (const auto& f : files) CHECK(std::filesystem::exists(f));
  const auto stack = grid::read_covariate_dir(dir.path() / "covariates");
  CHECK(stack.layers() == d.covariates.layers());
  const auto regions = grid::read_region_file(dir.path() / "regions.geojson", "id", "response");
  CHECK(regions.size() == 25);
  CHECK(regions.regions[3].response == d.observed[3]);
  CHECK(grid::rasterize_regions(regions, d.population) == d.mask);
  std::ifstream truth(dir.path() / "truth.csv");
  std::string line;
  std::getline(truth, line);
  CHECK(line == "region_id,expected_count,observed_count");
}

TEST_CASE("newton oracle: hand-solved two-point problem") {
  // Saturated: exp(b0 + b1 x_i) * pop_i = y_i.
  const auto d = pad_raw({{1.0}, {-1.0}}, {100.0, 50.0}, {30.0, 5.0});
  const auto fit = oracle_newton_fit(d);
  const double l1 = std::log(30.0 / 100.0), l2 = std::log(5.0 / 50.0);
  CHECK(fit.beta[1] == doctest::Approx((l1 - l2) / 2.0).epsilon(1e-10));
  CHECK(fit.beta[0] == doctest::Approx((l1 + l2) / 2.0).epsilon(1e-10));
}

TEST_CASE("newton oracle matches textbook IRLS on single-pixel regions") {
  RngStream rng(2);
  std::vector<std::vector<double>> xs, rows;
  std::vector<double> pops, y, offset;
  for (int i = 0; i < 60; ++i) {
    const double a = rng.normal(), b = rng.normal();
    const double p = 100.0 + 900.0 * rng.uniform();
    xs.push_back({a, b});
    rows.push_back({1.0, a, b});
    pops.push_back(p);
    offset.push_back(std::log(p));
    y.push_back(static_cast<double>(rng.poisson(p * std::exp(-2.0 + 0.3 * a - 0.1 * b))));
  }
  const auto fit = oracle_newton_fit(pad_raw(xs, pops, y));
  const auto irls = support::poisson_glm_irls(rows, y, offset);
  for (std::size_t i = 0; i < 3; ++i) CHECK(fit.beta[i] == doctest::Approx(irls[i]).epsilon(1e-9));
}

TEST_CASE("newton oracle: closure on noise-free counts") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthSpec s;
    s.seed = seed;
    const auto d = generate_dataset(s);
    const auto fit = oracle_newton_fit(prep::make_padded(to_region_data(d, true)));
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(fit.beta[i] - s.beta[i]) < 1e-6);
  }
}

TEST_CASE("newton oracle: sampling error on 200 regions") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SynthSpec s;
    s.n_regions = 200;
    s.seed = 300 + seed;
    const auto d = generate_dataset(s);
    const auto fit = oracle_newton_fit(prep::make_padded(to_region_data(d)));
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(fit.beta[i] - s.beta[i]) < 0.05);
  }
}

TEST_CASE("newton oracle: degenerate likelihoods are reported") {
  const auto zeros = pad_raw({{1.0}, {-1.0}, {0.5}}, {10, 10, 10}, {0, 0, 0});
  CHECK_THROWS_AS(oracle_newton_fit(zeros, 30), NumericError);
  const auto collinear = pad_raw({{1.0, 1.0}, {2.0, 2.0}, {3.0, 3.0}}, {10, 10, 10}, {1, 2, 3});
  CHECK_THROWS_WITH_AS(oracle_newton_fit(collinear), doctest::Contains("condition estimate"),
                       NumericError);
}

TEST_CASE("finite differences: closed forms") {
  const std::vector<double> three{3.0};
  const auto q = finite_diff_gradient([](std::span<const double> t) { return t[0] * t[0]; }, three);
  CHECK(std::abs(q[0] - 6.0) < 1e-8);
  const std::vector<double> zero{0.0};
  const auto l = finite_diff_gradient([](std::span<const double> t) { return 5.0 * t[0]; }, zero);
  CHECK(std::abs(l[0] - 5.0) < 1e-10);
  CHECK_THROWS_AS(finite_diff_gradient([](std::span<const double>) { return NAN; }, zero),
                  NumericError);
}
