#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "disagg/data_prep.hpp"
#include "disagg/grid_io.hpp"

namespace disagg::synth {

struct SynthSpec {
  std::size_t nrows = 40;
  std::size_t ncols = 40;
  std::size_t n_regions = 100;
  std::vector<double> beta{-3.0, 0.5, -0.25};  // intercept, then one per covariate
  double surface_amplitude = 0.0;
  double pop_lo = 500.0;
  double pop_hi = 1500.0;
  std::size_t smooth_window = 5;
  double cellsize = 1.0;
  double xll = 0.0;
  double yll = 0.0;
  std::uint64_t seed = 0;

  std::size_t n_covariates() const noexcept { return beta.empty() ? 0 : beta.size() - 1; }
  void validate() const;
};

struct SynthDataset {
  grid::RasterStack covariates;
  grid::Raster population;
  grid::RegionSet regions;  // response = observed count
  grid::RegionMask mask;
  grid::Raster true_rate;
  std::vector<double> expected;
  std::vector<double> observed;
};

SynthDataset generate_dataset(const SynthSpec& spec);

/// Region data ready for training; `use_expected` swaps the observed counts
/// for the noise-free expected counts.
prep::RegionData to_region_data(const SynthDataset& data, bool use_expected = false);

/// Writes covariates/<name>.asc, population.asc, regions.geojson (fields
/// `id`, `response`), true_rate.asc and truth.csv. Returns the written paths.
std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& dir,
                                                 const SynthDataset& data);

struct NewtonResult {
  std::vector<double> beta;  // intercept, then one per channel
  double loss = 0.0;         // Poisson loss (mean over regions) at beta
  std::size_t iterations = 0;
};

/// Maximizes the aggregated Poisson log-likelihood of a log-link model with
/// intercept plus linear covariates (xy ignored) by damped Newton steps.
NewtonResult oracle_newton_fit(const prep::PaddedDataset& data, std::size_t max_iterations = 100,
                               double tolerance = 1e-10);

using LossFunction = std::function<double(std::span<const double>)>;

/// Central differences with step h * max(1, |theta_i|).
std::vector<double> finite_diff_gradient(const LossFunction& loss, std::span<const double> params,
                                         double h = 1e-5);

}  // namespace disagg::synth
