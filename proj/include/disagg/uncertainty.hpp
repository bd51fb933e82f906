#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "disagg/grid_io.hpp"
#include "disagg/matrix.hpp"
#include "disagg/model.hpp"

namespace disagg::unc {

enum class Scale { rate, count };

/// S x usable-pixel matrix of Monte Carlo dropout draws.
struct SampleStack {
  std::uint64_t seed = 0;
  Scale scale = Scale::rate;
  Matrix values;                   // row s = sample s, column = cells[column]
  std::vector<std::size_t> cells;  // grid cell per column, row-major ascending
  grid::Raster reference;          // output geometry, values all nodata

  std::size_t n_samples() const noexcept { return values.rows(); }
  std::size_t n_pixels() const noexcept { return values.cols(); }
  friend bool operator==(const SampleStack&, const SampleStack&) = default;
};

/// S forward passes with dropout active; sample s draws from RngStream(seed ^ s).
/// Scale::count multiplies by `population` and drops cells where it is nodata.
SampleStack mc_dropout_predict(const model::DisaggModel& model, const grid::RasterStack& stack,
                               std::size_t n_samples, std::uint64_t seed, std::size_t jobs = 1,
                               Scale scale = Scale::rate, const grid::Raster* population = nullptr);

struct UncertaintySummary {
  grid::Raster mean;
  grid::Raster median;
  grid::Raster sd;  // population sd (divide by S)
  grid::Raster min;
  grid::Raster max;
  grid::Raster lower95;  // mean - 1.96 sd
  grid::Raster upper95;  // mean + 1.96 sd
  /// False for S = 1, where sd and the bounds are written as nodata.
  bool spread_defined = true;
};

UncertaintySummary summarize_samples(const SampleStack& samples);

/// Writes mean.asc, median.asc, sd.asc, min.asc, max.asc, lower95.asc, upper95.asc.
std::vector<std::filesystem::path> write_summary_rasters(const std::filesystem::path& dir,
                                                         const UncertaintySummary& summary);

struct NormalityRow {
  std::size_t row = 0;
  std::size_t col = 0;
  double mean = 0.0;
  double sd = 0.0;
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
};

/// Moment diagnostics for `n_pixels` columns picked with a seeded draw.
std::vector<NormalityRow> normality_report(const SampleStack& samples, std::size_t n_pixels,
                                           std::uint64_t seed);
/// Column indices picked by normality_report for the same arguments.
std::vector<std::size_t> pick_pixels(const SampleStack& samples, std::size_t n_pixels,
                                     std::uint64_t seed);

void write_normality_csv(std::ostream& out, const std::vector<NormalityRow>& rows);
/// `pixel_row,pixel_col,sample_index,rate` for the given columns.
void write_samples_csv(std::ostream& out, const SampleStack& samples,
                       const std::vector<std::size_t>& columns);

}  // namespace disagg::unc
