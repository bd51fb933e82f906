#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "disagg/data_prep.hpp"
#include "disagg/grid_io.hpp"
#include "disagg/model.hpp"
#include "disagg/rng.hpp"

namespace support {

class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

disagg::grid::Raster make_raster(std::size_t nrows, std::size_t ncols, std::vector<double> values,
                                 double cellsize = 1.0, double xll = 0.0, double yll = 0.0);

/// Closed counter-clockwise rectangle.
disagg::grid::Ring rect(double x0, double y0, double x1, double y1);

/// Random per-region pixel tables (covariates ~ N(0,1), uniform population,
/// Poisson responses around a 5% rate); region r has 1..max_pixels pixels.
disagg::prep::RegionData random_region_data(disagg::RngStream& rng, std::size_t n_regions,
                                            std::size_t max_pixels, std::size_t n_cov,
                                            double pop_lo = 5.0, double pop_hi = 50.0);

/// Textbook IRLS for a log-link Poisson GLM with an offset; rows of `x`
/// include the intercept column.
std::vector<double> poisson_glm_irls(const std::vector<std::vector<double>>& x,
                                     const std::vector<double>& y,
                                     const std::vector<double>& offset);

/// Both branches concatenated (covariate branch first).
std::vector<double> flat_params(const disagg::model::DisaggModel& m);
void set_flat_params(disagg::model::DisaggModel& m, const std::vector<double>& theta);

/// |a - b| <= max(abs_floor, rel * max(|a|, |b|)).
bool close(double a, double b, double rel, double abs_floor);

}  // namespace support
