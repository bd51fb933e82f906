#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

#include <unistd.h>

#include <Eigen/Dense>

namespace support {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("disagg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

disagg::grid::Raster make_raster(std::size_t nrows, std::size_t ncols, std::vector<double> values,
                                 double cellsize, double xll, double yll) {
  disagg::grid::Raster r;
  r.nrows = nrows;
  r.ncols = ncols;
  r.cellsize = cellsize;
  r.xll = xll;
  r.yll = yll;
  r.values = std::move(values);
  if (r.values.empty()) r.values.assign(nrows * ncols, 0.0);
  return r;
}

disagg::grid::Ring rect(double x0, double y0, double x1, double y1) {
  return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}};
}

disagg::prep::RegionData random_region_data(disagg::RngStream& rng, std::size_t n_regions,
                                            std::size_t max_pixels, std::size_t n_cov,
                                            double pop_lo, double pop_hi) {
  disagg::prep::RegionData data;
  std::size_t next_pixel = 0;
  for (std::size_t c = 0; c < n_cov; ++c) data.covariate_names.push_back("c" + std::to_string(c));
  for (std::size_t r = 0; r < n_regions; ++r) {
    disagg::prep::PixelTable t;
    t.region_index = r;
    const std::size_t n = 1 + static_cast<std::size_t>(rng.below(max_pixels));
    t.covariates = disagg::Matrix(n, n_cov);
    t.xy = disagg::Matrix(n, 2);
    double pop_total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      t.pixels.push_back(next_pixel++);
      for (std::size_t c = 0; c < n_cov; ++c) t.covariates(p, c) = rng.normal();
      t.xy(p, 0) = 10.0 * rng.uniform();
      t.xy(p, 1) = 10.0 * rng.uniform();
      t.population.push_back(pop_lo + (pop_hi - pop_lo) * rng.uniform());
      pop_total += t.population.back();
    }
    data.tables.push_back(std::move(t));
    data.responses.push_back(static_cast<double>(rng.poisson(0.05 * pop_total)));
    data.region_ids.push_back("r" + std::to_string(r));
  }
  return data;
}

std::vector<double> poisson_glm_irls(const std::vector<std::vector<double>>& x,
                                     const std::vector<double>& y,
                                     const std::vector<double>& offset) {
  const auto n = static_cast<Eigen::Index>(x.size());
  const auto d = static_cast<Eigen::Index>(x.front().size());
  Eigen::MatrixXd X(n, d);
  Eigen::VectorXd Y(n), off(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) X(i, j) = x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    Y(i) = y[static_cast<std::size_t>(i)];
    off(i) = offset[static_cast<std::size_t>(i)];
  }
  // Standard start: mu = y + 0.1.
  Eigen::VectorXd mu = Y.array() + 0.1;
  Eigen::VectorXd eta = mu.array().log();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d);
  for (int it = 0; it < 200; ++it) {
    const Eigen::VectorXd z = (eta - off).array() + (Y - mu).array() / mu.array();
    const Eigen::MatrixXd xtw = X.transpose() * mu.asDiagonal();
    const Eigen::VectorXd next = (xtw * X).ldlt().solve(xtw * z);
    const double change = (next - beta).cwiseAbs().maxCoeff();
    beta = next;
    eta = X * beta + off;
    mu = eta.array().exp();
    if (change < 1e-12) break;
  }
  return {beta.data(), beta.data() + d};
}

std::vector<double> flat_params(const disagg::model::DisaggModel& m) {
  std::vector<double> theta = m.params_cov.values;
  if (m.params_xy) theta.insert(theta.end(), m.params_xy->values.begin(), m.params_xy->values.end());
  return theta;
}

void set_flat_params(disagg::model::DisaggModel& m, const std::vector<double>& theta) {
  const std::size_t n = m.params_cov.size();
  if (theta.size() != n + (m.params_xy ? m.params_xy->size() : 0)) {
    throw std::invalid_argument("parameter vector has the wrong length");
  }
  std::copy(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(n), m.params_cov.values.begin());
  if (m.params_xy) {
    std::copy(theta.begin() + static_cast<std::ptrdiff_t>(n), theta.end(), m.params_xy->values.begin());
  }
}

bool close(double a, double b, double rel, double abs_floor) {
  return std::abs(a - b) <= std::max(abs_floor, rel * std::max(std::abs(a), std::abs(b)));
}

}  // namespace support
