#include "disagg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "disagg/error.hpp"
#include "disagg/rng.hpp"
#include "text.hpp"

namespace disagg::synth {
namespace {

grid::Raster blank(const SynthSpec& spec) {
  grid::Raster r;
  r.nrows = spec.nrows;
  r.ncols = spec.ncols;
  r.xll = spec.xll;
  r.yll = spec.yll;
  r.cellsize = spec.cellsize;
  r.values.assign(spec.nrows * spec.ncols, 0.0);
  return r;
}

// Moving-average smoothing over a (2h+1) window, truncated at the edges.
std::vector<double> box_smooth(const std::vector<double>& in, std::size_t nrows, std::size_t ncols,
                               std::size_t window) {
  if (window <= 1) return in;
  const auto h = static_cast<std::ptrdiff_t>(window / 2);
  const auto R = static_cast<std::ptrdiff_t>(nrows);
  const auto C = static_cast<std::ptrdiff_t>(ncols);
  std::vector<double> out(in.size());
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      double sum = 0.0;
      int n = 0;
      for (std::ptrdiff_t dr = -h; dr <= h; ++dr) {
        for (std::ptrdiff_t dc = -h; dc <= h; ++dc) {
          const auto rr = r + dr;
          const auto cc = c + dc;
          if (rr < 0 || rr >= R || cc < 0 || cc >= C) continue;
          sum += in[static_cast<std::size_t>(rr * C + cc)];
          ++n;
        }
      }
      out[static_cast<std::size_t>(r * C + c)] = sum / n;
    }
  }
  return out;
}

void standardize(std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size()));
  for (double& x : v) x = (x - mean) / (sd > 0.0 ? sd : 1.0);
}

struct Tile {
  std::size_t r0, r1, c0, c1;
};

// Near-equal rectangles: tile rows of equal height, tiles spread evenly per row.
std::vector<Tile> tiling(const SynthSpec& spec) {
  const std::size_t n = spec.n_regions;
  const double aspect = static_cast<double>(spec.nrows) / static_cast<double>(spec.ncols);
  auto tile_rows = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n) * aspect)));
  tile_rows = std::clamp<std::size_t>(tile_rows, 1, std::min(n, spec.nrows));
  const std::size_t base = n / tile_rows;
  const std::size_t extra = n % tile_rows;
  if (base + (extra > 0 ? 1 : 0) > spec.ncols) {
    throw ValidationError("cannot tile " + std::to_string(n) + " regions on a " +
                          std::to_string(spec.nrows) + "x" + std::to_string(spec.ncols) + " grid");
  }
  std::vector<Tile> tiles;
  for (std::size_t i = 0; i < tile_rows; ++i) {
    const std::size_t r0 = i * spec.nrows / tile_rows;
    const std::size_t r1 = (i + 1) * spec.nrows / tile_rows;
    const std::size_t per_row = base + (i < extra ? 1 : 0);
    for (std::size_t j = 0; j < per_row; ++j) {
      tiles.push_back({r0, r1, j * spec.ncols / per_row, (j + 1) * spec.ncols / per_row});
    }
  }
  return tiles;
}

std::string region_id(std::size_t i, std::size_t n) {
  std::string digits = std::to_string(i + 1);
  const std::size_t width = std::to_string(n).size();
  return "R" + std::string(width - digits.size(), '0') + digits;
}

}  // namespace

void SynthSpec::validate() const {
  if (nrows == 0 || ncols == 0) throw ValidationError("grid must have positive size");
  if (n_regions == 0 || n_regions > nrows * ncols) {
    throw ValidationError("n_regions must be in [1, nrows*ncols]");
  }
  if (beta.empty()) throw ValidationError("beta needs at least an intercept");
  if (!(pop_lo >= 0.0) || !(pop_hi >= pop_lo)) throw ValidationError("population range is invalid");
  if (!(cellsize > 0.0)) throw ValidationError("cellsize must be positive");
}

SynthDataset generate_dataset(const SynthSpec& spec) {
  spec.validate();
  SynthDataset out;
  const std::size_t n_cells = spec.nrows * spec.ncols;
  const std::size_t n_cov = spec.n_covariates();
  const std::size_t width = std::max<std::size_t>(2, std::to_string(n_cov).size());

  std::vector<std::vector<double>> cov(n_cov);
  for (std::size_t k = 0; k < n_cov; ++k) {
    RngStream rng(derive_seed(spec.seed, 10 + k));
    std::vector<double> noise(n_cells);
    for (double& v : noise) v = rng.normal();
    cov[k] = box_smooth(noise, spec.nrows, spec.ncols, spec.smooth_window);
    standardize(cov[k]);
    grid::Raster layer = blank(spec);
    layer.values = cov[k];
    const std::string digits = std::to_string(k + 1);
    out.covariates.add("cov" + std::string(width - digits.size(), '0') + digits, std::move(layer));
  }

  out.population = blank(spec);
  {
    RngStream rng(derive_seed(spec.seed, 1));
    for (double& v : out.population.values) v = spec.pop_lo + (spec.pop_hi - spec.pop_lo) * rng.uniform();
  }

  double phase = 0.0;
  if (spec.surface_amplitude != 0.0) {
    RngStream rng(derive_seed(spec.seed, 2));
    phase = 2.0 * std::numbers::pi * rng.uniform();
  }
  out.true_rate = blank(spec);
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    double eta = spec.beta[0];
    for (std::size_t k = 0; k < n_cov; ++k) eta += spec.beta[k + 1] * cov[k][cell];
    if (spec.surface_amplitude != 0.0) {
      const double u = (static_cast<double>(cell % spec.ncols) + 0.5) / static_cast<double>(spec.ncols);
      const double v = (static_cast<double>(cell / spec.ncols) + 0.5) / static_cast<double>(spec.nrows);
      eta += spec.surface_amplitude * std::sin(2.0 * std::numbers::pi * u + phase) *
             std::cos(2.0 * std::numbers::pi * v);
    }
    out.true_rate.values[cell] = std::exp(eta);
  }

  const auto tiles = tiling(spec);
  const double cs = spec.cellsize;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const Tile& t = tiles[i];
    const double x0 = spec.xll + static_cast<double>(t.c0) * cs;
    const double x1 = spec.xll + static_cast<double>(t.c1) * cs;
    const double y0 = spec.yll + static_cast<double>(spec.nrows - t.r1) * cs;
    const double y1 = spec.yll + static_cast<double>(spec.nrows - t.r0) * cs;
    grid::Region region;
    region.id = region_id(i, tiles.size());
    region.rings.push_back({{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}});
    out.regions.regions.push_back(std::move(region));
  }
  out.mask = grid::rasterize_regions(out.regions, out.population);

  out.expected.assign(tiles.size(), 0.0);
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    if (auto r = out.mask.region_of(cell)) {
      out.expected[*r] += out.true_rate.values[cell] * out.population.values[cell];
    }
  }
  RngStream counts(derive_seed(spec.seed, 3));
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    out.observed.push_back(static_cast<double>(counts.poisson(out.expected[i])));
    out.regions.regions[i].response = out.observed[i];
  }
  return out;
}

prep::RegionData to_region_data(const SynthDataset& data, bool use_expected) {
  auto rd = prep::prepare_region_data(data.covariates, data.population, data.regions, data.mask);
  if (use_expected) {
    for (std::size_t i = 0; i < rd.tables.size(); ++i) {
      rd.responses[i] = data.expected[rd.tables[i].region_index];
    }
  }
  return rd;
}

std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& dir,
                                                 const SynthDataset& data) {
  std::filesystem::create_directories(dir / "covariates");
  std::vector<std::filesystem::path> written;
  for (std::size_t k = 0; k < data.covariates.size(); ++k) {
    written.push_back(dir / "covariates" / (data.covariates.names()[k] + ".asc"));
    grid::write_ascii_grid(written.back(), data.covariates.layer(k));
  }
  written.push_back(dir / "population.asc");
  grid::write_ascii_grid(written.back(), data.population);
  written.push_back(dir / "true_rate.asc");
  grid::write_ascii_grid(written.back(), data.true_rate);

  written.push_back(dir / "regions.geojson");
  {
    std::ofstream out(written.back());
    if (!out) throw Error("cannot write '" + written.back().string() + "'");
    grid::write_region_file(out, data.regions, "id", "response");
  }
  written.push_back(dir / "truth.csv");
  std::ofstream truth(written.back());
  if (!truth) throw Error("cannot write '" + written.back().string() + "'");
  truth << "region_id,expected_count,observed_count\n";
  for (std::size_t i = 0; i < data.regions.size(); ++i) {
    truth << data.regions.regions[i].id << ',' << detail::fmt_double(data.expected[i]) << ','
          << detail::fmt_double(data.observed[i]) << '\n';
  }
  return written;
}

NewtonResult oracle_newton_fit(const prep::PaddedDataset& data, std::size_t max_iterations,
                               double tolerance) {
  if (data.n_regions == 0) throw ValidationError("dataset has no regions");
  const auto d = static_cast<Eigen::Index>(data.n_channels + 1);
  const auto n = static_cast<double>(data.n_regions);

  // Pixel design rows [1, x_1, ..., x_C], real pixels only.
  std::vector<Eigen::MatrixXd> design(data.n_regions);
  std::vector<Eigen::VectorXd> pop(data.n_regions);
  for (std::size_t r = 0; r < data.n_regions; ++r) {
    const auto len = static_cast<Eigen::Index>(data.true_lengths[r]);
    design[r].resize(len, d);
    pop[r].resize(len);
    for (Eigen::Index p = 0; p < len; ++p) {
      const auto pu = static_cast<std::size_t>(p);
      design[r](p, 0) = 1.0;
      for (std::size_t c = 0; c < data.n_channels; ++c) {
        design[r](p, static_cast<Eigen::Index>(c + 1)) = data.cov(r, pu, c);
      }
      pop[r](p) = data.pop(r, pu);
    }
  }

  auto loglik = [&](const Eigen::VectorXd& beta) {
    double ll = 0.0;
    for (std::size_t r = 0; r < data.n_regions; ++r) {
      const double yhat = pop[r].dot((design[r] * beta).array().exp().matrix());
      const double y = data.response[r];
      ll += (y > 0.0 ? y * std::log(std::max(yhat, 1e-300)) : 0.0) - yhat;
    }
    return ll;
  };

  double total_y = 0.0;
  double total_pop = 0.0;
  for (std::size_t r = 0; r < data.n_regions; ++r) {
    total_y += data.response[r];
    total_pop += pop[r].sum();
  }
  if (!(total_pop > 0.0)) throw ValidationError("dataset has zero total population");

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d);
  beta(0) = total_y > 0.0 ? std::log(total_y / total_pop) : 0.0;
  double ll = loglik(beta);

  for (std::size_t it = 1; it <= max_iterations; ++it) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(d, d);
    for (std::size_t r = 0; r < data.n_regions; ++r) {
      const Eigen::VectorXd w = pop[r].array() * (design[r] * beta).array().exp();
      const double yhat = w.sum();
      const Eigen::VectorXd g = design[r].transpose() * w;
      const Eigen::MatrixXd h = design[r].transpose() * w.asDiagonal() * design[r];
      const double y = data.response[r];
      const double ratio = y / yhat;
      grad += (ratio - 1.0) * g;
      hess += (ratio - 1.0) * h - (y / (yhat * yhat)) * g * g.transpose();
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(hess, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double cond = sv(0) / sv(sv.size() - 1);
    if (!std::isfinite(cond) || cond > 1e14) {
      throw NumericError("singular Hessian in Newton oracle (condition estimate " +
                         detail::fmt_double(cond) + ")");
    }
    const Eigen::VectorXd step = -svd.solve(grad);

    double t = 1.0;
    Eigen::VectorXd next = beta + step;
    double next_ll = loglik(next);
    for (int halvings = 0; !(next_ll >= ll) && halvings < 60; ++halvings) {
      t *= 0.5;
      next = beta + t * step;
      next_ll = loglik(next);
    }
    const double change = (next - beta).cwiseAbs().maxCoeff();
    beta = next;
    ll = next_ll;
    if (change < tolerance) {
      NewtonResult res;
      res.beta.assign(beta.data(), beta.data() + d);
      res.iterations = it;
      double loss = 0.0;
      for (std::size_t r = 0; r < data.n_regions; ++r) {
        const double yhat = pop[r].dot((design[r] * beta).array().exp().matrix());
        loss += yhat - data.response[r] * std::log(std::max(yhat, 1e-12));
      }
      res.loss = loss / n;
      return res;
    }
  }
  throw NumericError("Newton oracle did not converge in " + std::to_string(max_iterations) +
                     " iterations");
}

std::vector<double> finite_diff_gradient(const LossFunction& loss, std::span<const double> params,
                                         double h) {
  if (!(h > 0.0)) throw ValidationError("finite-difference step must be positive");
  std::vector<double> theta(params.begin(), params.end());
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    const double hi = h * std::max(1.0, std::abs(orig));
    theta[i] = orig + hi;
    const double up = loss(theta);
    theta[i] = orig - hi;
    const double down = loss(theta);
    theta[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite loss while probing parameter " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * hi);
  }
  return grad;
}

}  // namespace disagg::synth
