#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "disagg/grid_io.hpp"
#include "disagg/matrix.hpp"

namespace disagg::prep {

/// Usable pixels of one region, in row-major grid order.
struct PixelTable {
  std::size_t region_index = 0;
  std::vector<std::size_t> pixels;
  Matrix covariates;  // pixels x C
  std::vector<double> population;
  Matrix xy;  // pixels x 2, pixel-centre coordinates

  std::size_t size() const noexcept { return pixels.size(); }
};

struct PixelTables {
  std::vector<PixelTable> tables;
  /// Regions left with no usable pixels after exclusions.
  std::vector<std::size_t> empty_regions;
};

/// Per-channel centring and scaling fitted on training pixels.
struct NormalizationParams {
  std::vector<double> cov_mean;
  std::vector<double> cov_sd;
  std::vector<double> xy_mean;
  std::vector<double> xy_sd;

  friend bool operator==(const NormalizationParams&, const NormalizationParams&) = default;
};

/// (x - mean) / sd, with a unit divisor when sd is zero.
inline double normalize_value(double x, double mean, double sd) noexcept {
  return (x - mean) / (sd > 0.0 ? sd : 1.0);
}

/// Raw (un-normalized) per-region training data with responses attached.
/// Cross-validation slices this and refits normalization per fold.
struct RegionData {
  std::vector<PixelTable> tables;
  std::vector<double> responses;
  std::vector<std::string> region_ids;
  std::vector<std::string> covariate_names;

  std::size_t size() const noexcept { return tables.size(); }
  RegionData subset(const std::vector<std::size_t>& indices) const;
};

/// Region-major, zero-padded tensors fed to the model.
struct PaddedDataset {
  std::size_t n_regions = 0;
  std::size_t pmax = 0;
  std::size_t n_channels = 0;
  std::vector<double> covariates;  // R x Pmax x C
  std::vector<double> population;  // R x Pmax
  std::vector<double> xy;          // R x Pmax x 2
  std::vector<double> response;
  std::vector<std::string> region_ids;
  std::vector<std::size_t> true_lengths;
  NormalizationParams norm;
  std::vector<std::string> covariate_names;

  double cov(std::size_t r, std::size_t p, std::size_t c) const {
    return covariates[(r * pmax + p) * n_channels + c];
  }
  double pop(std::size_t r, std::size_t p) const { return population[r * pmax + p]; }
  double coord(std::size_t r, std::size_t p, std::size_t axis) const {
    return xy[(r * pmax + p) * 2 + axis];
  }

  /// Throws ValidationError when shapes or padding invariants are broken.
  void validate() const;
};

/// Full-grid prediction input split into Pmax-sized chunks.
struct PredictionChunks {
  std::size_t n_chunks = 0;
  std::size_t pmax = 0;
  std::size_t n_channels = 0;
  std::vector<double> covariates;  // n_chunks x Pmax x C, normalized
  std::vector<double> xy;          // n_chunks x Pmax x 2, normalized
  std::vector<double> population;  // n_chunks x Pmax, 0 where unknown
  /// Grid cell per slot; kPadding for padded slots.
  std::vector<std::ptrdiff_t> placement;
  std::vector<std::size_t> usable_cells;

  static constexpr std::ptrdiff_t kPadding = -1;
  std::size_t n_slots() const noexcept { return placement.size(); }
};

PixelTables build_pixel_tables(const grid::RasterStack& stack, const grid::Raster& population,
                               const grid::RegionMask& mask);

/// build_pixel_tables plus responses and ids from the region set.
RegionData prepare_region_data(const grid::RasterStack& stack, const grid::Raster& population,
                               const grid::RegionSet& regions, const grid::RegionMask& mask);

/// Fits normalization over all pixels pooled across tables when `existing` is
/// absent; otherwise applies `existing` unchanged.
std::pair<std::vector<PixelTable>, NormalizationParams> fit_apply_normalization(
    const std::vector<PixelTable>& tables,
    const std::optional<NormalizationParams>& existing = std::nullopt);

PaddedDataset pad_dataset(const std::vector<PixelTable>& tables,
                          const std::vector<double>& responses,
                          std::vector<std::string> region_ids = {},
                          NormalizationParams norm = {},
                          std::vector<std::string> covariate_names = {});

/// Normalize (fitting when `norm` is absent) and pad in one step.
PaddedDataset make_padded(const RegionData& data,
                          const std::optional<NormalizationParams>& norm = std::nullopt);

PredictionChunks chunk_full_grid(const grid::RasterStack& stack,
                                 const grid::Raster* population,
                                 const NormalizationParams& norm, std::size_t pmax);

void save_dataset(const std::filesystem::path& dir, const PaddedDataset& data);
PaddedDataset load_dataset(const std::filesystem::path& dir);

}  // namespace disagg::prep
