#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace disagg::grid {

/// Georeferenced pixel grid. Row 0 is the northernmost row.
struct Raster {
  std::size_t ncols = 0;
  std::size_t nrows = 0;
  double xll = 0.0;
  double yll = 0.0;
  double cellsize = 1.0;
  double nodata = -9999.0;
  std::vector<double> values;

  /// Raster with the geometry of `like`, every cell set to `fill`.
  static Raster filled_like(const Raster& like, double fill);

  std::size_t size() const noexcept { return values.size(); }
  std::size_t index(std::size_t row, std::size_t col) const noexcept { return row * ncols + col; }
  double at(std::size_t row, std::size_t col) const { return values[index(row, col)]; }
  double& at(std::size_t row, std::size_t col) { return values[index(row, col)]; }

  /// True when the cell holds the nodata sentinel or a non-finite value.
  bool is_nodata(std::size_t cell) const noexcept;

  std::pair<double, double> cell_center(std::size_t row, std::size_t col) const noexcept;
  std::pair<double, double> cell_center(std::size_t cell) const noexcept {
    return cell_center(cell / ncols, cell % ncols);
  }
  /// Inverse of cell_center: the cell containing (x, y), if any.
  std::optional<std::size_t> cell_at(double x, double y) const noexcept;

  bool same_geometry(const Raster& other) const noexcept;

  /// Throws ValidationError when the structural invariants do not hold.
  void validate() const;

  friend bool operator==(const Raster&, const Raster&) = default;
};

/// Named covariate layers sharing one geometry.
class RasterStack {
 public:
  RasterStack() = default;

  /// Appends a layer; its geometry must match the existing layers and its name must be new.
  void add(std::string name, Raster layer);

  std::size_t size() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Raster>& layers() const noexcept { return layers_; }
  const Raster& layer(std::size_t i) const { return layers_.at(i); }
  std::optional<std::size_t> find(std::string_view name) const noexcept;

  /// New stack with layers reordered to `order`. Throws if a name is unknown.
  RasterStack select(const std::vector<std::string>& order) const;

 private:
  std::vector<std::string> names_;
  std::vector<Raster> layers_;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

using Ring = std::vector<Point>;

struct Region {
  std::string id;
  double response = 0.0;
  std::vector<Ring> rings;
};

struct RegionSet {
  std::vector<Region> regions;

  std::size_t size() const noexcept { return regions.size(); }
  void validate() const;
};

/// Per-cell region assignment on a reference grid.
class RegionMask {
 public:
  static constexpr std::int32_t kNone = -1;

  RegionMask() = default;
  RegionMask(std::size_t nrows, std::size_t ncols, std::size_t n_regions);

  std::size_t nrows() const noexcept { return nrows_; }
  std::size_t ncols() const noexcept { return ncols_; }
  std::size_t n_regions() const noexcept { return n_regions_; }
  std::size_t size() const noexcept { return cells_.size(); }

  std::optional<std::size_t> region_of(std::size_t cell) const noexcept {
    const auto v = cells_[cell];
    if (v == kNone) return std::nullopt;
    return static_cast<std::size_t>(v);
  }
  void assign(std::size_t cell, std::optional<std::size_t> region);

  std::vector<std::size_t> pixel_counts() const;
  std::size_t assigned_count() const noexcept;

  friend bool operator==(const RegionMask&, const RegionMask&) = default;

 private:
  std::size_t nrows_ = 0;
  std::size_t ncols_ = 0;
  std::size_t n_regions_ = 0;
  std::vector<std::int32_t> cells_;
};

struct AlignmentReport {
  /// Attribute names that differ: ncols, nrows, xll, yll, cellsize.
  std::vector<std::string> mismatches;
  /// Human-readable detail per mismatch, naming the offending layer.
  std::vector<std::string> details;

  bool aligned() const noexcept { return mismatches.empty(); }
};

Raster parse_ascii_grid(std::istream& in);
Raster read_ascii_grid(const std::filesystem::path& path);
void write_ascii_grid(std::ostream& out, const Raster& raster);
void write_ascii_grid(const std::filesystem::path& path, const Raster& raster);

/// Loads every `*.asc` file of a directory, sorted by file name; layer names are file stems.
RasterStack read_covariate_dir(const std::filesystem::path& dir);

RegionSet parse_region_file(std::string_view text, std::string_view id_field,
                            std::string_view response_field);
RegionSet read_region_file(const std::filesystem::path& path, std::string_view id_field,
                           std::string_view response_field);
void write_region_file(std::ostream& out, const RegionSet& regions, std::string_view id_field,
                       std::string_view response_field);

/// Even-odd point-in-polygon on pixel centres; a centre on an edge is inside.
/// Overlaps resolve to the earliest region.
RegionMask rasterize_regions(const RegionSet& regions, const Raster& reference);

AlignmentReport check_alignment(const RasterStack& stack, const Raster& population);

}  // namespace disagg::grid
