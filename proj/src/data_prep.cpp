#include "disagg/data_prep.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "disagg/error.hpp"
#include "disagg/serialize.hpp"

namespace disagg::prep {
namespace {

using nlohmann::json;

struct ChannelStats {
  double sum = 0.0;
  double sq = 0.0;
  std::size_t n = 0;
};

void write_f64(const std::filesystem::path& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    out.write(bytes, 8);
  }
}

std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<double> values(expected);
  for (auto& v : values) {
    char bytes[8];
    if (!in.read(bytes, 8)) {
      throw ValidationError("'" + path.string() + "' is shorter than its declared shape");
    }
    std::uint64_t bits = 0;
    std::memcpy(&bits, bytes, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    v = std::bit_cast<double>(bits);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ValidationError("'" + path.string() + "' is longer than its declared shape");
  }
  return values;
}

}  // namespace

RegionData RegionData::subset(const std::vector<std::size_t>& indices) const {
  RegionData out;
  out.covariate_names = covariate_names;
  for (auto i : indices) {
    out.tables.push_back(tables.at(i));
    out.responses.push_back(responses.at(i));
    out.region_ids.push_back(region_ids.at(i));
  }
  return out;
}

void PaddedDataset::validate() const {
  if (covariates.size() != n_regions * pmax * n_channels || population.size() != n_regions * pmax ||
      xy.size() != n_regions * pmax * 2 || response.size() != n_regions ||
      true_lengths.size() != n_regions || region_ids.size() != n_regions) {
    throw ValidationError("padded dataset tensors disagree with declared shape");
  }
  for (std::size_t r = 0; r < n_regions; ++r) {
    if (true_lengths[r] > pmax) throw ValidationError("true length exceeds Pmax");
    if (!(response[r] >= 0.0)) throw ValidationError("negative response");
    for (std::size_t p = true_lengths[r]; p < pmax; ++p) {
      if (pop(r, p) != 0.0 || coord(r, p, 0) != 0.0 || coord(r, p, 1) != 0.0) {
        throw ValidationError("non-zero padding in region " + std::to_string(r));
      }
      for (std::size_t c = 0; c < n_channels; ++c) {
        if (cov(r, p, c) != 0.0) {
          throw ValidationError("non-zero padding in region " + std::to_string(r));
        }
      }
    }
  }
}

PixelTables build_pixel_tables(const grid::RasterStack& stack, const grid::Raster& population,
                               const grid::RegionMask& mask) {
  if (stack.empty()) throw ValidationError("covariate stack is empty");
  population.validate();
  const auto alignment = grid::check_alignment(stack, population);
  if (!alignment.aligned()) {
    std::string what = "covariates and population are not aligned:";
    for (const auto& m : alignment.mismatches) what += " " + m;
    throw ValidationError(what);
  }
  if (mask.nrows() != population.nrows || mask.ncols() != population.ncols) {
    throw ValidationError("region mask shape differs from the raster geometry");
  }

  const std::size_t n_cov = stack.size();
  std::vector<std::vector<std::size_t>> members(mask.n_regions());
  for (std::size_t cell = 0; cell < mask.size(); ++cell) {
    auto region = mask.region_of(cell);
    if (!region) continue;
    if (population.is_nodata(cell) || population.values[cell] < 0.0) continue;
    bool usable = true;
    for (std::size_t c = 0; c < n_cov && usable; ++c) usable = !stack.layer(c).is_nodata(cell);
    if (usable) members[*region].push_back(cell);
  }

  PixelTables out;
  for (std::size_t r = 0; r < members.size(); ++r) {
    const auto& cells = members[r];
    if (cells.empty()) {
      out.empty_regions.push_back(r);
      continue;
    }
    PixelTable t;
    t.region_index = r;
    t.pixels = cells;
    t.covariates = Matrix(cells.size(), n_cov);
    t.xy = Matrix(cells.size(), 2);
    t.population.resize(cells.size());
    for (std::size_t p = 0; p < cells.size(); ++p) {
      for (std::size_t c = 0; c < n_cov; ++c) t.covariates(p, c) = stack.layer(c).values[cells[p]];
      t.population[p] = population.values[cells[p]];
      const auto [x, y] = population.cell_center(cells[p]);
      t.xy(p, 0) = x;
      t.xy(p, 1) = y;
    }
    out.tables.push_back(std::move(t));
  }
  if (out.tables.empty()) throw ValidationError("no usable pixels");
  return out;
}

RegionData prepare_region_data(const grid::RasterStack& stack, const grid::Raster& population,
                               const grid::RegionSet& regions, const grid::RegionMask& mask) {
  if (mask.n_regions() != regions.size()) {
    throw ValidationError("region mask was built from a different region set");
  }
  auto built = build_pixel_tables(stack, population, mask);
  RegionData data;
  data.covariate_names = stack.names();
  for (auto& t : built.tables) {
    const auto& region = regions.regions[t.region_index];
    data.responses.push_back(region.response);
    data.region_ids.push_back(region.id);
    data.tables.push_back(std::move(t));
  }
  return data;
}

std::pair<std::vector<PixelTable>, NormalizationParams> fit_apply_normalization(
    const std::vector<PixelTable>& tables, const std::optional<NormalizationParams>& existing) {
  if (tables.empty()) throw ValidationError("cannot normalize an empty table set");
  const std::size_t n_cov = tables.front().covariates.cols();

  NormalizationParams params;
  if (existing) {
    params = *existing;
    if (params.cov_mean.size() != n_cov || params.cov_sd.size() != n_cov ||
        params.xy_mean.size() != 2 || params.xy_sd.size() != 2) {
      throw ValidationError("normalization parameters do not match the channel count");
    }
  } else {
    std::vector<ChannelStats> cov(n_cov), xy(2);
    for (const auto& t : tables) {
      if (t.covariates.cols() != n_cov) throw ValidationError("tables disagree on channel count");
      for (std::size_t p = 0; p < t.size(); ++p) {
        for (std::size_t c = 0; c < n_cov; ++c) cov[c].sum += t.covariates(p, c);
        for (std::size_t a = 0; a < 2; ++a) xy[a].sum += t.xy(p, a);
      }
      for (auto& s : cov) s.n += t.size();
      for (auto& s : xy) s.n += t.size();
    }
    auto means = [](const std::vector<ChannelStats>& stats) {
      std::vector<double> m;
      for (const auto& s : stats) m.push_back(s.sum / static_cast<double>(s.n));
      return m;
    };
    params.cov_mean = means(cov);
    params.xy_mean = means(xy);
    for (const auto& t : tables) {
      for (std::size_t p = 0; p < t.size(); ++p) {
        for (std::size_t c = 0; c < n_cov; ++c) {
          const double d = t.covariates(p, c) - params.cov_mean[c];
          cov[c].sq += d * d;
        }
        for (std::size_t a = 0; a < 2; ++a) {
          const double d = t.xy(p, a) - params.xy_mean[a];
          xy[a].sq += d * d;
        }
      }
    }
    for (const auto& s : cov) params.cov_sd.push_back(std::sqrt(s.sq / static_cast<double>(s.n)));
    for (const auto& s : xy) params.xy_sd.push_back(std::sqrt(s.sq / static_cast<double>(s.n)));
  }

  std::vector<PixelTable> out = tables;
  for (auto& t : out) {
    for (std::size_t p = 0; p < t.size(); ++p) {
      for (std::size_t c = 0; c < n_cov; ++c) {
        t.covariates(p, c) = normalize_value(t.covariates(p, c), params.cov_mean[c], params.cov_sd[c]);
      }
      for (std::size_t a = 0; a < 2; ++a) {
        t.xy(p, a) = normalize_value(t.xy(p, a), params.xy_mean[a], params.xy_sd[a]);
      }
    }
  }
  return {std::move(out), std::move(params)};
}

PaddedDataset pad_dataset(const std::vector<PixelTable>& tables,
                          const std::vector<double>& responses,
                          std::vector<std::string> region_ids, NormalizationParams norm,
                          std::vector<std::string> covariate_names) {
  if (tables.size() != responses.size()) {
    throw ValidationError("length mismatch: " + std::to_string(tables.size()) + " tables, " +
                          std::to_string(responses.size()) + " responses");
  }
  if (tables.empty()) throw ValidationError("cannot pad an empty table set");
  if (region_ids.empty()) {
    for (const auto& t : tables) region_ids.push_back(std::to_string(t.region_index));
  } else if (region_ids.size() != tables.size()) {
    throw ValidationError("length mismatch between tables and region ids");
  }

  PaddedDataset d;
  d.n_regions = tables.size();
  d.n_channels = tables.front().covariates.cols();
  for (const auto& t : tables) {
    if (t.covariates.cols() != d.n_channels) throw ValidationError("tables disagree on channel count");
    d.pmax = std::max(d.pmax, t.size());
    d.true_lengths.push_back(t.size());
  }
  d.covariates.assign(d.n_regions * d.pmax * d.n_channels, 0.0);
  d.population.assign(d.n_regions * d.pmax, 0.0);
  d.xy.assign(d.n_regions * d.pmax * 2, 0.0);
  for (std::size_t r = 0; r < d.n_regions; ++r) {
    const auto& t = tables[r];
    if (!(responses[r] >= 0.0)) throw ValidationError("responses must be non-negative");
    for (std::size_t p = 0; p < t.size(); ++p) {
      const std::size_t slot = r * d.pmax + p;
      for (std::size_t c = 0; c < d.n_channels; ++c) {
        d.covariates[slot * d.n_channels + c] = t.covariates(p, c);
      }
      d.population[slot] = t.population[p];
      d.xy[slot * 2] = t.xy(p, 0);
      d.xy[slot * 2 + 1] = t.xy(p, 1);
    }
  }
  d.response = responses;
  d.region_ids = std::move(region_ids);
  d.norm = std::move(norm);
  d.covariate_names = std::move(covariate_names);
  return d;
}

PaddedDataset make_padded(const RegionData& data, const std::optional<NormalizationParams>& norm) {
  auto [tables, params] = fit_apply_normalization(data.tables, norm);
  return pad_dataset(tables, data.responses, data.region_ids, std::move(params),
                     data.covariate_names);
}

PredictionChunks chunk_full_grid(const grid::RasterStack& stack, const grid::Raster* population,
                                 const NormalizationParams& norm, std::size_t pmax) {
  if (stack.empty()) throw ValidationError("covariate stack is empty");
  if (pmax == 0) throw ValidationError("Pmax must be positive");
  const std::size_t n_cov = stack.size();
  if (norm.cov_mean.size() != n_cov || norm.cov_sd.size() != n_cov) {
    throw ValidationError("channel count mismatch: model expects " +
                          std::to_string(norm.cov_mean.size()) + " covariates, stack has " +
                          std::to_string(n_cov));
  }
  const grid::Raster& ref = stack.layer(0);
  if (population != nullptr && !population->same_geometry(ref)) {
    throw ValidationError("population raster is not aligned with the covariates");
  }

  PredictionChunks out;
  out.pmax = pmax;
  out.n_channels = n_cov;
  for (std::size_t cell = 0; cell < ref.size(); ++cell) {
    bool usable = true;
    for (std::size_t c = 0; c < n_cov && usable; ++c) usable = !stack.layer(c).is_nodata(cell);
    if (usable) out.usable_cells.push_back(cell);
  }
  const std::size_t n = out.usable_cells.size();
  out.n_chunks = (n + pmax - 1) / pmax;
  const std::size_t slots = out.n_chunks * pmax;
  out.covariates.assign(slots * n_cov, 0.0);
  out.xy.assign(slots * 2, 0.0);
  out.population.assign(slots, 0.0);
  out.placement.assign(slots, PredictionChunks::kPadding);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t cell = out.usable_cells[s];
    out.placement[s] = static_cast<std::ptrdiff_t>(cell);
    for (std::size_t c = 0; c < n_cov; ++c) {
      out.covariates[s * n_cov + c] =
          normalize_value(stack.layer(c).values[cell], norm.cov_mean[c], norm.cov_sd[c]);
    }
    const auto [x, y] = ref.cell_center(cell);
    out.xy[s * 2] = normalize_value(x, norm.xy_mean[0], norm.xy_sd[0]);
    out.xy[s * 2 + 1] = normalize_value(y, norm.xy_mean[1], norm.xy_sd[1]);
    if (population != nullptr && !population->is_nodata(cell)) {
      out.population[s] = population->values[cell];
    }
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const PaddedDataset& data) {
  data.validate();
  std::filesystem::create_directories(dir);
  write_f64(dir / "covariates.f64", data.covariates);
  write_f64(dir / "population.f64", data.population);
  write_f64(dir / "xy.f64", data.xy);
  write_f64(dir / "response.f64", data.response);
  json sidecar = {
      {"format", "disagg-padded-dataset"},
      {"byte_order", "little"},
      {"dtype", "float64"},
      {"shapes",
       {{"covariates", {data.n_regions, data.pmax, data.n_channels}},
        {"population", {data.n_regions, data.pmax}},
        {"xy", {data.n_regions, data.pmax, 2}},
        {"response", {data.n_regions}}}},
      {"region_ids", data.region_ids},
      {"true_lengths", data.true_lengths},
      {"covariate_names", data.covariate_names},
      {"normalization", data.norm}};
  std::ofstream out(dir / "dataset.json");
  if (!out) throw Error("cannot write dataset sidecar in '" + dir.string() + "'");
  out << sidecar.dump(2) << '\n';
}

PaddedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw Error("cannot open '" + (dir / "dataset.json").string() + "'");
  json sidecar;
  try {
    sidecar = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(std::string("dataset sidecar: ") + e.what());
  }
  PaddedDataset d;
  try {
    const auto& shape = sidecar.at("shapes").at("covariates");
    d.n_regions = shape.at(0).get<std::size_t>();
    d.pmax = shape.at(1).get<std::size_t>();
    d.n_channels = shape.at(2).get<std::size_t>();
    d.region_ids = sidecar.at("region_ids").get<std::vector<std::string>>();
    d.true_lengths = sidecar.at("true_lengths").get<std::vector<std::size_t>>();
    d.covariate_names = sidecar.value("covariate_names", std::vector<std::string>{});
    d.norm = sidecar.at("normalization").get<NormalizationParams>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("dataset sidecar: ") + e.what());
  }
  d.covariates = read_f64(dir / "covariates.f64", d.n_regions * d.pmax * d.n_channels);
  d.population = read_f64(dir / "population.f64", d.n_regions * d.pmax);
  d.xy = read_f64(dir / "xy.f64", d.n_regions * d.pmax * 2);
  d.response = read_f64(dir / "response.f64", d.n_regions);
  d.validate();
  return d;
}

}  // namespace disagg::prep
