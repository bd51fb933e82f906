#include "disagg/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "disagg/data_prep.hpp"
#include "disagg/error.hpp"
#include "parallel.hpp"
#include "text.hpp"

namespace disagg::unc {

SampleStack mc_dropout_predict(const model::DisaggModel& model, const grid::RasterStack& stack,
                               std::size_t n_samples, std::uint64_t seed, std::size_t jobs,
                               Scale scale, const grid::Raster* population) {
  if (n_samples < 1) throw ValidationError("number of samples must be at least 1");
  if (stack.size() != model.spec.n_covariates()) {
    throw ValidationError("channel count mismatch: model has " +
                          std::to_string(model.spec.n_covariates()) + " covariates, stack has " +
                          std::to_string(stack.size()));
  }
  const grid::RasterStack ordered = stack.select(model.spec.covariate_names);
  const grid::Raster& ref = ordered.layer(0);
  if (scale == Scale::count) {
    if (population == nullptr) throw ValidationError("count scale needs a population raster");
    if (!population->same_geometry(ref)) {
      throw ValidationError("population raster is not aligned with the covariates");
    }
  }
  const std::size_t pmax = model.spec.pmax > 0 ? model.spec.pmax : 1;
  const auto chunks = prep::chunk_full_grid(ordered, nullptr, model.norm, pmax);

  SampleStack out;
  out.seed = seed;
  out.scale = scale;
  out.reference = grid::Raster::filled_like(ref, ref.nodata);
  std::vector<std::size_t> slots;
  for (std::size_t s = 0; s < chunks.n_slots(); ++s) {
    const auto cell = chunks.placement[s];
    if (cell == prep::PredictionChunks::kPadding) continue;
    const auto c = static_cast<std::size_t>(cell);
    if (scale == Scale::count && population->is_nodata(c)) continue;
    slots.push_back(s);
    out.cells.push_back(c);
  }
  out.values = Matrix(n_samples, out.cells.size());

  detail::parallel_for(n_samples, jobs, [&](std::size_t s) {
    RngStream rng(seed ^ static_cast<std::uint64_t>(s));
    const auto rates = model::predict_chunks(model, chunks, nn::Mode::mc_infer, &rng);
    auto row = out.values.row(s);
    for (std::size_t j = 0; j < slots.size(); ++j) {
      double v = rates[slots[j]];
      if (scale == Scale::count) v *= population->values[out.cells[j]];
      row[j] = v;
    }
  });
  return out;
}

UncertaintySummary summarize_samples(const SampleStack& samples) {
  const std::size_t n = samples.n_samples();
  if (n < 1) throw ValidationError("sample stack is empty");
  const grid::Raster& ref = samples.reference;
  const double nodata = ref.nodata;
  UncertaintySummary s{grid::Raster::filled_like(ref, nodata), grid::Raster::filled_like(ref, nodata),
                       grid::Raster::filled_like(ref, nodata), grid::Raster::filled_like(ref, nodata),
                       grid::Raster::filled_like(ref, nodata), grid::Raster::filled_like(ref, nodata),
                       grid::Raster::filled_like(ref, nodata), n >= 2};
  std::vector<double> column(n);
  for (std::size_t j = 0; j < samples.n_pixels(); ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = samples.values(i, j);
    double sum = 0.0;
    for (double v : column) sum += v;
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (double v : column) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    std::sort(column.begin(), column.end());
    const double median =
        n % 2 == 1 ? column[n / 2] : 0.5 * (column[n / 2 - 1] + column[n / 2]);

    const std::size_t cell = samples.cells[j];
    s.mean.values[cell] = mean;
    s.median.values[cell] = median;
    s.min.values[cell] = column.front();
    s.max.values[cell] = column.back();
    if (s.spread_defined) {
      s.sd.values[cell] = sd;
      s.lower95.values[cell] = mean - 1.96 * sd;
      s.upper95.values[cell] = mean + 1.96 * sd;
    }
  }
  return s;
}

std::vector<std::filesystem::path> write_summary_rasters(const std::filesystem::path& dir,
                                                         const UncertaintySummary& summary) {
  const std::pair<const char*, const grid::Raster*> items[] = {
      {"mean.asc", &summary.mean},       {"median.asc", &summary.median},
      {"sd.asc", &summary.sd},           {"min.asc", &summary.min},
      {"max.asc", &summary.max},         {"lower95.asc", &summary.lower95},
      {"upper95.asc", &summary.upper95}};
  std::vector<std::filesystem::path> written;
  for (const auto& [name, raster] : items) {
    written.push_back(dir / name);
    grid::write_ascii_grid(written.back(), *raster);
  }
  return written;
}

std::vector<std::size_t> pick_pixels(const SampleStack& samples, std::size_t n_pixels,
                                     std::uint64_t seed) {
  std::vector<std::size_t> idx(samples.n_pixels());
  for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
  RngStream rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(std::min(n_pixels, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<NormalityRow> normality_report(const SampleStack& samples, std::size_t n_pixels,
                                           std::uint64_t seed) {
  const std::size_t n = samples.n_samples();
  std::vector<NormalityRow> rows;
  for (std::size_t j : pick_pixels(samples, n_pixels, seed)) {
    NormalityRow r;
    const std::size_t cell = samples.cells[j];
    r.row = cell / samples.reference.ncols;
    r.col = cell % samples.reference.ncols;
    for (std::size_t i = 0; i < n; ++i) r.mean += samples.values(i, j);
    r.mean /= static_cast<double>(n);
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = samples.values(i, j) - r.mean;
      m2 += d * d;
      m3 += d * d * d;
      m4 += d * d * d * d;
    }
    m2 /= static_cast<double>(n);
    m3 /= static_cast<double>(n);
    m4 /= static_cast<double>(n);
    r.sd = std::sqrt(m2);
    if (m2 > 0.0) {
      r.skewness = m3 / std::pow(m2, 1.5);
      r.excess_kurtosis = m4 / (m2 * m2) - 3.0;
    } else {
      r.skewness = r.excess_kurtosis = std::nan("");
    }
    rows.push_back(r);
  }
  return rows;
}

void write_normality_csv(std::ostream& out, const std::vector<NormalityRow>& rows) {
  out << "pixel_row,pixel_col,mean,sd,skewness,excess_kurtosis\n";
  for (const auto& r : rows) {
    out << r.row << ',' << r.col << ',' << detail::fmt_double(r.mean) << ','
        << detail::fmt_double(r.sd) << ',' << detail::fmt_double(r.skewness) << ','
        << detail::fmt_double(r.excess_kurtosis) << '\n';
  }
}

void write_samples_csv(std::ostream& out, const SampleStack& samples,
                       const std::vector<std::size_t>& columns) {
  out << "pixel_row,pixel_col,sample_index,rate\n";
  for (std::size_t j : columns) {
    if (j >= samples.n_pixels()) throw ValidationError("sample column out of range");
    const std::size_t cell = samples.cells[j];
    for (std::size_t i = 0; i < samples.n_samples(); ++i) {
      out << cell / samples.reference.ncols << ',' << cell % samples.reference.ncols << ',' << i
          << ',' << detail::fmt_double(samples.values(i, j)) << '\n';
    }
  }
}

}  // namespace disagg::unc
