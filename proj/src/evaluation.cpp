#include "disagg/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>

#include <boost/math/distributions/students_t.hpp>

#include "disagg/error.hpp"
#include "disagg/serialize.hpp"
#include "parallel.hpp"
#include "text.hpp"

namespace disagg::eval {
namespace {

using detail::fmt_double;

// Re-raises the active exception with `where` prefixed, keeping its category.
[[noreturn]] void rethrow_with_context(const std::string& where) {
  try {
    throw;
  } catch (const ValidationError& e) {
    throw ValidationError(where + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(where + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(where + ": " + e.what());
  }
}

std::vector<double> responses_of(const prep::RegionData& data,
                                 const std::vector<std::size_t>& indices) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.responses.at(i));
  return out;
}

std::vector<std::size_t> map_indices(const std::vector<std::size_t>& local,
                                     const std::vector<std::size_t>& global) {
  std::vector<std::size_t> out;
  out.reserve(local.size());
  for (auto i : local) out.push_back(global[i]);
  return out;
}

}  // namespace

std::vector<std::size_t> FoldAssignment::members(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldAssignment::complement(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != fold) out.push_back(i);
  }
  return out;
}

FoldAssignment stratified_folds(std::span<const double> responses, std::size_t k,
                                std::uint64_t seed) {
  const std::size_t n = responses.size();
  if (k < 2) throw ValidationError("k must be at least 2");
  if (k > n) {
    throw ValidationError("k = " + std::to_string(k) + " exceeds the number of regions (" +
                          std::to_string(n) + ")");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return responses[a] < responses[b]; });

  FoldAssignment folds;
  folds.k = k;
  folds.seed = seed;
  folds.labels.assign(n, 0);
  RngStream rng(seed);
  std::vector<std::size_t> perm(k);
  for (std::size_t start = 0; start < n; start += k) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(perm));
    const std::size_t m = std::min(k, n - start);
    for (std::size_t j = 0; j < m; ++j) folds.labels[order[start + j]] = perm[j];
  }
  return folds;
}

SummaryStats summarize(std::span<const double> values, CiMethod method) {
  SummaryStats s;
  s.n = values.size();
  if (s.n == 0) throw ValidationError("cannot summarize an empty sample");
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n < 2) {
    s.sd = s.ci_lower = s.ci_upper = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  double q = 1.96;
  if (method == CiMethod::student_t) {
    boost::math::students_t dist(static_cast<double>(s.n - 1));
    q = boost::math::quantile(dist, 0.975);
  }
  const double half = q * s.sd / std::sqrt(static_cast<double>(s.n));
  s.ci_lower = s.mean - half;
  s.ci_upper = s.mean + half;
  return s;
}

double fit_and_score(const prep::RegionData& data, const std::vector<std::size_t>& train,
                     const std::vector<std::size_t>& test, const model::ModelSpec& spec,
                     const model::TrainConfig& config, std::uint64_t seed) {
  if (train.empty() || test.empty()) throw ValidationError("empty train or test split");
  const auto train_set = prep::make_padded(data.subset(train));
  auto m = model::build_model(spec, train_set, derive_seed(seed, 0));
  auto cfg = config;
  cfg.seed = derive_seed(seed, 1);
  model::fit(m, train_set, cfg);
  const auto test_set = prep::make_padded(data.subset(test), m.norm);
  return model::evaluate_loss(m, test_set);
}

CVReport repeated_cross_validate(const prep::RegionData& data, const model::ModelSpec& spec,
                                 const model::TrainConfig& config, std::size_t k,
                                 std::size_t repeats, std::uint64_t seed,
                                 const EvalOptions& options) {
  if (repeats == 0) throw ValidationError("repeats must be positive");
  config.validate();
  CVReport report;
  for (std::size_t r = 0; r < repeats; ++r) {
    report.splits.push_back(stratified_folds(data.responses, k, seed + r));
  }
  report.cells.resize(repeats * k);
  detail::parallel_for(report.cells.size(), options.jobs, [&](std::size_t cell) {
    const std::size_t r = cell / k;
    const std::size_t f = cell % k;
    const auto& folds = report.splits[r];
    try {
      report.cells[cell] = {r, f,
                            fit_and_score(data, folds.complement(f), folds.members(f), spec, config,
                                          derive_seed(seed + r, f))};
    } catch (...) {
      rethrow_with_context("cv repeat " + std::to_string(r + 1) + " fold " + std::to_string(f + 1));
    }
  });
  std::vector<double> losses;
  for (const auto& c : report.cells) losses.push_back(c.loss);
  report.summary = summarize(losses, options.ci);
  return report;
}

std::uint64_t hypergrid_combinations(const HyperGridConfig& config, std::size_t depth) {
  const std::uint64_t nodes = config.max_nodes - config.min_nodes + 1;
  std::uint64_t total = config.rates.size();
  for (std::size_t d = 0; d < depth; ++d) total *= nodes;
  return total;
}

HyperGrid sample_hypergrid(const HyperGridConfig& config, const model::ModelSpec& base,
                           std::uint64_t seed) {
  if (config.min_nodes == 0 || config.max_nodes < config.min_nodes) {
    throw ValidationError("hypergrid node range is empty");
  }
  if (config.rates.empty()) throw ValidationError("hypergrid needs at least one dropout rate");
  if (config.per_depth.size() != config.max_depth) {
    throw ValidationError("hypergrid per_depth must list one count per depth");
  }
  const std::uint64_t n_nodes = config.max_nodes - config.min_nodes + 1;
  HyperGrid grid;
  for (std::size_t depth = 1; depth <= config.max_depth; ++depth) {
    const std::uint64_t total = hypergrid_combinations(config, depth);
    const std::uint64_t want = std::min<std::uint64_t>(config.per_depth[depth - 1], total);
    std::set<std::uint64_t> chosen;
    if (want == total) {
      for (std::uint64_t c = 0; c < total; ++c) chosen.insert(c);
    } else {
      // Floyd's sampling without replacement.
      RngStream rng(derive_seed(seed, depth));
      for (std::uint64_t j = total - want; j < total; ++j) {
        const std::uint64_t t = rng.below(j + 1);
        if (!chosen.insert(t).second) chosen.insert(j);
      }
    }
    for (std::uint64_t c : chosen) {
      const double rate = config.rates[c % config.rates.size()];
      std::uint64_t rest = c / config.rates.size();
      model::ModelSpec spec = base;
      spec.layers_cov.clear();
      for (std::size_t d = 0; d < depth; ++d) {
        spec.layers_cov.emplace_back(
            nn::Dense{static_cast<std::size_t>(config.min_nodes + rest % n_nodes), config.activation});
        spec.layers_cov.emplace_back(nn::Dropout{rate});
        rest /= n_nodes;
      }
      grid.candidates.push_back(std::move(spec));
    }
  }
  return grid;
}

nlohmann::json hypergrid_to_json(const HyperGrid& grid) {
  nlohmann::json candidates = nlohmann::json::array();
  for (std::size_t i = 0; i < grid.candidates.size(); ++i) {
    candidates.push_back({{"index", i}, {"spec", grid.candidates[i]}});
  }
  return {{"candidates", std::move(candidates)}};
}

HyperGrid hypergrid_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("candidates") || !j.at("candidates").is_array()) {
    throw ValidationError("hypergrid document needs a 'candidates' array");
  }
  HyperGrid grid;
  for (const auto& c : j.at("candidates")) {
    const auto index = c.at("index").get<std::size_t>();
    if (index != grid.candidates.size()) {
      throw ValidationError("hypergrid indices must be 0..n-1 in order");
    }
    grid.candidates.push_back(c.at("spec").get<model::ModelSpec>());
  }
  return grid;
}

void save_hypergrid(const std::filesystem::path& path, const HyperGrid& grid) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << hypergrid_to_json(grid).dump(2) << '\n';
}

HyperGrid load_hypergrid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open hypergrid '" + path.string() + "'");
  try {
    return hypergrid_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("hypergrid '" + path.string() + "': " + e.what());
  }
}

NCVReport nested_cross_validate(const prep::RegionData& data, const HyperGrid& grid,
                                const model::TrainConfig& config, std::size_t k_outer,
                                std::size_t k_inner, std::uint64_t seed,
                                const EvalOptions& options) {
  if (grid.candidates.empty()) throw ValidationError("hypergrid is empty");
  config.validate();
  NCVReport report;
  report.outer = stratified_folds(data.responses, k_outer, seed);
  const std::size_t n_cand = grid.candidates.size();

  std::vector<FoldAssignment> inner(k_outer);
  std::vector<std::vector<std::size_t>> outer_train(k_outer);
  report.folds.resize(k_outer);
  for (std::size_t j = 0; j < k_outer; ++j) {
    auto& fold = report.folds[j];
    fold.outer_fold = j;
    fold.test_regions = report.outer.members(j);
    outer_train[j] = report.outer.complement(j);
    inner[j] = stratified_folds(responses_of(data, outer_train[j]), k_inner, derive_seed(seed, 1 + j));
    for (std::size_t i = 0; i < k_inner; ++i) {
      fold.inner_train_regions.push_back(map_indices(inner[j].complement(i), outer_train[j]));
      fold.inner_val_regions.push_back(map_indices(inner[j].members(i), outer_train[j]));
    }
  }

  // Cell (outer j, candidate c, inner i). Every candidate in one inner split
  // shares a seed, so architectures are compared on equal footing.
  std::vector<double> inner_loss(k_outer * n_cand * k_inner);
  detail::parallel_for(inner_loss.size(), options.jobs, [&](std::size_t cell) {
    const std::size_t j = cell / (n_cand * k_inner);
    const std::size_t c = (cell / k_inner) % n_cand;
    const std::size_t i = cell % k_inner;
    const auto& fold = report.folds[j];
    try {
      inner_loss[cell] = fit_and_score(data, fold.inner_train_regions[i], fold.inner_val_regions[i],
                                       grid.candidates[c], config,
                                       derive_seed(derive_seed(seed, 1000 + j), i));
    } catch (const NumericError&) {
      if (!options.disqualify_nonfinite) {
        rethrow_with_context("ncv outer fold " + std::to_string(j + 1) + " candidate " +
                             std::to_string(c) + " inner fold " + std::to_string(i + 1));
      }
      inner_loss[cell] = std::numeric_limits<double>::infinity();
    } catch (...) {
      rethrow_with_context("ncv outer fold " + std::to_string(j + 1) + " candidate " +
                           std::to_string(c) + " inner fold " + std::to_string(i + 1));
    }
  });

  std::vector<std::size_t> param_counts(n_cand);
  for (std::size_t c = 0; c < n_cand; ++c) {
    auto spec = grid.candidates[c];
    spec.covariate_names = data.covariate_names;
    param_counts[c] = spec.param_count();
  }
  for (std::size_t j = 0; j < k_outer; ++j) {
    auto& fold = report.folds[j];
    fold.candidate_inner_loss.resize(n_cand);
    for (std::size_t c = 0; c < n_cand; ++c) {
      double sum = 0.0;
      for (std::size_t i = 0; i < k_inner; ++i) sum += inner_loss[(j * n_cand + c) * k_inner + i];
      fold.candidate_inner_loss[c] = sum / static_cast<double>(k_inner);
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < n_cand; ++c) {
      const double a = fold.candidate_inner_loss[c];
      const double b = fold.candidate_inner_loss[best];
      if (a < b || (a == b && param_counts[c] < param_counts[best])) best = c;
    }
    if (std::isinf(fold.candidate_inner_loss[best])) {
      throw NumericError("ncv outer fold " + std::to_string(j + 1) +
                         ": every candidate was disqualified by non-finite training");
    }
    fold.best_index = best;
    fold.inner_loss = fold.candidate_inner_loss[best];
  }

  detail::parallel_for(k_outer, options.jobs, [&](std::size_t j) {
    auto& fold = report.folds[j];
    try {
      fold.outer_loss = fit_and_score(data, outer_train[j], fold.test_regions,
                                      grid.candidates[fold.best_index], config,
                                      derive_seed(seed, 2000 + j));
    } catch (...) {
      rethrow_with_context("ncv outer fold " + std::to_string(j + 1) + " refit");
    }
  });

  for (const auto& f : report.folds) {
    report.mean_inner_loss += f.inner_loss;
    report.mean_outer_loss += f.outer_loss;
  }
  report.mean_inner_loss /= static_cast<double>(k_outer);
  report.mean_outer_loss /= static_cast<double>(k_outer);
  return report;
}

Metrics compute_metrics(std::span<const double> y, std::span<const double> yhat) {
  Metrics m;
  m.poisson = nn::poisson_loss(y, yhat);
  const double n = static_cast<double>(y.size());
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    abs_sum += std::abs(yhat[i] - y[i]);
    sq_sum += (yhat[i] - y[i]) * (yhat[i] - y[i]);
  }
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  if (y.size() >= 2) {
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    const double mh = std::accumulate(yhat.begin(), yhat.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      sxy += (y[i] - my) * (yhat[i] - mh);
      sxx += (y[i] - my) * (y[i] - my);
      syy += (yhat[i] - mh) * (yhat[i] - mh);
    }
    if (sxx > 0.0 && syy > 0.0) m.pearson = sxy / std::sqrt(sxx * syy);
  }
  return m;
}

TimingReport timing_benchmark(std::span<const TimingTask> tasks, std::size_t repeats,
                              CiMethod ci) {
  if (repeats < 2) throw ValidationError("timing needs at least 2 repeats");
  TimingReport report;
  std::vector<std::vector<double>> samples(tasks.size());
  for (std::size_t run = 0; run < repeats; ++run) {
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const auto start = std::chrono::steady_clock::now();
      tasks[t].run();
      const double s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      samples[t].push_back(s);
      report.rows.push_back({tasks[t].name, run, s});
    }
  }
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    report.summary.emplace_back(tasks[t].name, summarize(samples[t], ci));
  }
  return report;
}

void write_cv_losses_csv(std::ostream& out, const CVReport& report) {
  out << "repeat,fold,loss\n";
  for (const auto& c : report.cells) {
    out << (c.repeat + 1) << ',' << (c.fold + 1) << ',' << fmt_double(c.loss) << '\n';
  }
}

void write_summary_csv(std::ostream& out,
                       const std::vector<std::pair<std::string, SummaryStats>>& rows) {
  out << "name,n,mean,sd,ci_lower,ci_upper\n";
  for (const auto& [name, s] : rows) {
    out << name << ',' << s.n << ',' << fmt_double(s.mean) << ',' << fmt_double(s.sd) << ','
        << fmt_double(s.ci_lower) << ',' << fmt_double(s.ci_upper) << '\n';
  }
}

void write_ncv_report_csv(std::ostream& out, const NCVReport& report) {
  out << "outer_fold,best_hyper_index,inner_loss,outer_loss\n";
  for (const auto& f : report.folds) {
    out << (f.outer_fold + 1) << ',' << f.best_index << ',' << fmt_double(f.inner_loss) << ','
        << fmt_double(f.outer_loss) << '\n';
  }
  out << "mean,," << fmt_double(report.mean_inner_loss) << ','
      << fmt_double(report.mean_outer_loss) << '\n';
}

void write_timing_csv(std::ostream& out, const TimingReport& report) {
  out << "task,run,seconds\n";
  for (const auto& r : report.rows) {
    out << r.task << ',' << (r.run + 1) << ',' << fmt_double(r.seconds) << '\n';
  }
}

void write_folds_csv(std::ostream& out, const std::vector<FoldAssignment>& splits,
                     const std::vector<std::string>& region_ids) {
  out << "repeat,region_id,fold\n";
  for (std::size_t r = 0; r < splits.size(); ++r) {
    for (std::size_t i = 0; i < splits[r].labels.size(); ++i) {
      out << (r + 1) << ',' << (i < region_ids.size() ? region_ids[i] : std::to_string(i)) << ','
          << (splits[r].labels[i] + 1) << '\n';
    }
  }
}

}  // namespace disagg::eval
