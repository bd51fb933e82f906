#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "disagg/data_prep.hpp"
#include "disagg/model.hpp"

namespace disagg::eval {

/// Fold label per region. Labels are 0-based here and 1-based in CSV output.
struct FoldAssignment {
  std::vector<std::size_t> labels;
  std::size_t k = 0;
  std::uint64_t seed = 0;

  std::vector<std::size_t> members(std::size_t fold) const;
  std::vector<std::size_t> complement(std::size_t fold) const;

  friend bool operator==(const FoldAssignment&, const FoldAssignment&) = default;
};

/// Sorted-block stratification: rank by response, cut into blocks of k and
/// give each block a seeded permutation of the fold labels.
FoldAssignment stratified_folds(std::span<const double> responses, std::size_t k,
                                std::uint64_t seed);

enum class CiMethod { student_t, normal };

struct SummaryStats {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample sd (n - 1)
  double ci_lower = 0.0;
  double ci_upper = 0.0;
};

/// mean +- q * sd / sqrt(n) with q the 0.975 quantile of Student t (n - 1 df)
/// or 1.96 for CiMethod::normal. Undefined spread (n < 2) gives NaN sd and bounds.
SummaryStats summarize(std::span<const double> values, CiMethod method = CiMethod::student_t);

/// Normalization is refit on `train`; the returned loss is the inference-mode
/// Poisson loss over `test`.
double fit_and_score(const prep::RegionData& data, const std::vector<std::size_t>& train,
                     const std::vector<std::size_t>& test, const model::ModelSpec& spec,
                     const model::TrainConfig& config, std::uint64_t seed);

struct CvCell {
  std::size_t repeat = 0;
  std::size_t fold = 0;
  double loss = 0.0;
};

struct CVReport {
  std::vector<CvCell> cells;  // repeat-major
  std::vector<FoldAssignment> splits;  // one per repeat
  SummaryStats summary;
};

struct EvalOptions {
  std::size_t jobs = 1;
  CiMethod ci = CiMethod::student_t;
  /// Nested CV only: a candidate whose inner-fold training goes non-finite
  /// scores +inf instead of aborting the run. Refits still abort.
  bool disqualify_nonfinite = false;
};

/// Repeat r uses fold seed `seed + r`; every spec evaluated with the same seed
/// sees the same splits and the same per-cell initial weights.
CVReport repeated_cross_validate(const prep::RegionData& data, const model::ModelSpec& spec,
                                 const model::TrainConfig& config, std::size_t k,
                                 std::size_t repeats, std::uint64_t seed,
                                 const EvalOptions& options = {});

struct HyperGridConfig {
  std::size_t max_depth = 4;
  std::size_t min_nodes = 2;
  std::size_t max_nodes = 20;
  std::vector<double> rates{0.0, 0.1, 0.2};
  /// Candidates drawn per depth; a depth with fewer combinations takes them all.
  std::vector<std::size_t> per_depth{57, 50, 50, 50};
  nn::Activation activation = nn::Activation::relu;
};

/// Number of (nodes per layer, shared rate) combinations at `depth`.
std::uint64_t hypergrid_combinations(const HyperGridConfig& config, std::size_t depth);

struct HyperGrid {
  std::vector<model::ModelSpec> candidates;  // index = position
};

/// Each candidate is `base` with layers_cov replaced by `depth` dense+dropout stacks.
HyperGrid sample_hypergrid(const HyperGridConfig& config, const model::ModelSpec& base,
                           std::uint64_t seed);

nlohmann::json hypergrid_to_json(const HyperGrid& grid);
HyperGrid hypergrid_from_json(const nlohmann::json& j);
void save_hypergrid(const std::filesystem::path& path, const HyperGrid& grid);
HyperGrid load_hypergrid(const std::filesystem::path& path);

struct NcvOuterFold {
  std::size_t outer_fold = 0;
  std::size_t best_index = 0;
  double inner_loss = 0.0;
  double outer_loss = 0.0;
  std::vector<double> candidate_inner_loss;
  std::vector<std::size_t> test_regions;
  /// Region indices of the full dataset, one entry per inner fold.
  std::vector<std::vector<std::size_t>> inner_train_regions;
  std::vector<std::vector<std::size_t>> inner_val_regions;
};

struct NCVReport {
  FoldAssignment outer;
  std::vector<NcvOuterFold> folds;
  double mean_inner_loss = 0.0;
  double mean_outer_loss = 0.0;
};

/// Best candidate per outer fold: lowest mean inner loss, then fewer
/// parameters, then lower index.
NCVReport nested_cross_validate(const prep::RegionData& data, const HyperGrid& grid,
                                const model::TrainConfig& config, std::size_t k_outer,
                                std::size_t k_inner, std::uint64_t seed,
                                const EvalOptions& options = {});

struct Metrics {
  double poisson = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> pearson;  // undefined for n < 2 or a constant vector
};

Metrics compute_metrics(std::span<const double> y, std::span<const double> yhat);

struct TimingTask {
  std::string name;
  std::function<void()> run;
};

struct TimingRow {
  std::string task;
  std::size_t run = 0;
  double seconds = 0.0;
};

struct TimingReport {
  std::vector<TimingRow> rows;
  std::vector<std::pair<std::string, SummaryStats>> summary;
};

/// Runs every task once per repeat (run-major) and records wall-clock seconds.
TimingReport timing_benchmark(std::span<const TimingTask> tasks, std::size_t repeats,
                              CiMethod ci = CiMethod::student_t);

void write_cv_losses_csv(std::ostream& out, const CVReport& report);
void write_summary_csv(std::ostream& out,
                       const std::vector<std::pair<std::string, SummaryStats>>& rows);
/// One row per outer fold plus a `mean` row.
void write_ncv_report_csv(std::ostream& out, const NCVReport& report);
void write_timing_csv(std::ostream& out, const TimingReport& report);
void write_folds_csv(std::ostream& out, const std::vector<FoldAssignment>& splits,
                     const std::vector<std::string>& region_ids);

}  // namespace disagg::eval
