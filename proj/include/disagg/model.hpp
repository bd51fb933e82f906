#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "disagg/data_prep.hpp"
#include "disagg/grid_io.hpp"
#include "disagg/nn.hpp"

namespace disagg::model {

enum class Link { log, identity };

std::string_view to_string(Link link) noexcept;
Link link_from_string(std::string_view name);

/// Two-branch network: covariates -> H_X and (optionally) coordinates -> H_S.
/// Each branch ends in an implicit dense(1, linear) head; rate = g^-1(H_X + H_S).
struct ModelSpec {
  std::vector<nn::LayerSpec> layers_cov;
  std::optional<std::vector<nn::LayerSpec>> layers_xy;
  bool xy_as_covariates = false;
  Link link = Link::log;
  std::vector<std::string> covariate_names;
  std::size_t pmax = 0;

  void validate() const;
  std::size_t n_covariates() const noexcept { return covariate_names.size(); }
  nn::NetworkSpec cov_network() const;
  std::optional<nn::NetworkSpec> xy_network() const;
  std::size_t param_count() const;
  /// True when neither branch has a hidden dense layer.
  bool is_linear() const noexcept;
};

struct TrainingMeta {
  std::size_t epochs_run = 0;
  std::string stop_reason = "untrained";
  /// Early stopping keeps the final weights; this records that explicitly.
  bool restored_best_weights = false;
};

struct DisaggModel {
  ModelSpec spec;
  nn::Params params_cov;
  std::optional<nn::Params> params_xy;
  prep::NormalizationParams norm;
  TrainingMeta meta;
};

/// Fresh model with seeded initial weights.
DisaggModel build_model(ModelSpec spec, prep::NormalizationParams norm, std::uint64_t seed);
/// Takes covariate names, Pmax and normalization from the dataset.
DisaggModel build_model(ModelSpec spec, const prep::PaddedDataset& data, std::uint64_t seed);

enum class Monitor { loss, val_loss };

struct EarlyStoppingConfig {
  Monitor monitor = Monitor::val_loss;
  double min_delta = 0.0;
  std::size_t patience = 10;
};

/// Stops after `patience` consecutive updates that fail to beat the best
/// value by more than `min_delta`.
class EarlyStopping {
 public:
  explicit EarlyStopping(EarlyStoppingConfig config) : config_(config) {}

  /// Feeds one monitored value; returns true when training should stop.
  bool update(double value);

  double best() const noexcept { return best_; }
  std::size_t best_step() const noexcept { return best_step_; }
  std::size_t steps() const noexcept { return steps_; }
  std::size_t wait() const noexcept { return wait_; }

 private:
  EarlyStoppingConfig config_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_step_ = 0;
  std::size_t steps_ = 0;
  std::size_t wait_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 1000;
  nn::OptimizerConfig optimizer = nn::AdamConfig{};
  double validation_split = 0.0;
  std::optional<EarlyStoppingConfig> early_stopping;
  std::uint64_t seed = 0;

  void validate() const;
};

struct FitHistory {
  std::vector<double> loss;
  std::vector<std::optional<double>> val_loss;
  std::vector<double> elapsed_s;
  std::size_t stop_epoch = 0;
  std::string stop_reason;
  std::vector<std::size_t> train_regions;
  std::vector<std::size_t> validation_regions;

  std::size_t size() const noexcept { return loss.size(); }
};

struct ForwardResult {
  Matrix eta;     // R x Pmax linear predictor
  Matrix rate;    // R x Pmax, g^-1(eta)
  Matrix eta_xy;  // R x Pmax spatial part (pre-link); empty without a spatial branch
  std::vector<double> agg;
};

ForwardResult forward_disagg(const DisaggModel& model, const prep::PaddedDataset& data,
                             nn::Mode mode = nn::Mode::infer, RngStream* rng = nullptr);

struct LossGradient {
  double loss = 0.0;
  std::vector<double> agg;
  std::vector<double> grad_cov;
  std::vector<double> grad_xy;
};

/// Poisson loss over `regions` and its exact gradient.
LossGradient loss_and_gradient(const DisaggModel& model, const prep::PaddedDataset& data,
                               std::span<const std::size_t> regions, nn::Mode mode,
                               RngStream* rng = nullptr, bool with_gradient = true);

/// Inference-mode Poisson loss over `regions` (all regions when empty).
double evaluate_loss(const DisaggModel& model, const prep::PaddedDataset& data,
                     std::span<const std::size_t> regions = {});

/// Full-batch training; updates `model` in place.
FitHistory fit(DisaggModel& model, const prep::PaddedDataset& data, const TrainConfig& config);

/// Per-slot rates for prepared chunks (padding slots included).
std::vector<double> predict_chunks(const DisaggModel& model, const prep::PredictionChunks& chunks,
                                   nn::Mode mode = nn::Mode::infer, RngStream* rng = nullptr,
                                   std::vector<double>* eta_xy = nullptr);

struct Prediction {
  grid::Raster rate;
  std::optional<grid::Raster> count;
  std::optional<grid::Raster> spatial_effect;
};

/// Covariates are matched to the model by name.
Prediction predict_raster(const DisaggModel& model, const grid::RasterStack& stack,
                          const grid::Raster* population = nullptr);

struct RegionAggregate {
  std::size_t region = 0;
  double count = 0.0;
  double population = 0.0;
  std::optional<double> rate;  // count / population; undefined for zero population
};

std::vector<RegionAggregate> reaggregate(const grid::Raster& rate, const grid::Raster& population,
                                         const grid::RegionMask& mask);

struct NamedWeight {
  std::string name;
  double value = 0.0;
};

/// Intercept plus one coefficient per input, for models without hidden layers.
std::vector<NamedWeight> extract_weights(const DisaggModel& model);

void save_model(const std::filesystem::path& path, const DisaggModel& model);
DisaggModel load_model(const std::filesystem::path& path);

/// `epoch,loss,val_loss,elapsed_s`; val_loss is empty when not computed.
void write_history_csv(std::ostream& out, const FitHistory& history);

}  // namespace disagg::model
