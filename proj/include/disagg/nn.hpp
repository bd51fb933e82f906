#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "disagg/matrix.hpp"
#include "disagg/rng.hpp"

// Small dense feed-forward engine. Layers act row-wise (one row per pixel)
// with shared weights, so the per-row arithmetic never depends on how many
// rows are batched together.
namespace disagg::nn {

enum class Activation { relu, sigmoid, tanh, linear };

std::string_view to_string(Activation a) noexcept;
Activation activation_from_string(std::string_view name);

double activate(Activation a, double x) noexcept;

struct Dense {
  std::size_t units = 1;
  Activation activation = Activation::linear;
  friend bool operator==(const Dense&, const Dense&) = default;
};

struct Dropout {
  double rate = 0.0;
  friend bool operator==(const Dropout&, const Dropout&) = default;
};

using LayerSpec = std::variant<Dense, Dropout>;

/// Location of one dense layer's weights (in x out, row-major) and bias in the flat vector.
struct DenseSlot {
  std::size_t layer = 0;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
};

struct NetworkSpec {
  std::size_t input_width = 0;
  std::vector<LayerSpec> layers;

  void validate() const;
  std::size_t output_width() const;
  std::vector<DenseSlot> dense_slots() const;
  std::size_t param_count() const;
  bool has_active_dropout() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct Params {
  std::vector<double> values;
  std::size_t size() const noexcept { return values.size(); }
  friend bool operator==(const Params&, const Params&) = default;
};

enum class Mode { train, infer, mc_infer };

/// Everything backward_gradients needs from a forward pass.
struct Trace {
  std::vector<Matrix> outputs;  // outputs[0] is the input; outputs[i + 1] is layer i's output
  std::vector<Matrix> pre;      // dense pre-activations, empty for dropout layers
  std::vector<std::vector<double>> masks;  // dropout multipliers, empty for dense layers
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)); zero biases.
Params init_params(const NetworkSpec& spec, RngStream& rng);

/// Dropout is active (inverted scaling) in train and mc_infer modes and
/// requires `rng` there unless every rate is zero.
Matrix forward_network(const NetworkSpec& spec, const Params& params, const Matrix& input, Mode mode,
                       RngStream* rng = nullptr, Trace* trace = nullptr);

/// Adds dL/dparams into `grad` given dL/d(output) as `upstream`.
void accumulate_gradients(const NetworkSpec& spec, const Params& params, const Trace& trace,
                          const Matrix& upstream, std::span<double> grad);

std::vector<double> backward_gradients(const NetworkSpec& spec, const Params& params,
                                       const Trace& trace, const Matrix& upstream);

/// Predictions are floored here before the log.
inline constexpr double kMinPrediction = 1e-12;

/// (1/n) * sum(yhat - y * log(yhat)); omits log(y!) so it can be negative.
double poisson_loss(std::span<const double> y, std::span<const double> yhat);

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct SgdConfig {
  double lr = 0.01;
  friend bool operator==(const SgdConfig&, const SgdConfig&) = default;
};

using OptimizerConfig = std::variant<AdamConfig, SgdConfig>;

struct OptimizerState {
  OptimizerConfig config;
  std::uint64_t t = 0;
  std::vector<double> m;
  std::vector<double> v;

  static OptimizerState create(const OptimizerConfig& config, std::size_t n_params);
};

void optimizer_step(OptimizerState& state, std::vector<double>& params,
                    std::span<const double> grads);

}  // namespace disagg::nn
