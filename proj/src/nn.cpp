#include "disagg/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "disagg/error.hpp"

namespace disagg::nn {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double derivative(Activation a, double pre, double post) noexcept {
  switch (a) {
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid: return post * (1.0 - post);
    case Activation::tanh: return 1.0 - post * post;
    case Activation::linear: return 1.0;
  }
  return 1.0;
}

}  // namespace

std::string_view to_string(Activation a) noexcept {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::linear: return "linear";
  }
  return "linear";
}

Activation activation_from_string(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "tanh") return Activation::tanh;
  if (name == "linear") return Activation::linear;
  throw ValidationError("unknown activation '" + std::string(name) + "'");
}

double activate(Activation a, double x) noexcept {
  switch (a) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return std::tanh(x);
    case Activation::linear: return x;
  }
  return x;
}

void NetworkSpec::validate() const {
  if (input_width == 0) throw ValidationError("network input width must be positive");
  for (const auto& layer : layers) {
    std::visit(overloaded{[](const Dense& d) {
                            if (d.units == 0) throw ValidationError("dense units must be >= 1");
                          },
                          [](const Dropout& d) {
                            if (!(d.rate >= 0.0 && d.rate < 1.0)) {
                              throw ValidationError("dropout rate must be in [0, 1)");
                            }
                          }},
               layer);
  }
}

std::size_t NetworkSpec::output_width() const {
  std::size_t width = input_width;
  for (const auto& layer : layers) {
    if (const auto* d = std::get_if<Dense>(&layer)) width = d->units;
  }
  return width;
}

std::vector<DenseSlot> NetworkSpec::dense_slots() const {
  std::vector<DenseSlot> slots;
  std::size_t width = input_width;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (const auto* d = std::get_if<Dense>(&layers[i])) {
      DenseSlot s{i, width, d->units, offset, offset + width * d->units};
      offset = s.bias_offset + d->units;
      slots.push_back(s);
      width = d->units;
    }
  }
  return slots;
}

std::size_t NetworkSpec::param_count() const {
  const auto slots = dense_slots();
  return slots.empty() ? 0 : slots.back().bias_offset + slots.back().out;
}

bool NetworkSpec::has_active_dropout() const {
  return std::any_of(layers.begin(), layers.end(), [](const LayerSpec& l) {
    const auto* d = std::get_if<Dropout>(&l);
    return d != nullptr && d->rate > 0.0;
  });
}

Params init_params(const NetworkSpec& spec, RngStream& rng) {
  spec.validate();
  Params p;
  p.values.assign(spec.param_count(), 0.0);
  for (const auto& s : spec.dense_slots()) {
    const double limit = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
    for (std::size_t k = 0; k < s.in * s.out; ++k) {
      p.values[s.weight_offset + k] = (2.0 * rng.uniform() - 1.0) * limit;
    }
  }
  return p;
}

Matrix forward_network(const NetworkSpec& spec, const Params& params, const Matrix& input, Mode mode,
                       RngStream* rng, Trace* trace) {
  if (input.cols() != spec.input_width) {
    throw ValidationError("width mismatch: network expects " + std::to_string(spec.input_width) +
                          " inputs, got " + std::to_string(input.cols()));
  }
  if (params.size() != spec.param_count()) {
    throw ValidationError("parameter vector does not match the network layout");
  }
  if (trace != nullptr) {
    trace->outputs.clear();
    trace->pre.clear();
    trace->masks.clear();
    trace->outputs.reserve(spec.layers.size() + 1);
    trace->outputs.push_back(input);
  }

  const auto slots = spec.dense_slots();
  std::size_t next_slot = 0;
  // With a trace, each layer's output lives in trace->outputs (reserved, so
  // the pointer stays valid); otherwise in `owned`.
  Matrix owned;
  const Matrix* current = trace != nullptr ? &trace->outputs.back() : &input;
  const std::size_t rows = input.rows();

  for (const auto& layer : spec.layers) {
    Matrix next;
    if (const auto* dense = std::get_if<Dense>(&layer)) {
      const DenseSlot& s = slots[next_slot++];
      const double* w = params.values.data() + s.weight_offset;
      const double* b = params.values.data() + s.bias_offset;
      Matrix pre(rows, s.out);
      for (std::size_t p = 0; p < rows; ++p) {
        auto out = pre.row(p);
        std::copy(b, b + s.out, out.begin());
        const auto in = current->row(p);
        for (std::size_t i = 0; i < s.in; ++i) {
          const double xi = in[i];
          const double* wi = w + i * s.out;
          for (std::size_t j = 0; j < s.out; ++j) out[j] += xi * wi[j];
        }
      }
      if (dense->activation == Activation::linear) {
        next = pre;
      } else {
        next = Matrix(rows, s.out);
        for (std::size_t k = 0; k < pre.size(); ++k) {
          next.data()[k] = activate(dense->activation, pre.data()[k]);
        }
      }
      if (trace != nullptr) {
        trace->pre.push_back(std::move(pre));
        trace->masks.emplace_back();
      }
    } else {
      const double rate = std::get<Dropout>(layer).rate;
      next = *current;
      std::vector<double> mask;
      if (mode != Mode::infer && rate > 0.0) {
        if (rng == nullptr) throw ValidationError("dropout in training mode requires an rng");
        const double scale = 1.0 / (1.0 - rate);
        mask.resize(next.size());
        for (auto& m : mask) m = rng->uniform() >= rate ? scale : 0.0;
        for (std::size_t k = 0; k < next.size(); ++k) next.data()[k] *= mask[k];
      }
      if (trace != nullptr) {
        trace->pre.emplace_back();
        trace->masks.push_back(std::move(mask));
      }
    }
    if (trace != nullptr) {
      trace->outputs.push_back(std::move(next));
      current = &trace->outputs.back();
    } else {
      owned = std::move(next);
      current = &owned;
    }
  }
  return *current;
}

void accumulate_gradients(const NetworkSpec& spec, const Params& params, const Trace& trace,
                          const Matrix& upstream, std::span<double> grad) {
  if (trace.outputs.size() != spec.layers.size() + 1 || trace.pre.size() != spec.layers.size()) {
    throw ValidationError("trace does not match the network spec");
  }
  if (grad.size() != spec.param_count()) throw ValidationError("gradient buffer has wrong size");
  if (upstream.rows() != trace.outputs.back().rows() ||
      upstream.cols() != trace.outputs.back().cols()) {
    throw ValidationError("upstream gradient shape does not match the network output");
  }

  const auto slots = spec.dense_slots();
  std::size_t next_slot = slots.size();
  Matrix delta = upstream;

  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const auto& layer = spec.layers[li];
    if (const auto* dense = std::get_if<Dense>(&layer)) {
      const DenseSlot& s = slots[--next_slot];
      const Matrix& pre = trace.pre[li];
      const Matrix& post = trace.outputs[li + 1];
      const Matrix& in = trace.outputs[li];
      const std::size_t rows = in.rows();
      for (std::size_t k = 0; k < delta.size(); ++k) {
        delta.data()[k] *= derivative(dense->activation, pre.data()[k], post.data()[k]);
      }
      double* gw = grad.data() + s.weight_offset;
      double* gb = grad.data() + s.bias_offset;
      for (std::size_t p = 0; p < rows; ++p) {
        const auto d = delta.row(p);
        const auto x = in.row(p);
        for (std::size_t i = 0; i < s.in; ++i) {
          const double xi = x[i];
          double* gwi = gw + i * s.out;
          for (std::size_t j = 0; j < s.out; ++j) gwi[j] += xi * d[j];
        }
        for (std::size_t j = 0; j < s.out; ++j) gb[j] += d[j];
      }
      if (next_slot == 0) break;
      const double* w = params.values.data() + s.weight_offset;
      Matrix below(rows, s.in);
      for (std::size_t p = 0; p < rows; ++p) {
        const auto d = delta.row(p);
        auto out = below.row(p);
        for (std::size_t i = 0; i < s.in; ++i) {
          const double* wi = w + i * s.out;
          double acc = 0.0;
          for (std::size_t j = 0; j < s.out; ++j) acc += d[j] * wi[j];
          out[i] = acc;
        }
      }
      delta = std::move(below);
    } else {
      const auto& mask = trace.masks[li];
      if (!mask.empty()) {
        for (std::size_t k = 0; k < delta.size(); ++k) delta.data()[k] *= mask[k];
      }
    }
  }
}

std::vector<double> backward_gradients(const NetworkSpec& spec, const Params& params,
                                       const Trace& trace, const Matrix& upstream) {
  std::vector<double> grad(spec.param_count(), 0.0);
  accumulate_gradients(spec, params, trace, upstream, grad);
  return grad;
}

double poisson_loss(std::span<const double> y, std::span<const double> yhat) {
  if (y.size() != yhat.size()) {
    throw ValidationError("length mismatch: " + std::to_string(y.size()) + " observations, " +
                          std::to_string(yhat.size()) + " predictions");
  }
  if (y.empty()) throw ValidationError("poisson loss of an empty vector");
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double pred = std::max(yhat[i], kMinPrediction);
    total += yhat[i] - y[i] * std::log(pred);
  }
  return total / static_cast<double>(y.size());
}

OptimizerState OptimizerState::create(const OptimizerConfig& config, std::size_t n_params) {
  OptimizerState s;
  s.config = config;
  if (std::holds_alternative<AdamConfig>(config)) {
    s.m.assign(n_params, 0.0);
    s.v.assign(n_params, 0.0);
  }
  return s;
}

void optimizer_step(OptimizerState& state, std::vector<double>& params,
                    std::span<const double> grads) {
  if (grads.size() != params.size()) throw ValidationError("gradient and parameter sizes differ");
  ++state.t;
  if (const auto* sgd = std::get_if<SgdConfig>(&state.config)) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= sgd->lr * grads[i];
    return;
  }
  const auto& adam = std::get<AdamConfig>(state.config);
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ValidationError("optimizer state does not match the parameter vector");
  }
  const double t = static_cast<double>(state.t);
  const double bias1 = 1.0 - std::pow(adam.beta1, t);
  const double bias2 = 1.0 - std::pow(adam.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = adam.beta1 * state.m[i] + (1.0 - adam.beta1) * g;
    state.v[i] = adam.beta2 * state.v[i] + (1.0 - adam.beta2) * g * g;
    const double m_hat = state.m[i] / bias1;
    const double v_hat = state.v[i] / bias2;
    params[i] -= adam.lr * m_hat / (std::sqrt(v_hat) + adam.epsilon);
  }
}

}  // namespace disagg::nn
