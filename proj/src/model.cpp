#include "disagg/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "disagg/error.hpp"
#include "disagg/serialize.hpp"
#include "text.hpp"

namespace disagg::model {
namespace {

using nn::Mode;

double inverse_link(Link link, double eta) noexcept {
  return link == Link::log ? std::exp(eta) : eta;
}

// Per-region network inputs, built once and reused across epochs.
struct RegionInputs {
  Matrix cov;  // Pmax x (C or C + 2)
  Matrix xy;   // Pmax x 2, only when the spatial branch exists
};

RegionInputs build_inputs(const ModelSpec& spec, const double* cov, const double* xy,
                          std::size_t rows, std::size_t n_cov) {
  RegionInputs in;
  const std::size_t width = n_cov + (spec.xy_as_covariates ? 2 : 0);
  in.cov = Matrix(rows, width);
  for (std::size_t p = 0; p < rows; ++p) {
    for (std::size_t c = 0; c < n_cov; ++c) in.cov(p, c) = cov[p * n_cov + c];
    if (spec.xy_as_covariates) {
      in.cov(p, n_cov) = xy[p * 2];
      in.cov(p, n_cov + 1) = xy[p * 2 + 1];
    }
  }
  if (spec.layers_xy) {
    in.xy = Matrix(rows, 2);
    std::copy(xy, xy + rows * 2, in.xy.data().begin());
  }
  return in;
}

std::vector<RegionInputs> dataset_inputs(const DisaggModel& model,
                                         const prep::PaddedDataset& data) {
  if (data.n_channels != model.spec.n_covariates()) {
    throw ValidationError("width mismatch: model expects " +
                          std::to_string(model.spec.n_covariates()) + " covariates, dataset has " +
                          std::to_string(data.n_channels));
  }
  std::vector<RegionInputs> out;
  out.reserve(data.n_regions);
  for (std::size_t r = 0; r < data.n_regions; ++r) {
    out.push_back(build_inputs(model.spec, data.covariates.data() + r * data.pmax * data.n_channels,
                               data.xy.data() + r * data.pmax * 2, data.pmax, data.n_channels));
  }
  return out;
}

struct BranchPass {
  Matrix hx;
  Matrix hs;
  nn::Trace trace_cov;
  nn::Trace trace_xy;
};

BranchPass run_branches(const DisaggModel& model, const nn::NetworkSpec& cov_net,
                        const std::optional<nn::NetworkSpec>& xy_net, const RegionInputs& in,
                        Mode mode, RngStream* rng, bool keep_trace) {
  BranchPass pass;
  pass.hx = nn::forward_network(cov_net, model.params_cov, in.cov, mode, rng,
                                keep_trace ? &pass.trace_cov : nullptr);
  if (xy_net) {
    pass.hs = nn::forward_network(*xy_net, *model.params_xy, in.xy, mode, rng,
                                  keep_trace ? &pass.trace_xy : nullptr);
  }
  return pass;
}

struct ModelNetworks {
  nn::NetworkSpec cov;
  std::optional<nn::NetworkSpec> xy;
};

ModelNetworks networks_of(const DisaggModel& model) {
  ModelNetworks nets{model.spec.cov_network(), model.spec.xy_network()};
  if (model.params_cov.size() != nets.cov.param_count()) {
    throw ValidationError("covariate branch parameters do not match the model spec");
  }
  if (nets.xy.has_value() != model.params_xy.has_value() ||
      (nets.xy && model.params_xy->size() != nets.xy->param_count())) {
    throw ValidationError("spatial branch parameters do not match the model spec");
  }
  return nets;
}

LossGradient loss_and_gradient_cached(const DisaggModel& model, const ModelNetworks& nets,
                                      const prep::PaddedDataset& data,
                                      const std::vector<RegionInputs>& inputs,
                                      std::span<const std::size_t> regions, Mode mode,
                                      RngStream* rng, bool with_gradient) {
  if (regions.empty()) throw ValidationError("loss over an empty region set");
  LossGradient out;
  if (with_gradient) {
    out.grad_cov.assign(nets.cov.param_count(), 0.0);
    if (nets.xy) out.grad_xy.assign(nets.xy->param_count(), 0.0);
  }
  std::vector<double> observed;
  observed.reserve(regions.size());
  const double n = static_cast<double>(regions.size());
  const Link link = model.spec.link;

  for (const std::size_t r : regions) {
    if (r >= data.n_regions) throw ValidationError("region index out of range");
    BranchPass pass = run_branches(model, nets.cov, nets.xy, inputs[r], mode, rng, with_gradient);
    const std::size_t rows = data.pmax;
    std::vector<double> rate(rows);
    double agg = 0.0;
    for (std::size_t p = 0; p < rows; ++p) {
      const double eta = pass.hx(p, 0) + (nets.xy ? pass.hs(p, 0) : 0.0);
      rate[p] = inverse_link(link, eta);
      agg += rate[p] * data.pop(r, p);
    }
    if (!std::isfinite(agg)) {
      throw NumericError("non-finite aggregated prediction in region " + std::to_string(r) +
                         " ('" + data.region_ids[r] + "')");
    }
    out.agg.push_back(agg);
    observed.push_back(data.response[r]);

    if (with_gradient) {
      const double y = data.response[r];
      const double dl_dagg = (1.0 - (agg > nn::kMinPrediction ? y / agg : 0.0)) / n;
      Matrix upstream(rows, 1);
      for (std::size_t p = 0; p < rows; ++p) {
        const double dm_deta = link == Link::log ? rate[p] : 1.0;
        upstream(p, 0) = dl_dagg * data.pop(r, p) * dm_deta;
      }
      nn::accumulate_gradients(nets.cov, model.params_cov, pass.trace_cov, upstream, out.grad_cov);
      if (nets.xy) {
        nn::accumulate_gradients(*nets.xy, *model.params_xy, pass.trace_xy, upstream,
                                 out.grad_xy);
      }
    }
  }
  out.loss = nn::poisson_loss(observed, out.agg);
  return out;
}

std::vector<std::size_t> all_regions(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

}  // namespace

std::string_view to_string(Link link) noexcept { return link == Link::log ? "log" : "identity"; }

Link link_from_string(std::string_view name) {
  if (name == "log") return Link::log;
  if (name == "identity") return Link::identity;
  throw ValidationError("unknown link '" + std::string(name) + "'");
}

void ModelSpec::validate() const {
  if (xy_as_covariates && layers_xy) {
    throw ValidationError("layers_xy and xy_as_covariates are mutually exclusive");
  }
  if (covariate_names.empty()) throw ValidationError("model has no covariates");
  cov_network().validate();
  if (auto xy = xy_network()) xy->validate();
}

nn::NetworkSpec ModelSpec::cov_network() const {
  nn::NetworkSpec net;
  net.input_width = covariate_names.size() + (xy_as_covariates ? 2 : 0);
  net.layers = layers_cov;
  net.layers.emplace_back(nn::Dense{1, nn::Activation::linear});
  return net;
}

std::optional<nn::NetworkSpec> ModelSpec::xy_network() const {
  if (!layers_xy) return std::nullopt;
  nn::NetworkSpec net;
  net.input_width = 2;
  net.layers = *layers_xy;
  net.layers.emplace_back(nn::Dense{1, nn::Activation::linear});
  return net;
}

std::size_t ModelSpec::param_count() const {
  std::size_t n = cov_network().param_count();
  if (auto xy = xy_network()) n += xy->param_count();
  return n;
}

bool ModelSpec::is_linear() const noexcept {
  auto no_dense = [](const std::vector<nn::LayerSpec>& layers) {
    return std::none_of(layers.begin(), layers.end(), [](const nn::LayerSpec& l) {
      return std::holds_alternative<nn::Dense>(l);
    });
  };
  return no_dense(layers_cov) && (!layers_xy || no_dense(*layers_xy));
}

DisaggModel build_model(ModelSpec spec, prep::NormalizationParams norm, std::uint64_t seed) {
  spec.validate();
  if (norm.cov_mean.size() != spec.n_covariates()) {
    throw ValidationError("normalization does not match the covariate count");
  }
  DisaggModel model;
  RngStream rng(seed);
  model.params_cov = nn::init_params(spec.cov_network(), rng);
  if (auto xy = spec.xy_network()) model.params_xy = nn::init_params(*xy, rng);
  model.spec = std::move(spec);
  model.norm = std::move(norm);
  return model;
}

DisaggModel build_model(ModelSpec spec, const prep::PaddedDataset& data, std::uint64_t seed) {
  spec.covariate_names = data.covariate_names;
  if (spec.covariate_names.empty()) {
    for (std::size_t c = 0; c < data.n_channels; ++c) {
      spec.covariate_names.push_back("cov" + std::to_string(c));
    }
  }
  spec.pmax = data.pmax;
  return build_model(std::move(spec), data.norm, seed);
}

bool EarlyStopping::update(double value) {
  ++steps_;
  if (value < best_ - config_.min_delta) {
    best_ = value;
    best_step_ = steps_;
    wait_ = 0;
    return false;
  }
  ++wait_;
  return wait_ >= config_.patience;
}

void TrainConfig::validate() const {
  if (!(validation_split >= 0.0 && validation_split < 1.0)) {
    throw ValidationError("validation_split must be in [0, 1)");
  }
  if (early_stopping) {
    if (early_stopping->patience == 0) throw ValidationError("patience must be positive");
    if (early_stopping->monitor == Monitor::val_loss && validation_split <= 0.0) {
      throw ValidationError("monitor=val_loss requires validation_split > 0");
    }
  }
  std::visit([](const auto& opt) {
    if (!(opt.lr >= 0.0) || !std::isfinite(opt.lr)) {
      throw ValidationError("learning rate must be finite and non-negative");
    }
  }, optimizer);
}

ForwardResult forward_disagg(const DisaggModel& model, const prep::PaddedDataset& data, Mode mode,
                             RngStream* rng) {
  const auto nets = networks_of(model);
  const auto inputs = dataset_inputs(model, data);
  ForwardResult out;
  out.eta = Matrix(data.n_regions, data.pmax);
  out.rate = Matrix(data.n_regions, data.pmax);
  if (nets.xy) out.eta_xy = Matrix(data.n_regions, data.pmax);
  out.agg.resize(data.n_regions);
  for (std::size_t r = 0; r < data.n_regions; ++r) {
    BranchPass pass = run_branches(model, nets.cov, nets.xy, inputs[r], mode, rng, false);
    double agg = 0.0;
    for (std::size_t p = 0; p < data.pmax; ++p) {
      const double eta = pass.hx(p, 0) + (nets.xy ? pass.hs(p, 0) : 0.0);
      out.eta(r, p) = eta;
      out.rate(r, p) = inverse_link(model.spec.link, eta);
      if (nets.xy) out.eta_xy(r, p) = pass.hs(p, 0);
      agg += out.rate(r, p) * data.pop(r, p);
    }
    if (!std::isfinite(agg)) {
      throw NumericError("non-finite aggregated prediction in region " + std::to_string(r) +
                         " ('" + data.region_ids[r] + "')");
    }
    out.agg[r] = agg;
  }
  return out;
}

LossGradient loss_and_gradient(const DisaggModel& model, const prep::PaddedDataset& data,
                               std::span<const std::size_t> regions, Mode mode, RngStream* rng,
                               bool with_gradient) {
  const auto nets = networks_of(model);
  const auto inputs = dataset_inputs(model, data);
  return loss_and_gradient_cached(model, nets, data, inputs, regions, mode, rng, with_gradient);
}

double evaluate_loss(const DisaggModel& model, const prep::PaddedDataset& data,
                     std::span<const std::size_t> regions) {
  const auto idx = regions.empty() ? all_regions(data.n_regions)
                                   : std::vector<std::size_t>(regions.begin(), regions.end());
  return loss_and_gradient(model, data, idx, Mode::infer, nullptr, false).loss;
}

FitHistory fit(DisaggModel& model, const prep::PaddedDataset& data, const TrainConfig& config) {
  config.validate();
  FitHistory history;
  if (config.epochs == 0) {
    history.stop_reason = "no epochs requested";
    return history;
  }
  const auto nets = networks_of(model);
  const auto inputs = dataset_inputs(model, data);

  std::vector<std::size_t> order = all_regions(data.n_regions);
  std::vector<std::size_t> train = order;
  std::vector<std::size_t> val;
  if (config.validation_split > 0.0) {
    if (data.n_regions < 2) throw ValidationError("validation split needs at least 2 regions");
    RngStream split_rng(derive_seed(config.seed, 0));
    split_rng.shuffle(std::span<std::size_t>(order));
    const auto n_val = static_cast<std::size_t>(
        std::ceil(config.validation_split * static_cast<double>(data.n_regions)));
    if (n_val >= data.n_regions) throw ValidationError("validation split leaves no training regions");
    train.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
    val.assign(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
  }
  history.train_regions = train;
  history.validation_regions = val;

  RngStream dropout_rng(derive_seed(config.seed, 1));
  const std::size_t n_cov = model.params_cov.size();
  std::vector<double> theta = model.params_cov.values;
  if (model.params_xy) {
    theta.insert(theta.end(), model.params_xy->values.begin(), model.params_xy->values.end());
  }
  auto opt = nn::OptimizerState::create(config.optimizer, theta.size());
  std::optional<EarlyStopping> stopper;
  if (config.early_stopping) stopper.emplace(*config.early_stopping);

  const auto start = std::chrono::steady_clock::now();
  history.stop_reason = "completed all epochs";
  std::vector<double> grads(theta.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto lg = loss_and_gradient_cached(model, nets, data, inputs, train, Mode::train, &dropout_rng,
                                       true);
    if (!std::isfinite(lg.loss)) {
      throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
    }
    std::copy(lg.grad_cov.begin(), lg.grad_cov.end(), grads.begin());
    std::copy(lg.grad_xy.begin(), lg.grad_xy.end(), grads.begin() + static_cast<std::ptrdiff_t>(n_cov));
    nn::optimizer_step(opt, theta, grads);
    std::copy(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(n_cov),
              model.params_cov.values.begin());
    if (model.params_xy) {
      std::copy(theta.begin() + static_cast<std::ptrdiff_t>(n_cov), theta.end(),
                model.params_xy->values.begin());
    }

    std::optional<double> val_loss;
    if (!val.empty()) {
      val_loss = loss_and_gradient_cached(model, nets, data, inputs, val, Mode::infer, nullptr,
                                          false)
                     .loss;
    }
    history.loss.push_back(lg.loss);
    history.val_loss.push_back(val_loss);
    history.elapsed_s.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    history.stop_epoch = epoch;

    if (stopper) {
      const double monitored =
          config.early_stopping->monitor == Monitor::loss ? lg.loss : *val_loss;
      if (stopper->update(monitored)) {
        history.stop_reason = "early stopping";
        break;
      }
    }
  }
  model.meta.epochs_run += history.size();
  model.meta.stop_reason = history.stop_reason;
  model.meta.restored_best_weights = false;
  return history;
}

std::vector<double> predict_chunks(const DisaggModel& model, const prep::PredictionChunks& chunks,
                                   Mode mode, RngStream* rng, std::vector<double>* eta_xy) {
  const auto nets = networks_of(model);
  if (chunks.n_channels != model.spec.n_covariates()) {
    throw ValidationError("channel count mismatch between model and prediction data");
  }
  std::vector<double> rates(chunks.n_slots());
  if (eta_xy != nullptr) eta_xy->assign(nets.xy ? chunks.n_slots() : 0, 0.0);
  for (std::size_t k = 0; k < chunks.n_chunks; ++k) {
    const std::size_t base = k * chunks.pmax;
    const auto in = build_inputs(model.spec, chunks.covariates.data() + base * chunks.n_channels,
                                 chunks.xy.data() + base * 2, chunks.pmax, chunks.n_channels);
    BranchPass pass = run_branches(model, nets.cov, nets.xy, in, mode, rng, false);
    for (std::size_t p = 0; p < chunks.pmax; ++p) {
      const double eta = pass.hx(p, 0) + (nets.xy ? pass.hs(p, 0) : 0.0);
      rates[base + p] = inverse_link(model.spec.link, eta);
      if (eta_xy != nullptr && nets.xy) (*eta_xy)[base + p] = pass.hs(p, 0);
    }
  }
  return rates;
}

Prediction predict_raster(const DisaggModel& model, const grid::RasterStack& stack,
                          const grid::Raster* population) {
  if (stack.size() != model.spec.n_covariates()) {
    throw ValidationError("channel count mismatch: model has " +
                          std::to_string(model.spec.n_covariates()) + " covariates, stack has " +
                          std::to_string(stack.size()));
  }
  const grid::RasterStack ordered = stack.select(model.spec.covariate_names);
  const std::size_t pmax = model.spec.pmax > 0 ? model.spec.pmax : 1;
  const auto chunks = prep::chunk_full_grid(ordered, population, model.norm, pmax);
  std::vector<double> eta_xy;
  const auto rates = predict_chunks(model, chunks, Mode::infer, nullptr, &eta_xy);

  const grid::Raster& ref = ordered.layer(0);
  Prediction out;
  out.rate = grid::Raster::filled_like(ref, ref.nodata);
  if (model.spec.layers_xy) out.spatial_effect = grid::Raster::filled_like(ref, ref.nodata);
  for (std::size_t s = 0; s < chunks.n_slots(); ++s) {
    const auto cell = chunks.placement[s];
    if (cell == prep::PredictionChunks::kPadding) continue;
    out.rate.values[static_cast<std::size_t>(cell)] = rates[s];
    if (out.spatial_effect) out.spatial_effect->values[static_cast<std::size_t>(cell)] = eta_xy[s];
  }
  if (population != nullptr) {
    out.count = grid::Raster::filled_like(ref, ref.nodata);
    for (std::size_t cell = 0; cell < ref.size(); ++cell) {
      if (out.rate.is_nodata(cell) || population->is_nodata(cell)) continue;
      out.count->values[cell] = out.rate.values[cell] * population->values[cell];
    }
  }
  return out;
}

std::vector<RegionAggregate> reaggregate(const grid::Raster& rate, const grid::Raster& population,
                                         const grid::RegionMask& mask) {
  if (!rate.same_geometry(population) || mask.nrows() != rate.nrows ||
      mask.ncols() != rate.ncols) {
    throw ValidationError("rate raster, population raster and region mask are not aligned");
  }
  std::vector<RegionAggregate> out(mask.n_regions());
  for (std::size_t r = 0; r < out.size(); ++r) out[r].region = r;
  for (std::size_t cell = 0; cell < rate.size(); ++cell) {
    auto region = mask.region_of(cell);
    if (!region || rate.is_nodata(cell) || population.is_nodata(cell)) continue;
    if (population.values[cell] < 0.0) continue;
    out[*region].count += rate.values[cell] * population.values[cell];
    out[*region].population += population.values[cell];
  }
  for (auto& a : out) {
    if (a.population > 0.0) a.rate = a.count / a.population;
  }
  return out;
}

std::vector<NamedWeight> extract_weights(const DisaggModel& model) {
  if (!model.spec.is_linear()) {
    throw ValidationError("extract_weights requires a model without hidden layers");
  }
  const auto nets = networks_of(model);
  const auto cov_slot = nets.cov.dense_slots().back();
  std::vector<NamedWeight> out;
  double intercept = model.params_cov.values[cov_slot.bias_offset];
  std::optional<nn::DenseSlot> xy_slot;
  if (nets.xy) {
    xy_slot = nets.xy->dense_slots().back();
    intercept += model.params_xy->values[xy_slot->bias_offset];
  }
  out.push_back({"(intercept)", intercept});
  for (std::size_t c = 0; c < model.spec.n_covariates(); ++c) {
    out.push_back({model.spec.covariate_names[c], model.params_cov.values[cov_slot.weight_offset + c]});
  }
  if (model.spec.xy_as_covariates) {
    const std::size_t n = model.spec.n_covariates();
    out.push_back({"x", model.params_cov.values[cov_slot.weight_offset + n]});
    out.push_back({"y", model.params_cov.values[cov_slot.weight_offset + n + 1]});
  }
  if (xy_slot) {
    out.push_back({"x", model.params_xy->values[xy_slot->weight_offset]});
    out.push_back({"y", model.params_xy->values[xy_slot->weight_offset + 1]});
  }
  return out;
}

void save_model(const std::filesystem::path& path, const DisaggModel& model) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write model '" + path.string() + "'");
  out << model_to_json(model).dump(2) << '\n';
}

DisaggModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("model file '" + path.string() + "': " + e.what());
  }
  return model_from_json(j);
}

void write_history_csv(std::ostream& out, const FitHistory& history) {
  out << "epoch,loss,val_loss,elapsed_s\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    out << (e + 1) << ',' << detail::fmt_double(history.loss[e]) << ',';
    if (history.val_loss[e]) out << detail::fmt_double(*history.val_loss[e]);
    out << ',' << detail::fmt_double(history.elapsed_s[e]) << '\n';
  }
}

}  // namespace disagg::model
