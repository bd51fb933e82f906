#include "disagg/serialize.hpp"

#include <string>

#include "disagg/error.hpp"

namespace disagg {

using nlohmann::json;

namespace {

const json& require(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) {
    throw ValidationError(std::string("missing field '") + key + "'");
  }
  return j.at(key);
}

}  // namespace

namespace prep {

void to_json(json& j, const NormalizationParams& p) {
  j = json{{"cov_mean", p.cov_mean}, {"cov_sd", p.cov_sd}, {"xy_mean", p.xy_mean},
           {"xy_sd", p.xy_sd}};
}

void from_json(const json& j, NormalizationParams& p) {
  require(j, "cov_mean").get_to(p.cov_mean);
  require(j, "cov_sd").get_to(p.cov_sd);
  require(j, "xy_mean").get_to(p.xy_mean);
  require(j, "xy_sd").get_to(p.xy_sd);
  if (p.cov_mean.size() != p.cov_sd.size() || p.xy_mean.size() != 2 || p.xy_sd.size() != 2) {
    throw ValidationError("normalization block has inconsistent lengths");
  }
}

}  // namespace prep

namespace nn {

void to_json(json& j, const LayerSpec& layer) {
  if (const auto* d = std::get_if<Dense>(&layer)) {
    j = json{{"type", "dense"}, {"units", d->units}, {"activation", to_string(d->activation)}};
  } else {
    j = json{{"type", "dropout"}, {"rate", std::get<Dropout>(layer).rate}};
  }
}

void from_json(const json& j, LayerSpec& layer) {
  const auto type = require(j, "type").get<std::string>();
  if (type == "dense") {
    Dense d;
    d.units = require(j, "units").get<std::size_t>();
    d.activation = activation_from_string(j.value("activation", std::string("linear")));
    if (d.units == 0) throw ValidationError("dense units must be >= 1");
    layer = d;
  } else if (type == "dropout") {
    Dropout d{require(j, "rate").get<double>()};
    if (!(d.rate >= 0.0 && d.rate < 1.0)) throw ValidationError("dropout rate must be in [0, 1)");
    layer = d;
  } else {
    throw ValidationError("unknown layer type '" + type + "'");
  }
}

void to_json(json& j, const NetworkSpec& spec) {
  j = json{{"input_width", spec.input_width}, {"layers", spec.layers}};
}

void from_json(const json& j, NetworkSpec& spec) {
  require(j, "input_width").get_to(spec.input_width);
  require(j, "layers").get_to(spec.layers);
}

void to_json(json& j, const OptimizerConfig& config) {
  if (const auto* a = std::get_if<AdamConfig>(&config)) {
    j = json{{"name", "adam"}, {"lr", a->lr}, {"beta1", a->beta1}, {"beta2", a->beta2},
             {"epsilon", a->epsilon}};
  } else {
    j = json{{"name", "sgd"}, {"lr", std::get<SgdConfig>(config).lr}};
  }
}

void from_json(const json& j, OptimizerConfig& config) {
  const auto name = j.value("name", std::string("adam"));
  if (name == "adam") {
    AdamConfig a;
    a.lr = j.value("lr", a.lr);
    a.beta1 = j.value("beta1", a.beta1);
    a.beta2 = j.value("beta2", a.beta2);
    a.epsilon = j.value("epsilon", a.epsilon);
    config = a;
  } else if (name == "sgd") {
    SgdConfig s;
    s.lr = j.value("lr", s.lr);
    config = s;
  } else {
    throw ValidationError("unknown optimizer '" + name + "'");
  }
}

json params_to_json(const NetworkSpec& spec, const Params& params) {
  if (params.size() != spec.param_count()) {
    throw ValidationError("parameter vector does not match the network layout");
  }
  json layers = json::array();
  for (const auto& s : spec.dense_slots()) {
    json weights = json::array();
    for (std::size_t i = 0; i < s.in; ++i) {
      const auto first = params.values.begin() + static_cast<std::ptrdiff_t>(s.weight_offset + i * s.out);
      weights.push_back(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s.out)));
    }
    const auto b = params.values.begin() + static_cast<std::ptrdiff_t>(s.bias_offset);
    layers.push_back(json{{"weights", std::move(weights)},
                          {"bias", std::vector<double>(b, b + static_cast<std::ptrdiff_t>(s.out))}});
  }
  return layers;
}

Params params_from_json(const NetworkSpec& spec, const json& j) {
  const auto slots = spec.dense_slots();
  if (!j.is_array() || j.size() != slots.size()) {
    throw ValidationError("parameter block has " + std::to_string(j.is_array() ? j.size() : 0) +
                          " layers, network has " + std::to_string(slots.size()));
  }
  Params p;
  p.values.assign(spec.param_count(), 0.0);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const auto& s = slots[k];
    const auto weights = require(j[k], "weights").get<std::vector<std::vector<double>>>();
    const auto bias = require(j[k], "bias").get<std::vector<double>>();
    if (weights.size() != s.in || bias.size() != s.out) {
      throw ValidationError("layer " + std::to_string(k) + " has the wrong shape");
    }
    for (std::size_t i = 0; i < s.in; ++i) {
      if (weights[i].size() != s.out) {
        throw ValidationError("layer " + std::to_string(k) + " has the wrong shape");
      }
      for (std::size_t o = 0; o < s.out; ++o) p.values[s.weight_offset + i * s.out + o] = weights[i][o];
    }
    for (std::size_t o = 0; o < s.out; ++o) p.values[s.bias_offset + o] = bias[o];
  }
  return p;
}

}  // namespace nn

namespace model {

void to_json(json& j, const ModelSpec& spec) {
  j = json{{"layers_cov", spec.layers_cov},
           {"layers_xy", spec.layers_xy ? json(*spec.layers_xy) : json(nullptr)},
           {"xy_as_covariates", spec.xy_as_covariates},
           {"link", to_string(spec.link)},
           {"covariate_names", spec.covariate_names},
           {"pmax", spec.pmax}};
}

void from_json(const json& j, ModelSpec& spec) {
  if (!j.is_object()) throw ValidationError("model spec must be an object");
  spec.layers_cov = j.value("layers_cov", std::vector<nn::LayerSpec>{});
  if (j.contains("layers_xy") && !j.at("layers_xy").is_null()) {
    spec.layers_xy = j.at("layers_xy").get<std::vector<nn::LayerSpec>>();
  } else {
    spec.layers_xy.reset();
  }
  spec.xy_as_covariates = j.value("xy_as_covariates", false);
  spec.link = link_from_string(j.value("link", std::string("log")));
  spec.covariate_names = j.value("covariate_names", std::vector<std::string>{});
  spec.pmax = j.value("pmax", std::size_t{0});
}

void to_json(json& j, const EarlyStoppingConfig& config) {
  j = json{{"monitor", config.monitor == Monitor::loss ? "loss" : "val_loss"},
           {"min_delta", config.min_delta},
           {"patience", config.patience}};
}

void from_json(const json& j, EarlyStoppingConfig& config) {
  const auto monitor = j.value("monitor", std::string("val_loss"));
  if (monitor == "loss") {
    config.monitor = Monitor::loss;
  } else if (monitor == "val_loss") {
    config.monitor = Monitor::val_loss;
  } else {
    throw ValidationError("unknown monitor '" + monitor + "'");
  }
  config.min_delta = j.value("min_delta", config.min_delta);
  config.patience = j.value("patience", config.patience);
}

void to_json(json& j, const TrainConfig& config) {
  j = json{{"epochs", config.epochs},
           {"optimizer", config.optimizer},
           {"validation_split", config.validation_split},
           {"early_stopping", config.early_stopping ? json(*config.early_stopping) : json(nullptr)},
           {"seed", config.seed}};
}

void from_json(const json& j, TrainConfig& config) {
  if (!j.is_object()) throw ValidationError("train config must be an object");
  config.epochs = j.value("epochs", config.epochs);
  if (j.contains("optimizer")) j.at("optimizer").get_to(config.optimizer);
  config.validation_split = j.value("validation_split", config.validation_split);
  if (j.contains("early_stopping") && !j.at("early_stopping").is_null()) {
    config.early_stopping = j.at("early_stopping").get<EarlyStoppingConfig>();
  } else {
    config.early_stopping.reset();
  }
  config.seed = j.value("seed", config.seed);
}

json model_to_json(const DisaggModel& model) {
  json j;
  j["format"] = "disagg-model";
  j["version"] = 1;
  j["spec"] = model.spec;
  j["params_cov"] = nn::params_to_json(model.spec.cov_network(), model.params_cov);
  if (auto xy = model.spec.xy_network()) {
    j["params_xy"] = nn::params_to_json(*xy, *model.params_xy);
  } else {
    j["params_xy"] = nullptr;
  }
  j["normalization"] = model.norm;
  j["training"] = json{{"epochs_run", model.meta.epochs_run},
                       {"stop_reason", model.meta.stop_reason},
                       {"restored_best_weights", model.meta.restored_best_weights}};
  return j;
}

DisaggModel model_from_json(const json& j) {
  DisaggModel m;
  m.spec = require(j, "spec").get<ModelSpec>();
  m.spec.validate();
  m.params_cov = nn::params_from_json(m.spec.cov_network(), require(j, "params_cov"));
  if (auto xy = m.spec.xy_network()) m.params_xy = nn::params_from_json(*xy, require(j, "params_xy"));
  m.norm = require(j, "normalization").get<prep::NormalizationParams>();
  if (m.norm.cov_mean.size() != m.spec.n_covariates()) {
    throw ValidationError("normalization does not match the covariate count");
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    m.meta.epochs_run = t.value("epochs_run", std::size_t{0});
    m.meta.stop_reason = t.value("stop_reason", std::string("untrained"));
    m.meta.restored_best_weights = t.value("restored_best_weights", false);
  }
  return m;
}

}  // namespace model

}  // namespace disagg
