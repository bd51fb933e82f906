#pragma once

// JSON mappings for the library's persisted types (model files, dataset
// sidecars, hypergrids, run configs).

#include <json.hpp>

#include "disagg/data_prep.hpp"
#include "disagg/model.hpp"
#include "disagg/nn.hpp"

namespace disagg {

namespace prep {
void to_json(nlohmann::json& j, const NormalizationParams& p);
void from_json(const nlohmann::json& j, NormalizationParams& p);
}  // namespace prep

namespace nn {
void to_json(nlohmann::json& j, const LayerSpec& layer);
void from_json(const nlohmann::json& j, LayerSpec& layer);
void to_json(nlohmann::json& j, const NetworkSpec& spec);
void from_json(const nlohmann::json& j, NetworkSpec& spec);
void to_json(nlohmann::json& j, const OptimizerConfig& config);
void from_json(const nlohmann::json& j, OptimizerConfig& config);

/// Layer-by-layer nested lists: [{"weights": [[...], ...], "bias": [...]}, ...].
nlohmann::json params_to_json(const NetworkSpec& spec, const Params& params);
Params params_from_json(const NetworkSpec& spec, const nlohmann::json& j);
}  // namespace nn

namespace model {
void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);
void to_json(nlohmann::json& j, const EarlyStoppingConfig& config);
void from_json(const nlohmann::json& j, EarlyStoppingConfig& config);
void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

nlohmann::json model_to_json(const DisaggModel& model);
DisaggModel model_from_json(const nlohmann::json& j);
}  // namespace model

}  // namespace disagg
