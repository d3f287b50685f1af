#pragma once

#include "json.hpp"

#include "fsfnet/model.hpp"

namespace fsfnet {

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

}  // namespace fsfnet
