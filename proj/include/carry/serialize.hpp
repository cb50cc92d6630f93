#pragma once

#include <string>

#include "json.hpp"

#include "carry/model.hpp"
#include "carry/optim.hpp"
#include "carry/training.hpp"

namespace carry {

using json = nlohmann::json;

json to_json(const model::ModelConfig& c);
model::ModelConfig model_config_from_json(const json& j);
json to_json(const AdamWConfig& c);
AdamWConfig adamw_config_from_json(const json& j);
json to_json(const training::TrainConfig& c);
training::TrainConfig train_config_from_json(const json& j);
json to_json(const training::TaskAccuracyTable& t);

// FNV-1a over bytes, rendered as 16 hex digits.
std::string content_hash(std::string_view bytes);

}  // namespace carry
