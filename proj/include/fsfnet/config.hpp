#pragma once

#include <string>

#include "json.hpp"

#include "fsfnet/data.hpp"
#include "fsfnet/model.hpp"
#include "fsfnet/train.hpp"

namespace fsfnet {

// One experiment described by a single flat JSON document. Model, training,
// and scene settings share the document's top level; `num_classes` is one
// shared key feeding both the model and the scene generator.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  SceneConfig scene;
  int scene_count = 80;       // synthesized when data_dir is empty
  double val_fraction = 0.2;  // held-out share, selected by index hash
  std::string data_dir;       // load from disk instead of synthesizing
  std::string out_dir = "runs/default";

  void validate() const;
};

// Reads a flat JSON object; missing keys keep their defaults, unknown keys
// are rejected by name. When "input_size" is absent it follows the training
// resolution (crop_size if set, else the scene's image_size).
ExperimentConfig experiment_from_json(const nlohmann::json& flat);

// Emits every key, so dump -> parse -> dump is stable.
nlohmann::json experiment_to_json(const ExperimentConfig& cfg);

ExperimentConfig load_experiment_config(const std::string& path);

// Applies one "key=value" assignment onto the flat document. The value is
// parsed as JSON (numbers, booleans, arrays, quoted strings); anything that
// does not parse is taken as a bare string.
void apply_override(nlohmann::json& flat, const std::string& assignment);

}  // namespace fsfnet
