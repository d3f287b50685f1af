#include "fsfnet/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <vector>

namespace fsfnet {

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  scene.validate();
  if (model.num_classes != scene.num_classes) {
    fail("ExperimentConfig: num_classes is one shared key; model (" +
         std::to_string(model.num_classes) + ") and scene (" +
         std::to_string(scene.num_classes) + ") disagree");
  }
  if (scene_count < 1) {
    fail("ExperimentConfig: scene_count must be >= 1");
  }
  if (val_fraction < 0.0 || val_fraction > 1.0) {
    fail("ExperimentConfig: val_fraction must lie in [0, 1]");
  }
}

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      // model
      "num_layers", "channel_widths", "use_scrf", "use_dfp", "input_size",
      // shared
      "num_classes",
      // training
      "lr_init", "lr_power", "lr_schedule", "epoch_length", "momentum",
      "weight_decay", "batch_size", "max_steps", "lambda", "crop_size",
      "seed", "use_flip", "checkpoint_every", "eval_every",
      // scene generation
      "image_size", "min_shapes", "max_shapes", "depth_min", "depth_max",
      "rgb_noise_sigma", "scene_seed", "scene_count",
      // experiment plumbing
      "val_fraction", "data_dir", "out_dir"};
  return keys;
}

template <typename T>
void read_key(const nlohmann::json& flat, const char* key, T& into) {
  const auto it = flat.find(key);
  if (it == flat.end()) return;
  try {
    into = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("config key \"") + key + "\": " + e.what());
  }
}

}  // namespace

ExperimentConfig experiment_from_json(const nlohmann::json& flat) {
  if (!flat.is_object()) {
    fail("experiment config must be a JSON object of flat keys");
  }
  for (const auto& [key, value] : flat.items()) {
    if (!known_keys().count(key)) {
      fail("unknown config key \"" + key + "\"");
    }
  }

  ExperimentConfig cfg;
  read_key(flat, "num_layers", cfg.model.num_layers);
  read_key(flat, "channel_widths", cfg.model.channel_widths);
  read_key(flat, "use_scrf", cfg.model.use_scrf);
  read_key(flat, "use_dfp", cfg.model.use_dfp);

  read_key(flat, "lr_init", cfg.train.lr_init);
  read_key(flat, "lr_power", cfg.train.lr_power);
  read_key(flat, "lr_schedule", cfg.train.lr_schedule);
  read_key(flat, "epoch_length", cfg.train.epoch_length);
  read_key(flat, "momentum", cfg.train.momentum);
  read_key(flat, "weight_decay", cfg.train.weight_decay);
  read_key(flat, "batch_size", cfg.train.batch_size);
  read_key(flat, "max_steps", cfg.train.max_steps);
  if (flat.contains("lambda")) {
    std::vector<double> lambda;
    read_key(flat, "lambda", lambda);
    if (lambda.size() != 3) {
      fail("config key \"lambda\": expected exactly 3 weights, got " +
           std::to_string(lambda.size()));
    }
    std::copy(lambda.begin(), lambda.end(), cfg.train.lambda.begin());
  }
  read_key(flat, "crop_size", cfg.train.crop_size);
  read_key(flat, "seed", cfg.train.seed);
  read_key(flat, "use_flip", cfg.train.use_flip);
  read_key(flat, "checkpoint_every", cfg.train.checkpoint_every);
  read_key(flat, "eval_every", cfg.train.eval_every);

  read_key(flat, "image_size", cfg.scene.image_size);
  read_key(flat, "min_shapes", cfg.scene.min_shapes);
  read_key(flat, "max_shapes", cfg.scene.max_shapes);
  read_key(flat, "depth_min", cfg.scene.depth_min);
  read_key(flat, "depth_max", cfg.scene.depth_max);
  read_key(flat, "rgb_noise_sigma", cfg.scene.rgb_noise_sigma);
  read_key(flat, "scene_seed", cfg.scene.seed);
  read_key(flat, "scene_count", cfg.scene_count);

  int num_classes = 6;
  read_key(flat, "num_classes", num_classes);
  cfg.model.num_classes = num_classes;
  cfg.scene.num_classes = num_classes;

  if (flat.contains("input_size")) {
    read_key(flat, "input_size", cfg.model.input_size);
  } else {
    cfg.model.input_size =
        cfg.train.crop_size > 0 ? cfg.train.crop_size : cfg.scene.image_size;
  }

  read_key(flat, "val_fraction", cfg.val_fraction);
  read_key(flat, "data_dir", cfg.data_dir);
  read_key(flat, "out_dir", cfg.out_dir);
  return cfg;
}

nlohmann::json experiment_to_json(const ExperimentConfig& cfg) {
  nlohmann::json flat;
  flat["num_layers"] = cfg.model.num_layers;
  flat["channel_widths"] = cfg.model.channel_widths;
  flat["use_scrf"] = cfg.model.use_scrf;
  flat["use_dfp"] = cfg.model.use_dfp;
  flat["input_size"] = cfg.model.input_size;
  flat["num_classes"] = cfg.model.num_classes;

  flat["lr_init"] = cfg.train.lr_init;
  flat["lr_power"] = cfg.train.lr_power;
  flat["lr_schedule"] = cfg.train.lr_schedule;
  flat["epoch_length"] = cfg.train.epoch_length;
  flat["momentum"] = cfg.train.momentum;
  flat["weight_decay"] = cfg.train.weight_decay;
  flat["batch_size"] = cfg.train.batch_size;
  flat["max_steps"] = cfg.train.max_steps;
  flat["lambda"] = cfg.train.lambda;
  flat["crop_size"] = cfg.train.crop_size;
  flat["seed"] = cfg.train.seed;
  flat["use_flip"] = cfg.train.use_flip;
  flat["checkpoint_every"] = cfg.train.checkpoint_every;
  flat["eval_every"] = cfg.train.eval_every;

  flat["image_size"] = cfg.scene.image_size;
  flat["min_shapes"] = cfg.scene.min_shapes;
  flat["max_shapes"] = cfg.scene.max_shapes;
  flat["depth_min"] = cfg.scene.depth_min;
  flat["depth_max"] = cfg.scene.depth_max;
  flat["rgb_noise_sigma"] = cfg.scene.rgb_noise_sigma;
  flat["scene_seed"] = cfg.scene.seed;
  flat["scene_count"] = cfg.scene_count;

  flat["val_fraction"] = cfg.val_fraction;
  flat["data_dir"] = cfg.data_dir;
  flat["out_dir"] = cfg.out_dir;
  return flat;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open config file " + path);
  nlohmann::json flat;
  try {
    in >> flat;
  } catch (const nlohmann::json::exception& e) {
    fail("config file " + path + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(flat);
}

void apply_override(nlohmann::json& flat, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    fail("override \"" + assignment + "\" is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  if (!known_keys().count(key)) {
    fail("unknown config key \"" + key + "\"");
  }
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) {
    value = raw;  // bare word: treat as a string (e.g. lr_schedule=epoch)
  }
  flat[key] = value;
}

}  // namespace fsfnet
