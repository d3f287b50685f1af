#include "fsfnet/serde.hpp"

namespace fsfnet {

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"num_layers", cfg.num_layers},
                     {"channel_widths", cfg.channel_widths},
                     {"num_classes", cfg.num_classes},
                     {"use_scrf", cfg.use_scrf},
                     {"use_dfp", cfg.use_dfp},
                     {"input_size", cfg.input_size}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  j.at("num_layers").get_to(cfg.num_layers);
  j.at("channel_widths").get_to(cfg.channel_widths);
  j.at("num_classes").get_to(cfg.num_classes);
  j.at("use_scrf").get_to(cfg.use_scrf);
  j.at("use_dfp").get_to(cfg.use_dfp);
  j.at("input_size").get_to(cfg.input_size);
}

}  // namespace fsfnet
