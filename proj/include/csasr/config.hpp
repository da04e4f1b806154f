#pragma once

#include <map>
#include <string>

#include "csasr/trainer.hpp"

namespace csasr {

/// Everything a run needs: model + training hyperparameters and the
/// dataset root, assembled from a flat `key = value` file plus
/// `--set key=value` overrides (overrides win).
struct RunConfig {
    ModelConfig model = toy_model_config();
    TrainConfig train;
    std::string data_root;
};

using KeyValues = std::map<std::string, std::string>;

/// Parses `key = value` lines; blank lines and #-comments are ignored.
KeyValues parse_config_file(const std::string& path);

/// Parses one `key=value` override.
void apply_override(KeyValues& kv, const std::string& assignment);

/// Builds a RunConfig, rejecting unknown keys by name.
RunConfig make_run_config(const KeyValues& kv);

}  // namespace csasr
