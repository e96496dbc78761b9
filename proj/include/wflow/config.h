// Run configuration read from JSON:
//
//   {
//     "model":  {"n": 4, "channels": 1,
//                "levels": [{"steps": 4, "conv_channels": 32, "residual_blocks": 1,
//                            "coupling": "affine", "patch_size": 0}, ...]},
//     "train":  {"learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.999, "batch_size": 16,
//                "epochs": 20, "early_stop_patience": 10, "seed": 0},
//     "sample": {"temperature": 1.0, "min_steps": 30, "adapt_steps": 10,
//                "target_accept": 0.8, "max_tree_depth": 10,
//                "initial_step_size": 0.1, "seed": 0},
//     "paths":  {"train_dir": "...", "val_dir": "...", "checkpoint_dir": "..."}
//   }
//
// "levels" holds n + 1 entries, index 0 being the base flow. Omitted fields
// take the defaults shown; unknown keys are rejected. Relative paths resolve
// against the directory of the config file.

#ifndef WFLOW_CONFIG_H_
#define WFLOW_CONFIG_H_

#include <string>

#include "json.hpp"
#include "wflow/mcmc.h"
#include "wflow/model.h"
#include "wflow/train.h"

namespace wflow {

struct SampleConfig {
  double temperature = 1.0;
  NutsConfig nuts;
};

struct PathsConfig {
  std::string train_dir;
  std::string val_dir;
  std::string checkpoint_dir;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SampleConfig sample;
  PathsConfig paths;
};

RunConfig ParseRunConfig(const nlohmann::json& j, const std::string& base_dir = "");
RunConfig LoadRunConfig(const std::string& path);

}  // namespace wflow

#endif  // WFLOW_CONFIG_H_
