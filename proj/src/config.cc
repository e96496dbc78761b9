#include "wflow/config.h"

#include <filesystem>
#include <fstream>
#include <set>

namespace wflow {
namespace {

using nlohmann::json;

void CheckKeys(const json& j, const std::string& section, const std::set<std::string>& allowed) {
  WFLOW_CHECK(j.is_object(), "config: " + section + " must be an object");
  for (const auto& [key, value] : j.items()) {
    WFLOW_CHECK(allowed.contains(key), "config: unknown key '" + key + "' in " + section);
  }
}

template <typename T>
void Read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error("config: " + section + "." + key + " has the wrong type");
  }
}

std::string Resolve(const std::string& base, const std::string& path) {
  if (path.empty() || base.empty()) return path;
  const std::filesystem::path p(path);
  return p.is_absolute() ? path : (std::filesystem::path(base) / p).lexically_normal().string();
}

LevelConfig ParseLevel(const json& j, const std::string& section) {
  CheckKeys(j, section, {"steps", "conv_channels", "residual_blocks", "coupling", "patch_size"});
  LevelConfig lc;
  Read(j, "steps", lc.steps, section);
  Read(j, "conv_channels", lc.conv_channels, section);
  Read(j, "residual_blocks", lc.residual_blocks, section);
  Read(j, "patch_size", lc.patch_size, section);
  std::string coupling = ToString(lc.coupling);
  Read(j, "coupling", coupling, section);
  lc.coupling = ParseCouplingKind(coupling);
  WFLOW_CHECK(lc.steps >= 1 && lc.conv_channels >= 1 && lc.residual_blocks >= 0,
              "config: " + section + " needs steps >= 1, conv_channels >= 1, residual_blocks >= 0");
  return lc;
}

}  // namespace

RunConfig ParseRunConfig(const json& j, const std::string& base_dir) {
  CheckKeys(j, "config", {"model", "train", "sample", "paths"});
  WFLOW_CHECK(j.contains("model"), "config: missing model section");
  RunConfig c;

  const json& m = j.at("model");
  CheckKeys(m, "model", {"n", "channels", "levels"});
  WFLOW_CHECK(m.contains("n") && m.contains("levels"), "config: model needs n and levels");
  Read(m, "n", c.model.depth, "model");
  Read(m, "channels", c.model.channels, "model");
  WFLOW_CHECK(c.model.depth >= 0 && c.model.depth <= 12, "config: model.n must lie in [0, 12]");
  WFLOW_CHECK(c.model.channels >= 1, "config: model.channels must be positive");
  const json& levels = m.at("levels");
  WFLOW_CHECK(levels.is_array() && levels.size() == static_cast<size_t>(c.model.depth + 1),
              "config: model.levels must list n + 1 = " + std::to_string(c.model.depth + 1) + " levels");
  for (size_t l = 0; l < levels.size(); ++l) {
    LevelConfig lc = ParseLevel(levels[l], "model.levels[" + std::to_string(l) + "]");
    const int extent = l == 0 ? 1 : 1 << (l - 1);
    if (lc.patch_size != 0) {
      WFLOW_CHECK(lc.patch_size >= 1 && lc.patch_size <= extent && extent % lc.patch_size == 0,
                  "config: level " + std::to_string(l) + " patch_size " + std::to_string(lc.patch_size) +
                      " must divide the level extent " + std::to_string(extent));
      WFLOW_CHECK(extent == 1 || lc.patch_size >= 2,
                  "config: level " + std::to_string(l) + " uses 3x3 convolutions and needs patch_size >= 2");
    }
    c.model.levels.push_back(lc);
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    CheckKeys(t, "train", {"learning_rate", "beta1", "beta2", "batch_size", "epochs",
                           "early_stop_patience", "seed"});
    Read(t, "learning_rate", c.train.learning_rate, "train");
    Read(t, "beta1", c.train.beta1, "train");
    Read(t, "beta2", c.train.beta2, "train");
    Read(t, "batch_size", c.train.batch_size, "train");
    Read(t, "epochs", c.train.epochs, "train");
    Read(t, "early_stop_patience", c.train.early_stop_patience, "train");
    Read(t, "seed", c.train.seed, "train");
  }
  WFLOW_CHECK(c.train.learning_rate > 0 && c.train.batch_size >= 1 && c.train.epochs >= 0 &&
                  c.train.early_stop_patience >= 1,
              "config: invalid train section");

  if (j.contains("sample")) {
    const json& s = j.at("sample");
    CheckKeys(s, "sample", {"temperature", "min_steps", "adapt_steps", "target_accept",
                            "max_tree_depth", "initial_step_size", "seed"});
    Read(s, "temperature", c.sample.temperature, "sample");
    Read(s, "min_steps", c.sample.nuts.min_steps, "sample");
    Read(s, "adapt_steps", c.sample.nuts.adapt_steps, "sample");
    Read(s, "target_accept", c.sample.nuts.target_accept, "sample");
    Read(s, "max_tree_depth", c.sample.nuts.max_tree_depth, "sample");
    Read(s, "initial_step_size", c.sample.nuts.initial_step_size, "sample");
    Read(s, "seed", c.sample.nuts.seed, "sample");
  }
  WFLOW_CHECK(c.sample.nuts.min_steps >= c.sample.nuts.adapt_steps, "config: sample.min_steps < adapt_steps");

  if (j.contains("paths")) {
    const json& p = j.at("paths");
    CheckKeys(p, "paths", {"train_dir", "val_dir", "checkpoint_dir"});
    Read(p, "train_dir", c.paths.train_dir, "paths");
    Read(p, "val_dir", c.paths.val_dir, "paths");
    Read(p, "checkpoint_dir", c.paths.checkpoint_dir, "paths");
  }
  c.paths.train_dir = Resolve(base_dir, c.paths.train_dir);
  c.paths.val_dir = Resolve(base_dir, c.paths.val_dir);
  c.paths.checkpoint_dir = Resolve(base_dir, c.paths.checkpoint_dir);
  return c;
}

RunConfig LoadRunConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("config " + path + " is not valid JSON: " + e.what());
  }
  return ParseRunConfig(j, std::filesystem::absolute(path).parent_path().string());
}

}  // namespace wflow
