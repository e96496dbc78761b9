// Per-level checkpoint files.
//
// Layout: the 8-byte magic "WFLOWCK\0", the header length as a little-endian
// uint64, a JSON header, then every parameter as little-endian float64 in
// manifest order. The header records the format version, model metadata,
// the level index, the flow specification, free-form training provenance and
// a manifest mapping parameter names to shapes and payload byte offsets.

#ifndef WFLOW_CHECKPOINT_H_
#define WFLOW_CHECKPOINT_H_

#include <string>

#include "json.hpp"
#include "wflow/flow.h"
#include "wflow/model.h"

namespace wflow {

inline constexpr int kCheckpointVersion = 1;

struct ModelMeta {
  int depth = 0;
  int channels = 1;
  int data_depth = 0;

  bool operator==(const ModelMeta&) const = default;
};

struct LevelCheckpoint {
  ModelMeta model;
  int level = 0;
  LevelFlow flow;
  nlohmann::json training = nlohmann::json::object();
};

std::string EncodeCheckpoint(const LevelCheckpoint& ckpt);
LevelCheckpoint DecodeCheckpoint(const std::string& bytes);

void SaveCheckpoint(const LevelCheckpoint& ckpt, const std::string& path);
LevelCheckpoint LoadCheckpoint(const std::string& path);

// "level_<l>.wfck"
std::string LevelFileName(int level);

// Writes one file per level into `dir` (created if needed).
void SaveModel(const WaveletFlowModel& model, const std::string& dir,
               const nlohmann::json& training = nlohmann::json::object());
// Assembles a model from level_0 .. level_depth; metadata must agree.
WaveletFlowModel LoadModel(const std::string& dir);

ModelMeta MetaOf(const WaveletFlowModel& model);

}  // namespace wflow

#endif  // WFLOW_CHECKPOINT_H_
