// Per-level maximum-likelihood training: dequantization, aligned patch
// crops, the Adamax optimizer and an early-stopped epoch loop.

#ifndef WFLOW_TRAIN_H_
#define WFLOW_TRAIN_H_

#include <functional>
#include <string>
#include <vector>

#include "wflow/flow.h"
#include "wflow/rng.h"
#include "wflow/tensor.h"

namespace wflow {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch_size = 16;
  int epochs = 20;
  int early_stop_patience = 10;
  uint64_t seed = 0;
  // Add U[0,1) noise to the training images each epoch. Disable for data
  // that is already continuous.
  bool dequantize = true;
};

// x + u with u ~ U[0,1) per element.
Tensor Dequantize(const Tensor& image, Rng& rng);
// For an image at extent 2^k taken from a dataset of depth n: returns the
// coefficient-space plane 2^{n-k} * image + lowpass_to_level(u, k), u uniform
// noise at extent 2^n.
Tensor DequantizeFiltered(const Tensor& image, int n, Rng& rng);

struct LevelData {
  Tensor x;
  // Undefined for the base level.
  Tensor cond;
};

// Training pairs of level l (see model.h for the indexing) from
// coefficient-space images [N, S, S, C].
LevelData ExtractLevel(const Tensor& images, int level);

// Per-sample crops of extent `patch` at offsets drawn uniformly from the
// patch grid; x and cond are cropped at the same offset.
LevelData ExtractPatches(const LevelData& data, int patch, Rng& rng);

class Adamax {
 public:
  explicit Adamax(const TrainConfig& config);

  // One update of every trainable entry; grads[i] is ignored for buffers.
  // Throws on a non-finite gradient.
  void Step(ParameterSet& params, const std::vector<Tensor>& grads);
  int64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, u_;
};

struct TrainHistory {
  // Negative log-likelihood per dimension in nats.
  double initial_val_nll = 0.0;
  std::vector<double> train_nll;
  std::vector<double> val_nll;
  // Epoch (0-based) whose parameters were kept.
  int best_epoch = -1;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(int level, int epoch, double train_nll, double val_nll)>;

// Trains `flow` as level `level` on raw images [N, S, S, C]; the validation
// images are dequantized once with fixed noise. patch_size == 0 trains on
// full planes. Leaves the best-validation parameters in `flow`.
TrainHistory TrainLevel(LevelFlow& flow, int level, const Tensor& train_images,
                        const Tensor& val_images, const TrainConfig& config, int patch_size = 0,
                        const EpochCallback& on_epoch = nullptr);

// Mean NLL per dimension (nats) of level data under `flow`.
double LevelNll(const LevelFlow& flow, const LevelData& data, int64_t chunk = 256);

}  // namespace wflow

#endif  // WFLOW_TRAIN_H_
