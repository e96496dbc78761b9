// The multi-scale density: a base flow over the 1x1 image I_0 and one
// conditional flow per detail level, p(I_n) = p(I_0) * prod_i p(D_i | I_i).
//
// Levels are indexed l = 0..depth: level 0 is the base flow, level l >= 1
// models D_{l-1} (spatial extent 2^{l-1}, 3C channels) given I_{l-1}.
//
// All densities are over coefficient space. For the full model this equals
// pixel space on the raw [0, 256) intensity scale. A model truncated to depth
// k < data_depth describes I_k, which is 2^{data_depth-k} times the
// box-downsampled image; the *Pixels helpers apply that rescaling.

#ifndef WFLOW_MODEL_H_
#define WFLOW_MODEL_H_

#include <functional>
#include <vector>

#include "wflow/flow.h"
#include "wflow/rng.h"
#include "wflow/tensor.h"
#include "wflow/wavelet.h"

namespace wflow {

struct LevelConfig {
  int steps = 4;
  int conv_channels = 32;
  int residual_blocks = 1;
  CouplingKind coupling = CouplingKind::kAffine;
  // Training crop extent; 0 trains on the full plane.
  int patch_size = 0;
};

struct ModelConfig {
  int depth = 0;
  int channels = 1;
  // Must hold depth + 1 entries.
  std::vector<LevelConfig> levels;
};

// Flow specification of level l for a model of the given depth.
FlowSpec LevelSpec(const ModelConfig& config, int level);

struct LogProbResult {
  // Per-image totals and per-level terms, shape [N] each; total is the sum
  // of per_level in level order.
  Tensor total;
  std::vector<Tensor> per_level;
};

class WaveletFlowModel {
 public:
  WaveletFlowModel() = default;
  // `flows` holds depth + 1 level flows; data_depth >= depth is the depth of
  // the dataset the model was built for (it fixes conditioning scales).
  WaveletFlowModel(int depth, int channels, int data_depth, std::vector<LevelFlow> flows);

  // Fresh identity model. Hidden convolutions of level l are drawn from a
  // stream derived from (seed, l) so levels can be built independently.
  static WaveletFlowModel Create(const ModelConfig& config, uint64_t seed);
  static LevelFlow CreateLevel(const ModelConfig& config, int level, uint64_t seed);

  int depth() const { return depth_; }
  int channels() const { return channels_; }
  int data_depth() const { return data_depth_; }
  int num_levels() const { return depth_ + 1; }
  int64_t dims() const;

  LevelFlow& level(int l);
  const LevelFlow& level(int l) const;

  // Images [N, S, S, C] (or one [S, S, C]) in coefficient space with
  // S == 2^depth. Evaluation runs in chunks of at most `chunk` images.
  LogProbResult LogProb(const Tensor& images, int64_t chunk = 256) const;

  // Embedded model over I_k sharing levels 0..k.
  WaveletFlowModel Truncate(int k) const;

  // Ratio between coefficients and pixels at this depth, 2^{data_depth-depth}.
  double coefficient_scale() const;

 private:
  void CheckImages(const Tensor& images) const;

  int depth_ = 0;
  int channels_ = 1;
  int data_depth_ = 0;
  std::vector<LevelFlow> flows_;
};

// Mean bits per pixel-space dimension for coefficient-space log densities
// of images at the model's depth; accounts for the coefficient scaling of
// truncated models.
double BitsPerDim(const WaveletFlowModel& model, const Tensor& log_prob);
// Per-image bits of one level term (no scaling correction).
double MeanBits(const Tensor& log_prob);

// Pixel-space images at the model's depth mapped to coefficient space.
Tensor PixelsToCoefficients(const WaveletFlowModel& model, const Tensor& pixels);
Tensor CoefficientsToPixels(const WaveletFlowModel& model, const Tensor& coefficients);

// Draws the detail plane D_{level-1} given I_{level-1} for a batch.
using DetailSampler = std::function<Tensor(int level, const Tensor& cond)>;

// Latent draws of standard deviation `temperature` pushed through the
// level inverse. Exact annealing only for constant-Jacobian levels.
DetailSampler DirectSampler(const WaveletFlowModel& model, double temperature, Rng& rng);

struct SampleResult {
  // Coefficient space, [N, S, S, C].
  Tensor images;
  // Set when temperature != 1 and some level has a non-constant Jacobian.
  bool approximate = false;
};

SampleResult SampleDirect(const WaveletFlowModel& model, int64_t count, double temperature, Rng& rng);
// Base-level draw through the inverse base flow, [N, 1, 1, C].
Tensor SampleBaseDirect(const WaveletFlowModel& model, int64_t count, double temperature, Rng& rng);

// True when every coupling in the flow is additive (logdet independent of
// the input).
bool HasConstantJacobian(const LevelFlow& flow);

// Repeatedly samples details and synthesizes from I_k (coefficient space,
// extent 2^k) up to extent 2^target.
Tensor SuperResolve(const WaveletFlowModel& model, const Tensor& image, int target,
                    const DetailSampler& sampler);

}  // namespace wflow

#endif  // WFLOW_MODEL_H_
