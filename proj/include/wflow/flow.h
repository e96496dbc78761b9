// Conditional normalizing flow used for every level of the model.
//
// A LevelFlow is a stack of steps, each applying (in the forward, data to
// latent direction) actnorm, an invertible 1x1 channel mixing and a coupling
// layer. Inputs are NHWC tensors; the optional conditioning plane has the same
// batch and spatial extent and is concatenated (after normalization) to the
// input of every coupling network.

#ifndef WFLOW_FLOW_H_
#define WFLOW_FLOW_H_

#include <map>
#include <string>
#include <vector>

#include "wflow/rng.h"
#include "wflow/tensor.h"

namespace wflow {

// Named tensors in a fixed insertion order. Buffers (trainable == false) are
// persisted but never optimized.
class ParameterSet {
 public:
  int Add(std::string name, Tensor value, bool trainable);

  int size() const { return static_cast<int>(entries_.size()); }
  const std::string& name(int i) const { return entries_[i].name; }
  const Tensor& value(int i) const { return entries_[i].value; }
  const Tensor& operator[](int i) const { return entries_[i].value; }
  bool trainable(int i) const { return entries_[i].trainable; }
  // -1 if absent.
  int IndexOf(const std::string& name) const;

  // Replaces a value; the shape must not change.
  void Set(int i, Tensor value);

  // Copy whose trainable entries are leaves of `tape`.
  ParameterSet RecordOn(Tape& tape) const;

  int64_t TrainableCount() const;

 private:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable;
  };
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
};

enum class CouplingKind { kAffine, kAdditive };

std::string ToString(CouplingKind kind);
CouplingKind ParseCouplingKind(const std::string& text);

struct FlowSpec {
  int channels = 1;
  // 0 for an unconditional flow.
  int cond_channels = 0;
  int steps = 4;
  int hidden_channels = 32;
  int residual_blocks = 1;
  // Spatial kernel of the coupling-network convolutions (1 or 3).
  int kernel_size = 3;
  CouplingKind coupling = CouplingKind::kAffine;
  // The conditioning plane enters the coupling networks as cond * cond_scale - 1.
  double cond_scale = 1.0 / 128.0;
  // Nominal spatial extent of the modelled plane. Evaluation is fully
  // convolutional, so patches of other extents are accepted.
  int extent = 1;

  bool operator==(const FlowSpec&) const = default;
};

struct FlowResult {
  Tensor value;
  // Per-sample log |det|, shape [N].
  Tensor logdet;
};

class LevelFlow {
 public:
  LevelFlow() = default;
  // Builds an identity map: actnorm and mixing start at the identity and the
  // last layer of every coupling network is zero. Hidden convolutions are
  // drawn from `rng`.
  LevelFlow(FlowSpec spec, Rng& rng);

  const FlowSpec& spec() const { return spec_; }
  bool conditional() const { return spec_.cond_channels > 0; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  bool actnorm_initialized() const { return actnorm_initialized_; }
  void set_actnorm_initialized(bool value) { actnorm_initialized_ = value; }

  // Seeds every 1x1 mixing with a random rotation, stored in PLU form.
  void InitializeMixing(Rng& rng);
  // Adds N(0, scale^2) noise to every trainable parameter, including the
  // zero-initialized output layers. Used to probe non-trivial flows.
  void Randomize(Rng& rng, double scale);
  // Data-dependent actnorm initialization from a batch: each actnorm output
  // gets zero mean and unit variance per channel. Throws on a channel with
  // zero variance.
  void InitializeActnorm(const Tensor& x, const Tensor& cond = Tensor());

  // Data to latent, with the accumulated log-determinant.
  FlowResult Forward(const Tensor& x, const Tensor& cond = Tensor()) const;
  FlowResult Forward(const ParameterSet& params, const Tensor& x, const Tensor& cond) const;
  // Latent to data; logdet is log |det d(x)/d(z)|, i.e. minus the forward
  // log-determinant at the returned x. Differentiable with respect to z.
  FlowResult Inverse(const Tensor& z, const Tensor& cond = Tensor()) const;

  // Per-sample log density under a standard-normal base, shape [N].
  Tensor LogProb(const Tensor& x, const Tensor& cond = Tensor()) const;
  Tensor LogProb(const ParameterSet& params, const Tensor& x, const Tensor& cond) const;

 private:
  struct Conv {
    int weight = -1;
    int bias = -1;
  };
  struct Coupling {
    bool active = false;
    int64_t a_begin = 0, a_end = 0;
    int64_t b_begin = 0, b_end = 0;
    Conv stem;
    std::vector<std::pair<Conv, Conv>> blocks;
    Conv out;
  };
  struct Step {
    int log_scale = -1;
    int bias = -1;
    int perm = -1;
    int sign = -1;
    int lower = -1;
    int upper = -1;
    int log_diag = -1;
    Coupling coupling;
  };

  void CheckInputs(const Tensor& x, const Tensor& cond) const;
  Tensor NormalizedCond(const Tensor& cond) const;
  Tensor ConvBias(const ParameterSet& p, const Conv& conv, const Tensor& x) const;
  Tensor Network(const ParameterSet& p, const Coupling& c, const Tensor& in) const;

  Tensor ActnormForward(const ParameterSet& p, const Step& s, const Tensor& x, Tensor& logdet) const;
  Tensor MixForward(const ParameterSet& p, const Step& s, const Tensor& x, Tensor& logdet) const;
  Tensor CouplingForward(const ParameterSet& p, const Step& s, const Tensor& x, const Tensor& condn,
                         Tensor& logdet) const;
  Tensor ActnormInverse(const Step& s, const Tensor& y, Tensor& logdet) const;
  Tensor MixInverse(const Step& s, const Tensor& y, Tensor& logdet) const;
  Tensor CouplingInverse(const Step& s, const Tensor& y, const Tensor& condn, Tensor& logdet) const;

  FlowSpec spec_;
  ParameterSet params_;
  std::vector<Step> steps_;
  bool actnorm_initialized_ = false;
};

// Sum over each sample of log N(z; 0, 1), shape [N].
Tensor StandardNormalLogProb(const Tensor& z);

}  // namespace wflow

#endif  // WFLOW_FLOW_H_
