// Annealed sampling. The tempered density p(x)^gamma of a flow x = g(z) is
// sampled in latent coordinates, where its log density is
//
//   log pi(z) = gamma * log N(z; 0, I) + (1 - gamma) * log |det dg/dz|
//
// up to a constant. A multinomial No-U-Turn sampler with dual-averaging
// step-size adaptation explores that target; the model-level driver runs one
// chain per level, coarse to fine.

#ifndef WFLOW_MCMC_H_
#define WFLOW_MCMC_H_

#include <functional>
#include <vector>

#include "wflow/flow.h"
#include "wflow/model.h"
#include "wflow/rng.h"
#include "wflow/tensor.h"

namespace wflow {

struct AnnealSpec {
  double temperature = 1.0;

  static AnnealSpec FromTemperature(double t);
  double gamma() const { return 1.0 / (temperature * temperature); }
};

struct NutsConfig {
  int min_steps = 30;
  int adapt_steps = 10;
  double target_accept = 0.8;
  int max_tree_depth = 10;
  double initial_step_size = 0.1;
  uint64_t seed = 0;
};

struct DensityEval {
  double value = 0.0;
  std::vector<double> gradient;
};

// Log density (up to a constant) with its gradient at a flat position.
using LogDensity = std::function<DensityEval(const std::vector<double>& position)>;

// Tempered target of one flow in latent coordinates for a single
// conditioning plane [1, S, S, C'] (undefined for unconditional flows).
class AnnealedTarget {
 public:
  AnnealedTarget(const LevelFlow& flow, Tensor cond, Shape latent_shape, double gamma);

  DensityEval operator()(const std::vector<double>& z) const;
  const Shape& latent_shape() const { return shape_; }
  // g(z) for a flat latent position.
  Tensor Map(const std::vector<double>& z) const;

 private:
  const LevelFlow* flow_;
  Tensor cond_;
  Shape shape_;
  double gamma_;
};

// Value and gradient of the tempered target at z (a latent tensor).
DensityEval AnnealedLogDensity(const LevelFlow& flow, const Tensor& cond, double gamma, const Tensor& z);

struct PhasePoint {
  std::vector<double> position;
  std::vector<double> momentum;
  double log_density = 0.0;
  std::vector<double> gradient;
};

// Potential plus unit-mass kinetic energy.
double Hamiltonian(const PhasePoint& p);
// One velocity-Verlet step of size eps (negative eps integrates backwards).
void Leapfrog(const LogDensity& target, PhasePoint& p, double eps);

struct NutsDiagnostics {
  double step_size = 0.0;
  int divergences = 0;
  double mean_tree_depth = 0.0;
  int transitions = 0;
  double mean_accept = 0.0;
};

struct NutsResult {
  // Position after every transition (empty unless requested).
  std::vector<std::vector<double>> chain;
  // Position returned as the sample: the first move after min_steps.
  std::vector<double> sample;
  NutsDiagnostics diagnostics;
  // Step size after each transition.
  std::vector<double> step_sizes;
};

// Throws if adaptation drives the step size below 1e-10, if every
// adaptation transition diverges, or if the initial position has a
// non-finite density.
NutsResult NutsSample(const LogDensity& target, std::vector<double> init, const NutsConfig& config,
                      Rng& rng, bool keep_chain = false);

struct LevelDiagnostics {
  int level = 0;
  NutsDiagnostics nuts;
};

// Annealed detail sampler for SuperResolve; appends one record per level and
// image to `diagnostics` when non-null.
DetailSampler AnnealedSampler(const WaveletFlowModel& model, const AnnealSpec& anneal,
                              const NutsConfig& config, Rng& rng,
                              std::vector<LevelDiagnostics>* diagnostics = nullptr);

// Levelwise annealed sampling of `count` images (coefficient space).
Tensor AnnealedSampleModel(const WaveletFlowModel& model, int64_t count, const AnnealSpec& anneal,
                           const NutsConfig& config, Rng& rng,
                           std::vector<LevelDiagnostics>* diagnostics = nullptr);

}  // namespace wflow

#endif  // WFLOW_MCMC_H_
