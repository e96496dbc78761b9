#include "wflow/mcmc.h"

#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "wflow/ops.h"
#include "wflow/wavelet.h"

namespace wflow {
namespace {

using Vec = std::vector<double>;

constexpr double kMaxEnergyError = 1000.0;
constexpr double kMinStepSize = 1e-10;
// Bound on the extra transitions spent waiting for the chain to move.
constexpr int kMaxExtraTransitions = 1000;

double Dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void AddTo(Vec& a, const Vec& b) {
  for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

Vec Plus(const Vec& a, const Vec& b) {
  Vec out = a;
  AddTo(out, b);
  return out;
}

double LogSumExp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Both ends of a trajectory keep moving apart along the summed momentum.
bool NoUTurn(const Vec& p_minus, const Vec& p_plus, const Vec& rho) {
  return Dot(p_plus, rho) > 0.0 && Dot(p_minus, rho) > 0.0;
}

void Evaluate(const LogDensity& target, PhasePoint& p) {
  DensityEval e = target(p.position);
  p.log_density = e.value;
  p.gradient = std::move(e.gradient);
}

// Multinomial NUTS transition with the additional U-turn checks across
// subtree boundaries.
class Transition {
 public:
  Transition(const LogDensity& target, double eps, int max_depth, Rng& rng)
      : target_(target), eps_(eps), max_depth_(max_depth), rng_(rng) {}

  PhasePoint Run(const PhasePoint& start) {
    PhasePoint z0 = start;
    for (double& r : z0.momentum) r = rng_.Normal();
    h0_ = Hamiltonian(z0);

    PhasePoint fwd = z0, bck = z0, sample = z0;
    Vec p_fwd_fwd = z0.momentum, p_fwd_bck = z0.momentum;
    Vec p_bck_fwd = z0.momentum, p_bck_bck = z0.momentum;
    Vec rho = z0.momentum;
    double log_sum_weight = 0.0;
    const size_t dim = z0.position.size();

    while (depth_ < max_depth_) {
      Vec rho_fwd(dim, 0.0), rho_bck(dim, 0.0);
      double log_sum_weight_subtree = -std::numeric_limits<double>::infinity();
      PhasePoint propose;
      bool valid = false;
      if (rng_.Uniform() > 0.5) {
        rho_bck = rho;
        p_bck_fwd = p_fwd_bck;
        PhasePoint edge = fwd;
        valid = BuildTree(depth_, edge, propose, p_fwd_bck, p_fwd_fwd, rho_fwd, log_sum_weight_subtree, 1.0);
        fwd = std::move(edge);
      } else {
        rho_fwd = rho;
        p_fwd_bck = p_bck_fwd;
        PhasePoint edge = bck;
        valid = BuildTree(depth_, edge, propose, p_bck_fwd, p_bck_bck, rho_bck, log_sum_weight_subtree, -1.0);
        bck = std::move(edge);
      }
      if (!valid) break;
      ++depth_;

      // Biased progressive sampling favours the new subtree.
      if (log_sum_weight_subtree > log_sum_weight) {
        sample = propose;
      } else if (rng_.Uniform() < std::exp(log_sum_weight_subtree - log_sum_weight)) {
        sample = propose;
      }
      log_sum_weight = LogSumExp(log_sum_weight, log_sum_weight_subtree);

      rho = Plus(rho_bck, rho_fwd);
      bool persist = NoUTurn(p_bck_bck, p_fwd_fwd, rho);
      persist = persist && NoUTurn(p_bck_bck, p_fwd_bck, Plus(rho_bck, p_fwd_bck));
      persist = persist && NoUTurn(p_bck_fwd, p_fwd_fwd, Plus(rho_fwd, p_bck_fwd));
      if (!persist) break;
    }
    return sample;
  }

  int depth() const { return depth_; }
  bool divergent() const { return divergent_; }
  double accept_stat() const { return n_leapfrog_ > 0 ? sum_metro_prob_ / n_leapfrog_ : 0.0; }

 private:
  // Extends the trajectory from `edge` by 2^depth leapfrog steps in
  // direction `sign`. `edge` is left at the new outer end.
  bool BuildTree(int depth, PhasePoint& edge, PhasePoint& propose, Vec& p_beg, Vec& p_end, Vec& rho,
                 double& log_sum_weight, double sign) {
    if (depth == 0) {
      Leapfrog(target_, edge, sign * eps_);
      ++n_leapfrog_;
      double h = Hamiltonian(edge);
      if (std::isnan(h)) h = std::numeric_limits<double>::infinity();
      if (h - h0_ > kMaxEnergyError) divergent_ = true;
      log_sum_weight = LogSumExp(log_sum_weight, h0_ - h);
      sum_metro_prob_ += h0_ - h > 0.0 ? 1.0 : std::exp(h0_ - h);
      propose = edge;
      p_beg = edge.momentum;
      p_end = edge.momentum;
      AddTo(rho, edge.momentum);
      return !divergent_;
    }
    const size_t dim = edge.position.size();

    double log_sum_weight_init = -std::numeric_limits<double>::infinity();
    Vec p_init_end, rho_init(dim, 0.0);
    if (!BuildTree(depth - 1, edge, propose, p_beg, p_init_end, rho_init, log_sum_weight_init, sign)) {
      return false;
    }

    PhasePoint propose_final;
    double log_sum_weight_final = -std::numeric_limits<double>::infinity();
    Vec p_final_beg, rho_final(dim, 0.0);
    if (!BuildTree(depth - 1, edge, propose_final, p_final_beg, p_end, rho_final, log_sum_weight_final,
                   sign)) {
      return false;
    }

    // Uniform multinomial choice between the two halves.
    const double log_sum_weight_subtree = LogSumExp(log_sum_weight_init, log_sum_weight_final);
    log_sum_weight = LogSumExp(log_sum_weight, log_sum_weight_subtree);
    if (log_sum_weight_final > log_sum_weight_subtree) {
      propose = std::move(propose_final);
    } else if (rng_.Uniform() < std::exp(log_sum_weight_final - log_sum_weight_subtree)) {
      propose = std::move(propose_final);
    }

    const Vec rho_subtree = Plus(rho_init, rho_final);
    AddTo(rho, rho_subtree);
    bool persist = NoUTurn(p_beg, p_end, rho_subtree);
    persist = persist && NoUTurn(p_beg, p_final_beg, Plus(rho_init, p_final_beg));
    persist = persist && NoUTurn(p_init_end, p_end, Plus(rho_final, p_init_end));
    return persist;
  }

  const LogDensity& target_;
  double eps_;
  int max_depth_;
  Rng& rng_;
  double h0_ = 0.0;
  int depth_ = 0;
  bool divergent_ = false;
  int n_leapfrog_ = 0;
  double sum_metro_prob_ = 0.0;
};

// Nesterov dual averaging of log step size.
class DualAveraging {
 public:
  DualAveraging(double eps0, double target) : mu_(std::log(10.0 * eps0)), target_(target) {}

  double Update(double accept_stat) {
    ++count_;
    const double stat = std::min(1.0, accept_stat);
    const double eta = 1.0 / (count_ + kT0);
    s_bar_ = (1.0 - eta) * s_bar_ + eta * (target_ - stat);
    const double x = mu_ - s_bar_ * std::sqrt(static_cast<double>(count_)) / kGamma;
    const double w = std::pow(static_cast<double>(count_), -kKappa);
    x_bar_ = (1.0 - w) * x_bar_ + w * x;
    return std::exp(x);
  }
  double Final() const { return std::exp(x_bar_); }

 private:
  static constexpr double kGamma = 0.05;
  static constexpr double kT0 = 10.0;
  static constexpr double kKappa = 0.75;
  double mu_;
  double target_;
  double s_bar_ = 0.0;
  double x_bar_ = 0.0;
  int count_ = 0;
};

Tensor StandardNormalTensor(const Shape& shape, double stddev, Rng& rng) {
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = stddev * rng.Normal();
  return Tensor(shape, std::move(v));
}

}  // namespace

AnnealSpec AnnealSpec::FromTemperature(double t) {
  WFLOW_CHECK(t > 0.0 && t <= 1.0, "temperature must lie in (0, 1], got " + std::to_string(t));
  return AnnealSpec{t};
}

DensityEval AnnealedLogDensity(const LevelFlow& flow, const Tensor& cond, double gamma, const Tensor& z) {
  Tape tape;
  const Tensor zl = tape.leaf(z);
  const FlowResult x = flow.Inverse(zl, cond);
  Tensor value = ops::Scale(ops::Sum(StandardNormalLogProb(zl)), gamma);
  if (gamma != 1.0) value = ops::Add(value, ops::Scale(ops::Sum(x.logdet), 1.0 - gamma));
  const Gradients grads = tape.backward(value);
  return {value.item(), grads.of(zl).to_vector()};
}

AnnealedTarget::AnnealedTarget(const LevelFlow& flow, Tensor cond, Shape latent_shape, double gamma)
    : flow_(&flow), cond_(std::move(cond)), shape_(std::move(latent_shape)), gamma_(gamma) {
  WFLOW_CHECK(shape_.size() == 4 && shape_[0] == 1, "annealed target expects a single latent [1,S,S,C]");
  WFLOW_CHECK(gamma_ > 0.0, "annealing exponent must be positive");
}

DensityEval AnnealedTarget::operator()(const std::vector<double>& z) const {
  DensityEval e = AnnealedLogDensity(*flow_, cond_, gamma_, Tensor(shape_, z));
  bool finite = std::isfinite(e.value);
  for (double g : e.gradient) finite = finite && std::isfinite(g);
  // Reported as a divergence by the sampler.
  if (!finite) e.value = -std::numeric_limits<double>::infinity();
  return e;
}

Tensor AnnealedTarget::Map(const std::vector<double>& z) const {
  return flow_->Inverse(Tensor(shape_, z), cond_).value;
}

double Hamiltonian(const PhasePoint& p) {
  return -p.log_density + 0.5 * Dot(p.momentum, p.momentum);
}

void Leapfrog(const LogDensity& target, PhasePoint& p, double eps) {
  const size_t n = p.position.size();
  for (size_t i = 0; i < n; ++i) p.momentum[i] += 0.5 * eps * p.gradient[i];
  for (size_t i = 0; i < n; ++i) p.position[i] += eps * p.momentum[i];
  Evaluate(target, p);
  for (size_t i = 0; i < n; ++i) p.momentum[i] += 0.5 * eps * p.gradient[i];
}

NutsResult NutsSample(const LogDensity& target, std::vector<double> init, const NutsConfig& config,
                      Rng& rng, bool keep_chain) {
  WFLOW_CHECK(config.min_steps >= 1 && config.adapt_steps >= 0 && config.min_steps >= config.adapt_steps,
              "NUTS needs min_steps >= adapt_steps >= 0 and min_steps >= 1");
  WFLOW_CHECK(config.max_tree_depth >= 1, "max tree depth must be positive");
  WFLOW_CHECK(config.initial_step_size > 0.0, "initial step size must be positive");
  WFLOW_CHECK(config.target_accept > 0.0 && config.target_accept < 1.0, "target accept must lie in (0, 1)");

  PhasePoint current;
  current.position = std::move(init);
  current.momentum.assign(current.position.size(), 0.0);
  Evaluate(target, current);
  WFLOW_CHECK(std::isfinite(current.log_density), "NUTS initial position has non-finite density");

  NutsResult result;
  double eps = config.initial_step_size;
  DualAveraging adapt(eps, config.target_accept);
  double depth_sum = 0.0, accept_sum = 0.0;
  int adapt_divergences = 0;
  int t = 0;
  for (;; ++t) {
    Transition transition(target, eps, config.max_tree_depth, rng);
    PhasePoint next = transition.Run(current);
    const bool moved = next.position != current.position;
    current = std::move(next);

    depth_sum += transition.depth();
    accept_sum += transition.accept_stat();
    if (transition.divergent()) ++result.diagnostics.divergences;
    if (t < config.adapt_steps) {
      if (transition.divergent()) ++adapt_divergences;
      eps = adapt.Update(transition.accept_stat());
      if (t + 1 == config.adapt_steps) eps = adapt.Final();
      if (!(eps >= kMinStepSize)) {
        throw Error("NUTS step size adaptation collapsed to " + std::to_string(eps) + " after " +
                    std::to_string(t + 1) + " transitions (every trajectory diverged)");
      }
      if (t + 1 == config.adapt_steps && adapt_divergences == config.adapt_steps) {
        throw Error("NUTS adaptation failed: all " + std::to_string(adapt_divergences) +
                    " adaptation transitions diverged (final step size " + std::to_string(eps) + ")");
      }
    }
    result.step_sizes.push_back(eps);
    if (keep_chain) result.chain.push_back(current.position);
    if (t + 1 > config.min_steps && moved) break;
    if (t + 1 >= config.min_steps + kMaxExtraTransitions) break;
  }
  result.sample = current.position;
  result.diagnostics.transitions = t + 1;
  result.diagnostics.step_size = eps;
  result.diagnostics.mean_tree_depth = depth_sum / (t + 1);
  result.diagnostics.mean_accept = accept_sum / (t + 1);
  return result;
}

DetailSampler AnnealedSampler(const WaveletFlowModel& model, const AnnealSpec& anneal,
                              const NutsConfig& config, Rng& rng,
                              std::vector<LevelDiagnostics>* diagnostics) {
  return [&model, anneal, config, &rng, diagnostics](int level, const Tensor& cond) {
    const LevelFlow& flow = model.level(level);
    const int64_t count = cond.dim(0);
    std::vector<Tensor> outputs;
    for (int64_t b = 0; b < count; ++b) {
      const Tensor c = ops::SliceBatch(cond, b, b + 1);
      const Shape shape = {1, cond.dim(1), cond.dim(2), flow.spec().channels};
      AnnealedTarget target(flow, c, shape, anneal.gamma());
      const Tensor init = StandardNormalTensor(shape, anneal.temperature, rng);
      const NutsResult r = NutsSample(std::cref(target), init.to_vector(), config, rng);
      if (diagnostics) diagnostics->push_back({level, r.diagnostics});
      outputs.push_back(target.Map(r.sample));
    }
    return ops::ConcatBatch(outputs);
  };
}

Tensor AnnealedSampleModel(const WaveletFlowModel& model, int64_t count, const AnnealSpec& anneal,
                           const NutsConfig& config, Rng& rng, std::vector<LevelDiagnostics>* diagnostics) {
  WFLOW_CHECK(count >= 1, "sample count must be positive");
  const LevelFlow& base = model.level(0);
  const Shape shape = {1, 1, 1, model.channels()};
  AnnealedTarget target(base, Tensor(), shape, anneal.gamma());
  const DetailSampler detail = AnnealedSampler(model, anneal, config, rng, diagnostics);
  std::vector<Tensor> images;
  for (int64_t b = 0; b < count; ++b) {
    const Tensor init = StandardNormalTensor(shape, anneal.temperature, rng);
    const NutsResult r = NutsSample(std::cref(target), init.to_vector(), config, rng);
    if (diagnostics) diagnostics->push_back({0, r.diagnostics});
    images.push_back(SuperResolve(model, target.Map(r.sample), model.depth(), detail));
  }
  return ops::ConcatBatch(images);
}

}  // namespace wflow
