// Acceptance gate: runs every criterion at its stated tolerance and prints
// one PASS/FAIL line per criterion. Exits nonzero if any criterion fails.
//
//   wflow_acceptance [--workdir DIR] [--only 1,6,7]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "test_util.h"
#include "wflow/checkpoint.h"
#include "wflow/config.h"
#include "wflow/image_io.h"
#include "wflow/mcmc.h"
#include "wflow/model.h"
#include "wflow/ops.h"
#include "wflow/synthetic.h"
#include "wflow/train.h"
#include "wflow/wavelet.h"

#ifndef WFLOW_CLI_PATH
#error "WFLOW_CLI_PATH must name the wflow binary"
#endif

namespace wflow {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using testing::MaxAbsDiff;
using testing::RandomTensor;
using testing::RelErr;
using testing::SmallConfig;

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string Fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, v);
  return buf;
}

std::string Sci(double v) { return Fmt("%.2e", v); }

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

bool SameParameters(const ParameterSet& a, const ParameterSet& b) {
  if (a.size() != b.size()) return false;
  for (int i = 0; i < a.size(); ++i) {
    if (a.name(i) != b.name(i) || a[i].shape() != b[i].shape() || a[i].to_vector() != b[i].to_vector()) {
      return false;
    }
  }
  return true;
}

bool SameModel(const WaveletFlowModel& a, const WaveletFlowModel& b) {
  if (a.depth() != b.depth() || a.channels() != b.channels()) return false;
  for (int l = 0; l <= a.depth(); ++l) {
    if (!SameParameters(a.level(l).parameters(), b.level(l).parameters())) return false;
  }
  return true;
}

LevelFlow RandomFlow(const FlowSpec& spec, uint64_t seed, double scale) {
  Rng rng(seed);
  LevelFlow flow(spec, rng);
  flow.InitializeMixing(rng);
  flow.Randomize(rng, scale);
  return flow;
}

WaveletFlowModel RandomModel(const ModelConfig& config, uint64_t seed, double scale) {
  WaveletFlowModel model = WaveletFlowModel::Create(config, seed);
  testing::RandomizeModel(model, seed, scale);
  return model;
}

std::vector<double> Column(const std::vector<std::vector<double>>& rows, size_t i) {
  std::vector<double> col;
  for (const auto& r : rows) col.push_back(r[i]);
  return col;
}

double SumLogNormal(const Tensor& z) {
  double s = 0.0;
  for (double v : z.data()) s += -0.5 * v * v - kHalfLog2Pi;
  return s;
}

// Shared state: the desk-scale model trained for criterion 6 is reused by
// later criteria.
struct Context {
  std::string workdir;
  RunConfig desk;
  Tensor train, val;
  Tensor val_deq;
  std::optional<WaveletFlowModel> desk_model;
  double desk_train_seconds = 0.0;
};

RunConfig DeskConfig() {
  RunConfig config;
  config.model.depth = 4;
  config.model.channels = 1;
  LevelConfig level;
  level.steps = 4;
  level.conv_channels = 16;
  level.residual_blocks = 1;
  level.coupling = CouplingKind::kAffine;
  config.model.levels.assign(5, level);
  config.train.learning_rate = 2e-3;
  config.train.batch_size = 16;
  config.train.epochs = 30;
  config.train.early_stop_patience = 10;
  config.train.seed = 6;
  return config;
}

void LoadDeskCorpus(Context& ctx) {
  if (ctx.train.defined()) return;
  ctx.desk = DeskConfig();
  SyntheticOptions opts;
  opts.extent = 16;
  ctx.train = SyntheticImages(2000, 601, opts);
  ctx.val = SyntheticImages(200, 602, opts);
  Rng rng(603);
  ctx.val_deq = Dequantize(ctx.val, rng);
}

// Trains every level of the desk model in turn.
void EnsureDeskModel(Context& ctx) {
  LoadDeskCorpus(ctx);
  if (ctx.desk_model) return;
  const Stopwatch clock;
  std::vector<LevelFlow> flows;
  for (int l = 0; l <= ctx.desk.model.depth; ++l) {
    LevelFlow flow = WaveletFlowModel::CreateLevel(ctx.desk.model, l, ctx.desk.train.seed);
    const TrainHistory h = TrainLevel(flow, l, ctx.train, ctx.val, ctx.desk.train, 0);
    std::cerr << "  level " << l << ": " << h.val_nll.size() << " epochs, best val nll "
              << h.val_nll[h.best_epoch] << " nats/dim, " << Fmt("%.1f", clock.seconds()) << " s\n";
    flows.push_back(std::move(flow));
  }
  ctx.desk_train_seconds = clock.seconds();
  ctx.desk_model = WaveletFlowModel(ctx.desk.model.depth, 1, ctx.desk.model.depth, std::move(flows));
}

// ---- 1 ----

Outcome TransformExactness(Context&) {
  const Stopwatch clock;
  Rng rng(101);
  double worst = 0.0;
  bool counts = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t extent = int64_t{1} << rng.UniformInt(6);
    const int64_t channels = 1 + static_cast<int64_t>(rng.UniformInt(3));
    const Tensor image = RandomTensor({extent, extent, channels}, rng, 0.0, 256.0);
    const wavelet::WaveletPyramid pyr = wavelet::BuildPyramid(image);
    int64_t coefficients = pyr.base.numel();
    for (const Tensor& d : pyr.details) coefficients += d.numel();
    counts = counts && coefficients == image.numel();
    worst = std::max(worst, MaxAbsDiff(wavelet::CollapsePyramid(pyr), image));
  }
  const double secs = clock.seconds();
  return {worst < 1e-10 && counts && secs < 10.0,
          "max abs error " + Sci(worst) + ", coefficient counts " + (counts ? "exact" : "WRONG") + ", " +
              Fmt("%.2f", secs) + " s"};
}

// ---- 2 ----

Outcome UnitDeterminant(Context&) {
  Rng rng(201);
  const Tensor image = RandomTensor({4, 4, 1}, rng, 0.0, 256.0);
  auto flat = [](const Tensor& x) {
    const wavelet::WaveletPyramid pyr = wavelet::BuildPyramid(x);
    std::vector<Tensor> parts = {ops::Reshape(pyr.base, {1, pyr.base.numel()})};
    for (const Tensor& d : pyr.details) parts.push_back(ops::Reshape(d, {1, d.numel()}));
    return ops::ConcatChannels(parts);
  };
  const testing::MatrixX jac = testing::TapeJacobian(flat, image);
  const double logdet = testing::LogAbsDet(jac);
  return {jac.rows() == 16 && jac.cols() == 16 && std::abs(logdet) < 1e-8,
          "16x16 Jacobian, |log det| = " + Sci(std::abs(logdet))};
}

// ---- 3 ----

Outcome FlowInvertibility(Context&) {
  double worst_roundtrip = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Rng pick(Rng::Derive(301, {static_cast<uint64_t>(trial)}));
    FlowSpec spec;
    spec.channels = 1 + static_cast<int>(pick.UniformInt(4));
    spec.cond_channels = (trial / 2) % 2 ? 1 + static_cast<int>(pick.UniformInt(3)) : 0;
    spec.coupling = trial % 2 ? CouplingKind::kAdditive : CouplingKind::kAffine;
    spec.steps = 1 + static_cast<int>(pick.UniformInt(4));
    spec.hidden_channels = 8;
    spec.kernel_size = pick.UniformInt(2) ? 3 : 1;
    const LevelFlow flow = RandomFlow(spec, 10000 + trial, 0.3);
    const Tensor x = testing::NormalTensor({2, 4, 4, spec.channels}, pick, 2.0);
    const Tensor c = spec.cond_channels ? RandomTensor({2, 4, 4, spec.cond_channels}, pick, 0, 256) : Tensor();
    worst_roundtrip = std::max(worst_roundtrip, MaxAbsDiff(flow.Inverse(flow.Forward(x, c).value, c).value, x));
  }

  double worst_logdet = 0.0;
  struct Case {
    int channels, cond;
    Shape shape;
  };
  const Case cases[] = {{1, 0, {1, 4, 4, 1}}, {1, 1, {1, 4, 4, 1}}, {3, 0, {1, 2, 2, 3}},
                        {3, 2, {1, 2, 2, 3}}, {4, 0, {1, 2, 2, 4}}, {2, 1, {1, 2, 2, 2}},
                        {16, 0, {1, 1, 1, 16}}, {12, 4, {1, 1, 1, 12}}};
  int trial = 0;
  for (const Case& k : cases) {
    for (CouplingKind kind : {CouplingKind::kAffine, CouplingKind::kAdditive}) {
      FlowSpec spec;
      spec.channels = k.channels;
      spec.cond_channels = k.cond;
      spec.coupling = kind;
      spec.steps = 3;
      spec.hidden_channels = 8;
      spec.kernel_size = k.shape[1] > 1 ? 3 : 1;
      const LevelFlow flow = RandomFlow(spec, 20000 + trial++, 0.4);
      Rng rng(30000 + trial);
      const Tensor x = RandomTensor(k.shape, rng);
      Shape cs = k.shape;
      cs.back() = k.cond;
      const Tensor c = k.cond ? RandomTensor(cs, rng, 0, 256) : Tensor();
      const auto jac = testing::TapeJacobian([&](const Tensor& t) { return flow.Forward(t, c).value; }, x);
      worst_logdet = std::max(worst_logdet, std::abs(testing::LogAbsDet(jac) - flow.Forward(x, c).logdet.item()));
    }
  }
  return {worst_roundtrip < 1e-7 && worst_logdet < 1e-6,
          "max roundtrip error " + Sci(worst_roundtrip) + " over 1000 flows, max logdet error " +
              Sci(worst_logdet) + " over " + std::to_string(trial) + " Jacobians"};
}

// ---- 4 ----

Outcome DensityNormalization(Context&) {
  // A 1x1x1 base flow trained on N(mu, sigma^2) samples.
  const double mu = 40.0, sigma = 7.0;
  Rng rng(401);
  std::vector<double> tr(2000), va(200);
  for (double& x : tr) x = mu + sigma * rng.Normal();
  for (double& x : va) x = mu + sigma * rng.Normal();
  ModelConfig mc = SmallConfig(0, 1, CouplingKind::kAffine);
  LevelFlow flow = WaveletFlowModel::CreateLevel(mc, 0, 402);
  TrainConfig tc;
  tc.dequantize = false;
  tc.epochs = 20;
  tc.learning_rate = 0.01;
  tc.seed = 403;
  TrainLevel(flow, 0, Tensor({2000, 1, 1, 1}, tr), Tensor({200, 1, 1, 1}, va), tc);
  const int64_t n = 120001;
  const double dx = 12.0 * sigma / static_cast<double>(n - 1);
  std::vector<double> xs(n);
  for (int64_t i = 0; i < n; ++i) xs[i] = mu - 6.0 * sigma + dx * i;
  const Tensor lp = flow.LogProb(Tensor({n, 1, 1, 1}, xs));
  double mass1 = 0.0;
  for (int64_t i = 0; i < n; ++i) mass1 += (i == 0 || i == n - 1 ? 0.5 : 1.0) * std::exp(lp.at(i)) * dx;

  // A randomized 2x2x1 model on a 49^4 grid over [-6, 6]^4.
  const WaveletFlowModel model = RandomModel(SmallConfig(1, 1, CouplingKind::kAffine), 404, 0.15);
  const double delta = 0.25;
  const int points = 49;
  double mass2 = 0.0;
  for (int a = 0; a < points; ++a) {
    std::vector<double> v;
    v.reserve(points * points * points * 4);
    for (int b = 0; b < points; ++b) {
      for (int c = 0; c < points; ++c) {
        for (int d = 0; d < points; ++d) {
          for (int q : {a, b, c, d}) v.push_back(-6.0 + delta * q);
        }
      }
    }
    const int64_t count = static_cast<int64_t>(v.size() / 4);
    const Tensor grid_lp = model.LogProb(Tensor({count, 2, 2, 1}, std::move(v)), count).total;
    for (double x : grid_lp.data()) mass2 += std::exp(x);
  }
  mass2 *= std::pow(delta, 4);
  return {std::abs(mass1 - 1.0) < 1e-3 && std::abs(mass2 - 1.0) < 0.05,
          "1x1x1 trained mass " + Fmt("%.6f", mass1) + " over mu +- 6 sigma, 2x2x1 grid mass " +
              Fmt("%.4f", mass2)};
}

// ---- 5 ----

Outcome GradientCorrectness(Context&) {
  double worst = 0.0;
  int64_t checked = 0;
  for (CouplingKind kind : {CouplingKind::kAffine, CouplingKind::kAdditive}) {
    WaveletFlowModel model = RandomModel(SmallConfig(1, 3, kind, 4, 2), 501, 0.3);
    Rng rng(502);
    // Dark images keep log p of order ten, so central differences do not
    // lose the gradient to cancellation.
    const Tensor images = RandomTensor({2, 2, 2, 3}, rng, 0.0, 4.0);
    // Finite differences run through the full model; analytic gradients
    // come from the tape on each level's own objective.
    for (int l = 0; l <= model.depth(); ++l) {
      const LevelData data = ExtractLevel(images, l);
      const LevelFlow& flow = model.level(l);
      Tape tape;
      const ParameterSet rec = flow.parameters().RecordOn(tape);
      const Gradients g = tape.backward(ops::Sum(flow.LogProb(rec, data.x, data.cond)));
      for (int i = 0; i < rec.size(); ++i) {
        if (!rec.trainable(i)) continue;
        const Tensor base = flow.parameters()[i];
        const Tensor analytic = g.of(rec[i]);
        for (int64_t k = 0; k < base.numel(); ++k) {
          auto eval = [&](double v) {
            WaveletFlowModel probe = model;
            probe.level(l).parameters().Set(i, testing::WithElement(base, k, v));
            return ops::Sum(probe.LogProb(images).total).item();
          };
          const double h = 1e-5;
          const double numeric = (eval(base.at(k) + h) - eval(base.at(k) - h)) / (2.0 * h);
          worst = std::max(worst, RelErr(analytic.at(k), numeric));
          ++checked;
        }
      }
    }
  }
  return {worst < 1e-4,
          std::to_string(checked) + " parameters over two 2-level models, max relative error " + Sci(worst)};
}

// ---- 6 ----

// Isotropic Gaussian with per-pixel mean and one shared variance, fitted to
// the dequantized training set.
double GaussianBaselineBpd(const Tensor& train, const Tensor& val_deq) {
  const int64_t n = train.dim(0), d = train.numel() / n;
  std::vector<double> mean(d, 0.0);
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t p = 0; p < d; ++p) mean[p] += (train.at(b * d + p) + 0.5) / n;
  }
  double var = 0.0;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t p = 0; p < d; ++p) {
      const double e = train.at(b * d + p) + 0.5 - mean[p];
      var += e * e;
    }
  }
  // Uniform dequantization noise adds 1/12 to every pixel variance.
  var = var / static_cast<double>(n * d) + 1.0 / 12.0;
  const int64_t m = val_deq.dim(0);
  double nats = 0.0;
  for (int64_t b = 0; b < m; ++b) {
    for (int64_t p = 0; p < d; ++p) {
      const double e = val_deq.at(b * d + p) - mean[p];
      nats += 0.5 * std::log(2.0 * std::numbers::pi * var) + e * e / (2.0 * var);
    }
  }
  return nats / static_cast<double>(m * d) / std::numbers::ln2;
}

Outcome DeskTraining(Context& ctx) {
  EnsureDeskModel(ctx);
  const WaveletFlowModel& model = *ctx.desk_model;
  const LogProbResult lp = model.LogProb(ctx.val_deq);
  const double bpd = BitsPerDim(model, lp.total);
  const double baseline = GaussianBaselineBpd(ctx.train, ctx.val_deq);

  // Retrain level 2 alone from a different seed.
  WaveletFlowModel retrained = model;
  TrainConfig tc = ctx.desk.train;
  tc.seed += 1000;
  retrained.level(2) = WaveletFlowModel::CreateLevel(ctx.desk.model, 2, tc.seed);
  TrainLevel(retrained.level(2), 2, ctx.train, ctx.val, tc, 0);
  const LogProbResult lp2 = retrained.LogProb(ctx.val_deq);
  bool others_identical = true;
  for (int l = 0; l <= model.depth(); ++l) {
    if (l == 2) continue;
    others_identical = others_identical && lp2.per_level[l].to_vector() == lp.per_level[l].to_vector() &&
                       SameParameters(retrained.level(l).parameters(), model.level(l).parameters());
  }
  const bool level2_changed = lp2.per_level[2].to_vector() != lp.per_level[2].to_vector();

  const bool pass = baseline - bpd >= 1.0 && ctx.desk_train_seconds <= 1800.0 && others_identical &&
                    level2_changed;
  return {pass, "total " + Fmt("%.4f", bpd) + " bpd vs isotropic Gaussian " + Fmt("%.4f", baseline) +
                    " bpd (gap " + Fmt("%.3f", baseline - bpd) + "), trained in " +
                    Fmt("%.0f", ctx.desk_train_seconds) + " s; level 2 retrain: other terms " +
                    (others_identical ? "bit-identical" : "CHANGED") + ", level 2 term " +
                    (level2_changed ? "changed" : "UNCHANGED")};
}

// ---- 7 ----

Outcome Truncation(Context& ctx) {
  EnsureDeskModel(ctx);
  const WaveletFlowModel& model = *ctx.desk_model;
  const int n = model.depth();

  // Truncated log-prob equals the partial per-level sum.
  const LogProbResult full = model.LogProb(ctx.val_deq);
  bool partial_exact = true;
  for (int k = 0; k <= n; ++k) {
    const LogProbResult part = model.Truncate(k).LogProb(wavelet::LowpassToLevel(ctx.val_deq, k));
    Tensor partial = full.per_level[0];
    for (int l = 1; l <= k; ++l) partial = ops::Add(partial, full.per_level[l]);
    partial_exact = partial_exact && part.total.to_vector() == partial.to_vector();
  }

  // Continuous data: truncating a full model equals a model trained and
  // evaluated at the lower resolution only.
  SyntheticOptions opts;
  opts.extent = 8;
  opts.quantize = false;
  const Tensor ctrain = SyntheticImages(256, 701, opts);
  const Tensor cval = SyntheticImages(64, 702, opts);
  const ModelConfig mc = SmallConfig(3, 1, CouplingKind::kAffine, 8, 2);
  TrainConfig tc;
  tc.dequantize = false;
  tc.epochs = 3;
  tc.seed = 703;
  std::vector<LevelFlow> full_flows;
  for (int l = 0; l <= 3; ++l) {
    full_flows.push_back(WaveletFlowModel::CreateLevel(mc, l, 704));
    TrainLevel(full_flows.back(), l, ctrain, cval, tc);
  }
  const WaveletFlowModel cont(3, 1, 3, full_flows);
  bool direct_exact = true;
  std::string direct_detail;
  for (int k = 1; k <= 2; ++k) {
    const Tensor low_train = wavelet::LowpassToLevel(ctrain, k);
    const Tensor low_val = wavelet::LowpassToLevel(cval, k);
    std::vector<LevelFlow> flows;
    for (int l = 0; l <= k; ++l) {
      flows.push_back(WaveletFlowModel::CreateLevel(mc, l, 704));
      TrainLevel(flows.back(), l, low_train, low_val, tc);
    }
    const WaveletFlowModel direct(k, 1, 3, std::move(flows));
    const WaveletFlowModel truncated = cont.Truncate(k);
    const double a = BitsPerDim(truncated, truncated.LogProb(low_val).total);
    const double b = BitsPerDim(direct, direct.LogProb(low_val).total);
    direct_exact = direct_exact && a == b;
    direct_detail += " k=" + std::to_string(k) + ":" + Fmt("%.6f", a) + (a == b ? "==" : "!=") + Fmt("%.6f", b);
  }

  // 8-bit box-downsampled corpus: plain vs filtered dequantization of the
  // truncated desk model. Each draw is paired with its antithetic draw
  // (u -> 1 - u), which cancels the noise term linear in u; both estimators
  // stay unbiased.
  bool direction = true;
  std::string dir_detail;
  const int draws = 20;
  for (int k = 0; k < n; ++k) {
    const double s = std::ldexp(1.0, n - k);
    const Tensor low = wavelet::LowpassToLevel(ctx.val, k);
    std::vector<double> j(low.numel());
    for (int64_t i = 0; i < low.numel(); ++i) j[i] = std::clamp(std::round(low.at(i) / s), 0.0, 255.0);
    const Tensor pixels(low.shape(), std::move(j));
    // s (2 J + 1): a coefficient plane plus its antithetic partner.
    const Tensor mirror = ops::AddScalar(ops::Scale(pixels, 2.0 * s), s);
    const WaveletFlowModel t = model.Truncate(k);
    auto pair_bpd = [&](const Tensor& coef) {
      return 0.5 * (BitsPerDim(t, t.LogProb(coef).total) + BitsPerDim(t, t.LogProb(ops::Sub(mirror, coef)).total));
    };
    std::vector<double> diffs;
    double plain_bpd = 0.0, filtered_bpd = 0.0;
    for (int r = 0; r < draws; ++r) {
      Rng plain_rng(Rng::Derive(710, {static_cast<uint64_t>(k), static_cast<uint64_t>(r)}));
      Rng filtered_rng(Rng::Derive(720, {static_cast<uint64_t>(k), static_cast<uint64_t>(r)}));
      const double p = pair_bpd(ops::Scale(Dequantize(pixels, plain_rng), s));
      const double f = pair_bpd(DequantizeFiltered(pixels, n, filtered_rng));
      plain_bpd += p / draws;
      filtered_bpd += f / draws;
      diffs.push_back(p - f);
    }
    const double se = std::sqrt(testing::Variance(diffs) / draws);
    direction = direction && plain_bpd >= filtered_bpd;
    dir_detail += " k=" + std::to_string(k) + ":" + Fmt("%.5f", plain_bpd) + "-" + Fmt("%.5f", filtered_bpd) +
                  "=" + Sci(plain_bpd - filtered_bpd) + "(se " + Sci(se) + ")";
  }

  return {partial_exact && direct_exact && direction,
          std::string("partial sums ") + (partial_exact ? "bit-exact" : "DIFFER") + "; direct vs truncated" +
              direct_detail + "; plain>=filtered bpd" + dir_detail};
}

// ---- 8 ----

LogDensity StandardNormal(size_t dims) {
  return [dims](const std::vector<double>& x) {
    DensityEval e;
    e.gradient.resize(dims);
    for (size_t i = 0; i < dims; ++i) {
      e.value -= 0.5 * x[i] * x[i];
      e.gradient[i] = -x[i];
    }
    return e;
  };
}

Outcome SamplerCorrectness(Context&) {
  NutsConfig config;
  config.min_steps = 10000;
  config.seed = 801;
  Rng rng(802);
  const NutsResult r = NutsSample(StandardNormal(16), std::vector<double>(16, 0.5), config, rng, true);
  double lo_var = 1e9, hi_var = 0.0;
  for (size_t d = 0; d < 16; ++d) {
    const double v = testing::Variance(Column(r.chain, d));
    lo_var = std::min(lo_var, v);
    hi_var = std::max(hi_var, v);
  }
  const bool normal_ok = r.chain.size() >= 10000 && lo_var >= 0.9 && hi_var <= 1.1;

  // p(x)^{1/T^2} of a standard normal through an identity flow.
  FlowSpec spec;
  spec.channels = 4;
  spec.steps = 2;
  spec.hidden_channels = 8;
  spec.kernel_size = 1;
  Rng init(803);
  const LevelFlow identity(spec, init);
  const AnnealedTarget target(identity, Tensor(), {1, 1, 1, 4}, AnnealSpec::FromTemperature(0.5).gamma());
  NutsConfig tconfig;
  tconfig.min_steps = 10000;
  tconfig.seed = 804;
  Rng trng(805);
  const NutsResult t = NutsSample(std::cref(target), {0.1, 0.2, -0.1, 0.0}, tconfig, trng, true);
  double worst_sd = 0.0;
  for (size_t d = 0; d < 4; ++d) {
    worst_sd = std::max(worst_sd, std::abs(std::sqrt(testing::Variance(Column(t.chain, d))) - 0.5) / 0.5);
  }

  // Latent-space reparameterization on random affine flows.
  double worst_identity = 0.0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    FlowSpec fs_spec;
    fs_spec.channels = 3;
    fs_spec.cond_channels = seed % 2 ? 1 : 0;
    fs_spec.steps = 3;
    fs_spec.hidden_channels = 8;
    fs_spec.coupling = CouplingKind::kAffine;
    const LevelFlow flow = RandomFlow(fs_spec, 810 + seed, 0.3);
    Rng zr(830 + seed);
    const Tensor cond = fs_spec.cond_channels ? RandomTensor({1, 2, 2, 1}, zr, 0, 256) : Tensor();
    const Tensor z = testing::NormalTensor({1, 2, 2, 3}, zr);
    const double gamma = 1.0 + 3.0 * zr.Uniform();
    const FlowResult inv = flow.Inverse(z, cond);
    const FlowResult fwd = flow.Forward(inv.value, cond);
    // gamma log p(h(z)) + log |dh/dz| against the sampler's latent density.
    const double lhs = gamma * (SumLogNormal(fwd.value) + fwd.logdet.item()) + inv.logdet.item();
    const double rhs = AnnealedLogDensity(flow, cond, gamma, z).value;
    worst_identity = std::max(worst_identity, std::abs(lhs - rhs));
  }
  return {normal_ok && worst_sd < 0.05 && worst_identity < 1e-8,
          "16-d normal variance in [" + Fmt("%.3f", lo_var) + ", " + Fmt("%.3f", hi_var) + "] over " +
              std::to_string(r.chain.size()) + " samples; T=0.5 sd max rel error " + Fmt("%.4f", worst_sd) +
              "; reparameterization error " + Sci(worst_identity)};
}

// ---- 9 ----

struct Moments {
  std::vector<double> mean, var, se_mean, se_var;
};

Moments PixelMoments(const Tensor& samples) {
  const int64_t n = samples.dim(0), d = samples.numel() / n;
  Moments m;
  for (int64_t p = 0; p < d; ++p) {
    std::vector<double> col(n);
    for (int64_t b = 0; b < n; ++b) col[b] = samples.at(b * d + p);
    const double mean = testing::Mean(col);
    const double var = testing::Variance(col);
    double m4 = 0.0;
    for (double v : col) m4 += std::pow(v - mean, 4) / n;
    m.mean.push_back(mean);
    m.var.push_back(var);
    m.se_mean.push_back(std::sqrt(var / n));
    m.se_var.push_back(std::sqrt(std::max(m4 - var * var, 0.0) / n));
  }
  return m;
}

Outcome ConstantJacobian(Context&) {
  const WaveletFlowModel model = RandomModel(SmallConfig(2, 1, CouplingKind::kAdditive, 8, 2), 901, 0.3);
  const int64_t count = 2000;
  Rng mrng(902);
  NutsConfig config;
  config.seed = 903;
  std::vector<LevelDiagnostics> diag;
  const Tensor mcmc = AnnealedSampleModel(model, count, AnnealSpec::FromTemperature(0.7), config, mrng, &diag);
  Rng drng(904);
  const SampleResult direct = SampleDirect(model, count, 0.7, drng);
  const Moments a = PixelMoments(mcmc), b = PixelMoments(direct.images);
  double worst = 0.0;
  for (size_t p = 0; p < a.mean.size(); ++p) {
    worst = std::max(worst, std::abs(a.mean[p] - b.mean[p]) / std::hypot(a.se_mean[p], b.se_mean[p]));
    worst = std::max(worst, std::abs(a.var[p] - b.var[p]) / std::hypot(a.se_var[p], b.se_var[p]));
  }
  int divergences = 0;
  for (const LevelDiagnostics& d : diag) divergences += d.nuts.divergences;
  return {worst < 3.0 && !direct.approximate,
          "max |difference| " + Fmt("%.2f", worst) + " standard errors over 16 pixel means and variances, " +
              std::to_string(count) + " samples each, " + std::to_string(divergences) + " divergences"};
}

// ---- 10 ----

Outcome SuperResolution(Context&) {
  const WaveletFlowModel gray = RandomModel(SmallConfig(3, 1, CouplingKind::kAffine, 8, 2), 1001, 0.2);
  const WaveletFlowModel color = RandomModel(SmallConfig(3, 3, CouplingKind::kAdditive, 8, 2), 1002, 0.2);
  Rng rng(1003);
  NutsConfig config;
  config.min_steps = 10;
  double worst = 0.0;
  int mcmc_trials = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const WaveletFlowModel& model = trial % 2 ? color : gray;
    const int k = static_cast<int>(rng.UniformInt(3));
    const int target = k + 1 + static_cast<int>(rng.UniformInt(3 - k));
    const int64_t e = int64_t{1} << k;
    const Tensor input = RandomTensor({1, e, e, model.channels()}, rng, 0.0, 256.0 * std::ldexp(1.0, 3 - k));
    const double t = rng.Uniform();
    DetailSampler sampler;
    if (trial % 4 < 2) {
      sampler = DirectSampler(model, t, rng);
    } else {
      config.seed = 1100 + trial;
      sampler = AnnealedSampler(model, AnnealSpec::FromTemperature(0.2 + 0.8 * t), config, rng);
      ++mcmc_trials;
    }
    const Tensor out = SuperResolve(model, input, target, sampler);
    worst = std::max(worst, MaxAbsDiff(wavelet::LowpassToLevel(out, k), input));
  }
  return {worst < 1e-10, "max low-pass error " + Sci(worst) + " over 100 trials (" + std::to_string(mcmc_trials) +
                             " annealed MCMC, " + std::to_string(100 - mcmc_trials) + " direct)"};
}

// ---- 11 ----

void WriteCorpus(const Tensor& images, const std::string& dir) {
  fs::create_directories(dir);
  const int64_t s = images.dim(1);
  for (int64_t i = 0; i < images.dim(0); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04lld.pgm", static_cast<long long>(i));
    WriteImage(TensorToImage(ops::Reshape(ops::SliceBatch(images, i, i + 1), {s, s, 1})),
               (fs::path(dir) / name).string());
  }
}

Outcome Persistence(Context& ctx) {
  EnsureDeskModel(ctx);
  const WaveletFlowModel& model = *ctx.desk_model;
  const fs::path root = fs::path(ctx.workdir) / "persistence";
  fs::remove_all(root);

  // Save, load and save again.
  SaveModel(model, (root / "a").string());
  const WaveletFlowModel loaded = LoadModel((root / "a").string());
  SaveModel(loaded, (root / "b").string());
  bool bytes_equal = true;
  for (int l = 0; l <= model.depth(); ++l) {
    bytes_equal = bytes_equal && testing::Slurp((root / "a" / LevelFileName(l)).string()) ==
                                     testing::Slurp((root / "b" / LevelFileName(l)).string());
  }
  const LogProbResult lp_a = model.LogProb(ctx.val_deq);
  const LogProbResult lp_b = loaded.LogProb(ctx.val_deq);
  bool lp_equal = lp_a.total.to_vector() == lp_b.total.to_vector();
  for (int l = 0; l <= model.depth(); ++l) {
    lp_equal = lp_equal && lp_a.per_level[l].to_vector() == lp_b.per_level[l].to_vector();
  }
  const bool params_equal = SameModel(model, loaded);

  // One CLI process per level, assembled here.
  SyntheticOptions opts;
  opts.extent = 8;
  const Tensor train = SyntheticImages(96, 1101, opts);
  const Tensor val = SyntheticImages(24, 1102, opts);
  WriteCorpus(train, (root / "train").string());
  WriteCorpus(val, (root / "val").string());
  json level = {{"steps", 2}, {"conv_channels", 8}, {"residual_blocks", 1}, {"coupling", "affine"}};
  const json config = {
      {"model", {{"n", 3}, {"channels", 1}, {"levels", json::array({level, level, level, level})}}},
      {"train", {{"learning_rate", 2e-3}, {"batch_size", 16}, {"epochs", 3}, {"seed", 1103}}},
      {"paths", {{"train_dir", "train"}, {"val_dir", "val"}, {"checkpoint_dir", "ck"}}}};
  const std::string config_path = (root / "run.json").string();
  std::ofstream(config_path) << config.dump(2);
  bool processes_ok = true;
  for (int l = 0; l <= 3; ++l) {
    const std::string cmd = std::string(WFLOW_CLI_PATH) + " train --config " + config_path + " --level " +
                            std::to_string(l) + " >" + (root / "train.out").string() + " 2>&1";
    processes_ok = processes_ok && std::system(cmd.c_str()) == 0;
  }
  bool assembled_ok = false, matches_in_process = false, eval_matches = false;
  std::string assembled_detail;
  if (processes_ok) {
    const RunConfig run = LoadRunConfig(config_path);
    const WaveletFlowModel assembled = LoadModel(run.paths.checkpoint_dir);
    // The same levels trained in this process.
    std::vector<LevelFlow> flows;
    for (int l = 0; l <= 3; ++l) {
      flows.push_back(WaveletFlowModel::CreateLevel(run.model, l, run.train.seed));
      TrainLevel(flows.back(), l, train, val, run.train, 0);
    }
    matches_in_process = SameModel(assembled, WaveletFlowModel(3, 1, 3, std::move(flows)));

    Rng rng(1104);
    const Tensor val_deq = Dequantize(val, rng);
    const double bpd = BitsPerDim(assembled, assembled.LogProb(val_deq).total);
    Rng srng(1105);
    const SampleResult samples = SampleDirect(assembled, 8, 1.0, srng);
    bool finite = std::isfinite(bpd);
    for (double v : samples.images.data()) finite = finite && std::isfinite(v);
    assembled_ok = finite && bpd < 8.0;
    assembled_detail = "assembled model " + Fmt("%.3f", bpd) + " bpd";

    // The CLI's own evaluation agrees with this process.
    const std::string out = (root / "eval.json").string();
    const std::string cmd = std::string(WFLOW_CLI_PATH) + " eval --config " + config_path + " --data " +
                            (root / "val").string() + " --seed 1106 >" + out + " 2>/dev/null";
    if (std::system(cmd.c_str()) == 0) {
      Rng erng(1106);
      const double want = BitsPerDim(assembled, assembled.LogProb(Dequantize(val, erng)).total);
      eval_matches = json::parse(testing::Slurp(out))["total_bpd"].get<double>() == want;
    }
  }
  const bool pass = bytes_equal && lp_equal && params_equal && processes_ok && assembled_ok &&
                    matches_in_process && eval_matches;
  return {pass, std::string("save/load parameters ") + (params_equal ? "bit-exact" : "DIFFER") + ", log_prob " +
                    (lp_equal ? "bit-exact" : "DIFFERS") + ", re-saved bytes " +
                    (bytes_equal ? "identical" : "DIFFER") + "; 4 training processes " +
                    (processes_ok ? "ok" : "FAILED") + ", " + assembled_detail + ", equals in-process training: " +
                    (matches_in_process ? "yes" : "NO") + ", CLI eval agrees: " + (eval_matches ? "yes" : "NO")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(Context&)> run;
};

int Main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the wavelet flow library"};
  std::string workdir = (fs::temp_directory_path() / "wflow_acceptance").string();
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory for checkpoints and corpora");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "transform exactness", TransformExactness},
      {2, "unit determinant", UnitDeterminant},
      {3, "flow invertibility and log-det", FlowInvertibility},
      {4, "density normalization", DensityNormalization},
      {5, "gradient correctness", GradientCorrectness},
      {6, "desk-scale training", DeskTraining},
      {7, "truncation identity", Truncation},
      {8, "sampler correctness", SamplerCorrectness},
      {9, "constant-Jacobian equivalence", ConstantJacobian},
      {10, "super-resolution consistency", SuperResolution},
      {11, "persistence", Persistence},
  };
  const std::set<int> selected(only.begin(), only.end());
  fs::create_directories(workdir);
  Context ctx;
  ctx.workdir = workdir;
  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    std::cerr << "running criterion " << c.id << " (" << c.name << ")\n";
    const Stopwatch clock;
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail
              << " [" << Fmt("%.1f", clock.seconds()) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace
}  // namespace wflow

int main(int argc, char** argv) { return wflow::Main(argc, argv); }
