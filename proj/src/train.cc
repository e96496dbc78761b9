#include "wflow/train.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <utility>

#include "wflow/ops.h"
#include "wflow/wavelet.h"

namespace wflow {
namespace {

constexpr uint64_t kTagEpoch = 0x65706f6368ULL;
constexpr uint64_t kTagValidation = 0x76616cULL;
constexpr uint64_t kTagMixing = 0x6d6978ULL;

Tensor UniformNoise(const Shape& shape, Rng& rng) {
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = rng.Uniform();
  return Tensor(shape, std::move(v));
}

// Gathers samples `rows` of a batched tensor.
Tensor Gather(const Tensor& t, const std::vector<int64_t>& rows) {
  if (!t.defined()) return t;
  const int64_t stride = t.numel() / t.dim(0);
  std::vector<double> out(rows.size() * stride);
  const auto src = t.data();
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.begin() + rows[i] * stride, stride, out.begin() + i * stride);
  }
  Shape shape = t.shape();
  shape[0] = static_cast<int64_t>(rows.size());
  return Tensor(shape, std::move(out));
}

int64_t DimsPerSample(const Tensor& x) { return x.numel() / x.dim(0); }

}  // namespace

Tensor Dequantize(const Tensor& image, Rng& rng) {
  return ops::Add(image, UniformNoise(image.shape(), rng));
}

Tensor DequantizeFiltered(const Tensor& image, int n, Rng& rng) {
  const int k = wavelet::LevelOf(image);
  WFLOW_CHECK(k <= n, "dequantize_filtered: image level " + std::to_string(k) +
                          " exceeds dataset depth " + std::to_string(n));
  Shape full = image.shape();
  full[full.size() - 3] = int64_t{1} << n;
  full[full.size() - 2] = int64_t{1} << n;
  const Tensor noise = wavelet::LowpassToLevel(UniformNoise(full, rng), k);
  return ops::Add(ops::Scale(image, std::ldexp(1.0, n - k)), noise);
}

LevelData ExtractLevel(const Tensor& images, int level) {
  WFLOW_CHECK(images.defined() && images.rank() == 4, "training images must be [N,S,S,C]");
  const int n = wavelet::LevelOf(images);
  WFLOW_CHECK(level >= 0 && level <= n, "level " + std::to_string(level) + " outside [0, " +
                                            std::to_string(n) + "]");
  if (level == 0) return {wavelet::LowpassToLevel(images, 0), Tensor()};
  wavelet::HaarSplit split = wavelet::Analyze(wavelet::LowpassToLevel(images, level));
  return {split.detail, split.low};
}

LevelData ExtractPatches(const LevelData& data, int patch, Rng& rng) {
  const int64_t extent = data.x.dim(1);
  WFLOW_CHECK(patch >= 1, "patch size must be positive");
  WFLOW_CHECK(patch <= extent, "patch size " + std::to_string(patch) + " exceeds plane extent " +
                                   std::to_string(extent));
  WFLOW_CHECK(extent % patch == 0, "patch size " + std::to_string(patch) +
                                       " does not divide plane extent " + std::to_string(extent));
  if (patch == extent) return data;
  const int64_t cells = extent / patch;
  const int64_t batch = data.x.dim(0);
  auto crop_into = [&](const Tensor& t, int64_t b, int64_t oy, int64_t ox, std::vector<double>& out) {
    const int64_t ch = t.dim(3);
    const auto src = t.data();
    for (int64_t y = 0; y < patch; ++y) {
      const int64_t row = ((b * extent + oy + y) * extent + ox) * ch;
      out.insert(out.end(), src.begin() + row, src.begin() + row + patch * ch);
    }
  };
  std::vector<double> xs, cs;
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t oy = patch * static_cast<int64_t>(rng.UniformInt(cells));
    const int64_t ox = patch * static_cast<int64_t>(rng.UniformInt(cells));
    crop_into(data.x, b, oy, ox, xs);
    if (data.cond.defined()) crop_into(data.cond, b, oy, ox, cs);
  }
  LevelData out;
  out.x = Tensor({batch, patch, patch, data.x.dim(3)}, std::move(xs));
  if (data.cond.defined()) out.cond = Tensor({batch, patch, patch, data.cond.dim(3)}, std::move(cs));
  return out;
}

Adamax::Adamax(const TrainConfig& config)
    : lr_(config.learning_rate), beta1_(config.beta1), beta2_(config.beta2) {
  WFLOW_CHECK(lr_ > 0.0, "learning rate must be positive");
  WFLOW_CHECK(beta1_ >= 0.0 && beta1_ < 1.0 && beta2_ >= 0.0 && beta2_ < 1.0,
              "Adamax betas must lie in [0, 1)");
}

void Adamax::Step(ParameterSet& params, const std::vector<Tensor>& grads) {
  WFLOW_CHECK(static_cast<int>(grads.size()) == params.size(), "gradient count mismatch");
  for (int i = 0; i < params.size(); ++i) {
    if (!params.trainable(i)) continue;
    WFLOW_CHECK(grads[i].defined() && grads[i].shape() == params[i].shape(),
                "gradient for " + params.name(i) + " has the wrong shape");
    for (double g : grads[i].data()) {
      WFLOW_CHECK(std::isfinite(g), "non-finite gradient for parameter " + params.name(i) +
                                        " at optimizer step " + std::to_string(t_ + 1));
    }
  }
  if (m_.empty()) {
    m_.resize(params.size());
    u_.resize(params.size());
    for (int i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].numel(), 0.0);
      u_[i].assign(params[i].numel(), 0.0);
    }
  }
  ++t_;
  const double step = lr_ / (1.0 - std::pow(beta1_, static_cast<double>(t_)));
  for (int i = 0; i < params.size(); ++i) {
    if (!params.trainable(i)) continue;
    std::vector<double> theta = params[i].to_vector();
    const auto g = grads[i].data();
    for (size_t j = 0; j < theta.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      u_[i][j] = std::max(beta2_ * u_[i][j], std::abs(g[j]));
      theta[j] -= step * m_[i][j] / (u_[i][j] + 1e-8);
    }
    params.Set(i, Tensor(params[i].shape(), std::move(theta)));
  }
}

double LevelNll(const LevelFlow& flow, const LevelData& data, int64_t chunk) {
  const int64_t n = data.x.dim(0);
  double total = 0.0;
  for (int64_t b = 0; b < n; b += chunk) {
    const int64_t e = std::min(n, b + chunk);
    const Tensor cond = data.cond.defined() ? ops::SliceBatch(data.cond, b, e) : Tensor();
    const Tensor lp = flow.LogProb(ops::SliceBatch(data.x, b, e), cond);
    for (double v : lp.data()) total -= v;
  }
  return total / static_cast<double>(n * DimsPerSample(data.x));
}

TrainHistory TrainLevel(LevelFlow& flow, int level, const Tensor& train_images,
                        const Tensor& val_images, const TrainConfig& config, int patch_size,
                        const EpochCallback& on_epoch) {
  WFLOW_CHECK(train_images.defined() && train_images.dim(0) > 0, "empty training set");
  WFLOW_CHECK(val_images.defined() && val_images.dim(0) > 0, "empty validation set");
  WFLOW_CHECK(config.batch_size >= 1 && config.epochs >= 0 && config.early_stop_patience >= 1,
              "invalid training configuration");
  const uint64_t lvl = static_cast<uint64_t>(level);

  Rng val_rng(Rng::Derive(config.seed, {kTagValidation}));
  const Tensor val_input = config.dequantize ? Dequantize(val_images, val_rng) : val_images;
  const LevelData val = ExtractLevel(val_input, level);

  TrainHistory history;
  history.initial_val_nll = LevelNll(flow, val, 256);

  const bool fresh = !flow.actnorm_initialized();
  if (fresh) {
    Rng mix_rng(Rng::Derive(config.seed, {kTagMixing, lvl}));
    flow.InitializeMixing(mix_rng);
  }

  const int64_t count = train_images.dim(0);
  std::optional<ParameterSet> best;
  double best_val = 0.0;
  int since_best = 0;
  Adamax optimizer(config);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(Rng::Derive(config.seed, {kTagEpoch, lvl, static_cast<uint64_t>(epoch)}));
    const Tensor input = config.dequantize ? Dequantize(train_images, rng) : train_images;
    LevelData data = ExtractLevel(input, level);
    if (patch_size > 0) data = ExtractPatches(data, patch_size, rng);

    std::vector<int64_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());

    double epoch_loss = 0.0;
    int64_t batches = 0;
    for (int64_t b = 0; b < count; b += config.batch_size) {
      const std::vector<int64_t> rows(order.begin() + b,
                                      order.begin() + std::min<int64_t>(count, b + config.batch_size));
      const Tensor x = Gather(data.x, rows);
      const Tensor cond = Gather(data.cond, rows);
      if (!flow.actnorm_initialized()) flow.InitializeActnorm(x, cond);

      Tape tape;
      const ParameterSet recorded = flow.parameters().RecordOn(tape);
      const double scale = -1.0 / static_cast<double>(x.numel());
      const Tensor loss = ops::Scale(ops::Sum(flow.LogProb(recorded, x, cond)), scale);
      WFLOW_CHECK(std::isfinite(loss.item()), "non-finite loss at level " + std::to_string(level) +
                                                  ", epoch " + std::to_string(epoch));
      const Gradients grads = tape.backward(loss);
      std::vector<Tensor> g(recorded.size());
      for (int i = 0; i < recorded.size(); ++i) {
        if (recorded.trainable(i)) g[i] = grads.of(recorded[i]);
      }
      optimizer.Step(flow.parameters(), g);
      epoch_loss += loss.item();
      ++batches;
    }

    const double train_nll = epoch_loss / static_cast<double>(batches);
    const double val_nll = LevelNll(flow, val, 256);
    history.train_nll.push_back(train_nll);
    history.val_nll.push_back(val_nll);
    if (on_epoch) on_epoch(level, epoch, train_nll, val_nll);
    if (!best || val_nll < best_val) {
      best = flow.parameters();
      best_val = val_nll;
      history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      history.stopped_early = true;
      break;
    }
  }
  if (best) flow.parameters() = *best;
  return history;
}

}  // namespace wflow
