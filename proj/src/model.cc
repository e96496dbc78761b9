#include "wflow/model.h"

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "wflow/ops.h"

namespace wflow {
namespace {

Tensor AsBatch(const Tensor& t) {
  if (t.rank() == 4) return t;
  WFLOW_CHECK(t.rank() == 3, "expected [S,S,C] or [N,S,S,C], got " + ShapeToString(t.shape()));
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return ops::Reshape(t, s);
}

Tensor StandardNormal(const Shape& shape, double stddev, Rng& rng) {
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = stddev * rng.Normal();
  return Tensor(shape, std::move(v));
}

}  // namespace

FlowSpec LevelSpec(const ModelConfig& config, int level) {
  WFLOW_CHECK(config.depth >= 0, "model depth must be non-negative");
  WFLOW_CHECK(config.channels >= 1, "model needs at least one channel");
  WFLOW_CHECK(static_cast<int>(config.levels.size()) == config.depth + 1,
              "model config has " + std::to_string(config.levels.size()) +
                  " level entries, expected " + std::to_string(config.depth + 1));
  WFLOW_CHECK(level >= 0 && level <= config.depth, "level " + std::to_string(level) + " out of range");
  const LevelConfig& lc = config.levels[level];
  FlowSpec spec;
  spec.steps = lc.steps;
  spec.hidden_channels = lc.conv_channels;
  spec.residual_blocks = lc.residual_blocks;
  spec.coupling = lc.coupling;
  if (level == 0) {
    spec.channels = config.channels;
    spec.cond_channels = 0;
    spec.extent = 1;
  } else {
    const int i = level - 1;
    spec.channels = 3 * config.channels;
    spec.cond_channels = config.channels;
    spec.extent = 1 << i;
    spec.cond_scale = std::ldexp(1.0, i - config.depth) / 128.0;
  }
  spec.kernel_size = spec.extent == 1 ? 1 : 3;
  return spec;
}

WaveletFlowModel::WaveletFlowModel(int depth, int channels, int data_depth, std::vector<LevelFlow> flows)
    : depth_(depth), channels_(channels), data_depth_(data_depth), flows_(std::move(flows)) {
  WFLOW_CHECK(depth_ >= 0 && data_depth_ >= depth_, "invalid model depth");
  WFLOW_CHECK(static_cast<int>(flows_.size()) == depth_ + 1,
              "model of depth " + std::to_string(depth_) + " needs " + std::to_string(depth_ + 1) +
                  " level flows, got " + std::to_string(flows_.size()));
  for (int l = 0; l <= depth_; ++l) {
    const FlowSpec& s = flows_[l].spec();
    const int expect_ch = l == 0 ? channels_ : 3 * channels_;
    const int expect_cond = l == 0 ? 0 : channels_;
    WFLOW_CHECK(s.channels == expect_ch && s.cond_channels == expect_cond,
                "level " + std::to_string(l) + " flow does not match model channels");
  }
}

WaveletFlowModel WaveletFlowModel::Create(const ModelConfig& config, uint64_t seed) {
  std::vector<LevelFlow> flows;
  for (int l = 0; l <= config.depth; ++l) flows.push_back(CreateLevel(config, l, seed));
  return WaveletFlowModel(config.depth, config.channels, config.depth, std::move(flows));
}

LevelFlow WaveletFlowModel::CreateLevel(const ModelConfig& config, int level, uint64_t seed) {
  Rng rng(Rng::Derive(seed, {0x6c6576656cULL, static_cast<uint64_t>(level)}));
  return LevelFlow(LevelSpec(config, level), rng);
}

int64_t WaveletFlowModel::dims() const {
  return static_cast<int64_t>(channels_) << (2 * depth_);
}

LevelFlow& WaveletFlowModel::level(int l) {
  WFLOW_CHECK(l >= 0 && l <= depth_, "level " + std::to_string(l) + " out of range");
  return flows_[l];
}

const LevelFlow& WaveletFlowModel::level(int l) const {
  WFLOW_CHECK(l >= 0 && l <= depth_, "level " + std::to_string(l) + " out of range");
  return flows_[l];
}

void WaveletFlowModel::CheckImages(const Tensor& images) const {
  WFLOW_CHECK(images.defined() && images.rank() == 4, "images must be [N,S,S,C]");
  const int64_t extent = int64_t{1} << depth_;
  WFLOW_CHECK(images.dim(1) == extent && images.dim(2) == extent && images.dim(3) == channels_,
              "image shape " + ShapeToString(images.shape()) + " does not match model resolution " +
                  std::to_string(extent) + "x" + std::to_string(extent) + "x" +
                  std::to_string(channels_));
}

LogProbResult WaveletFlowModel::LogProb(const Tensor& images_in, int64_t chunk) const {
  const Tensor images = AsBatch(images_in);
  CheckImages(images);
  WFLOW_CHECK(chunk >= 1, "chunk must be positive");
  const int64_t n = images.dim(0);
  std::vector<std::vector<Tensor>> parts(num_levels());
  for (int64_t b = 0; b < n; b += chunk) {
    const Tensor batch = ops::SliceBatch(images, b, std::min(n, b + chunk));
    // Lows are taken from the analysis chain directly so that I_i is exactly
    // the low-pass of the image, independent of synthesis rounding.
    std::vector<Tensor> lows(depth_ + 1), details(depth_);
    lows[depth_] = batch;
    for (int i = depth_ - 1; i >= 0; --i) {
      wavelet::HaarSplit split = wavelet::Analyze(lows[i + 1]);
      lows[i] = split.low;
      details[i] = split.detail;
    }
    parts[0].push_back(flows_[0].LogProb(lows[0]));
    for (int l = 1; l <= depth_; ++l) {
      parts[l].push_back(flows_[l].LogProb(details[l - 1], lows[l - 1]));
    }
  }
  LogProbResult result;
  for (int l = 0; l <= depth_; ++l) {
    result.per_level.push_back(ops::ConcatBatch(parts[l]));
    result.total = l == 0 ? result.per_level[0] : ops::Add(result.total, result.per_level[l]);
  }
  return result;
}

WaveletFlowModel WaveletFlowModel::Truncate(int k) const {
  WFLOW_CHECK(k >= 0 && k <= depth_, "truncation level " + std::to_string(k) + " outside [0, " +
                                         std::to_string(depth_) + "]");
  std::vector<LevelFlow> flows(flows_.begin(), flows_.begin() + k + 1);
  return WaveletFlowModel(k, channels_, data_depth_, std::move(flows));
}

double WaveletFlowModel::coefficient_scale() const {
  return std::ldexp(1.0, data_depth_ - depth_);
}

double MeanBits(const Tensor& log_prob) {
  double sum = 0.0;
  for (double v : log_prob.data()) sum += v;
  return -sum / static_cast<double>(log_prob.numel()) / std::numbers::ln2;
}

double BitsPerDim(const WaveletFlowModel& model, const Tensor& log_prob) {
  const double d = static_cast<double>(model.dims());
  // p(J) = p_I(s * J) * s^D for pixels J and coefficients s * J.
  const double correction = static_cast<double>(model.data_depth() - model.depth()) * d;
  return (MeanBits(log_prob) - correction) / d;
}

Tensor PixelsToCoefficients(const WaveletFlowModel& model, const Tensor& pixels) {
  return ops::Scale(pixels, model.coefficient_scale());
}

Tensor CoefficientsToPixels(const WaveletFlowModel& model, const Tensor& coefficients) {
  return ops::Scale(coefficients, 1.0 / model.coefficient_scale());
}

bool HasConstantJacobian(const LevelFlow& flow) {
  return flow.spec().coupling == CouplingKind::kAdditive;
}

DetailSampler DirectSampler(const WaveletFlowModel& model, double temperature, Rng& rng) {
  return [&model, temperature, &rng](int level, const Tensor& cond) {
    const LevelFlow& flow = model.level(level);
    const Shape shape = {cond.dim(0), cond.dim(1), cond.dim(2), flow.spec().channels};
    return flow.Inverse(StandardNormal(shape, temperature, rng), cond).value;
  };
}

Tensor SampleBaseDirect(const WaveletFlowModel& model, int64_t count, double temperature, Rng& rng) {
  const LevelFlow& base = model.level(0);
  return base.Inverse(StandardNormal({count, 1, 1, model.channels()}, temperature, rng)).value;
}

SampleResult SampleDirect(const WaveletFlowModel& model, int64_t count, double temperature, Rng& rng) {
  WFLOW_CHECK(count >= 1, "sample count must be positive");
  WFLOW_CHECK(temperature >= 0.0, "temperature must be non-negative");
  SampleResult result;
  if (temperature != 1.0) {
    for (int l = 0; l <= model.depth(); ++l) {
      if (!HasConstantJacobian(model.level(l))) result.approximate = true;
    }
  }
  const Tensor base = SampleBaseDirect(model, count, temperature, rng);
  result.images = SuperResolve(model, base, model.depth(), DirectSampler(model, temperature, rng));
  return result;
}

Tensor SuperResolve(const WaveletFlowModel& model, const Tensor& image_in, int target,
                    const DetailSampler& sampler) {
  const Tensor image = AsBatch(image_in);
  const int k = wavelet::LevelOf(image);
  WFLOW_CHECK(image.dim(3) == model.channels(), "image has " + std::to_string(image.dim(3)) +
                                                    " channels, model expects " +
                                                    std::to_string(model.channels()));
  WFLOW_CHECK(target >= k && target <= model.depth(),
              "cannot super-resolve from level " + std::to_string(k) + " to level " +
                  std::to_string(target) + " with a depth-" + std::to_string(model.depth()) + " model");
  Tensor current = image;
  for (int i = k; i < target; ++i) {
    const Tensor detail = sampler(i + 1, current);
    current = wavelet::Synthesize(current, detail);
  }
  return image_in.rank() == 3 ? ops::Reshape(current, Shape(current.shape().begin() + 1, current.shape().end()))
                              : current;
}

}  // namespace wflow
