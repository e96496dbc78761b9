#include "wflow/flow.h"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <utility>

#include "wflow/ops.h"

namespace wflow {
namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix ToMatrix(const Tensor& t) {
  return Eigen::Map<const Matrix>(t.data().data(), t.dim(0), t.dim(1));
}

Tensor FromMatrix(const Matrix& m) {
  return Tensor({m.rows(), m.cols()}, std::vector<double>(m.data(), m.data() + m.size()));
}

Tensor StrictTriangleMask(int64_t c, bool lower) {
  std::vector<double> m(c * c, 0.0);
  for (int64_t i = 0; i < c; ++i) {
    for (int64_t j = 0; j < c; ++j) {
      if (lower ? j < i : j > i) m[i * c + j] = 1.0;
    }
  }
  return Tensor({c, c}, std::move(m));
}

Tensor PerSampleSum(const Tensor& t) {
  return ops::Reduce(ops::ReduceKind::kSum, t, {1, 2, 3});
}

}  // namespace

int ParameterSet::Add(std::string name, Tensor value, bool trainable) {
  WFLOW_CHECK(!index_.contains(name), "duplicate parameter " + name);
  const int id = size();
  index_.emplace(name, id);
  entries_.push_back({std::move(name), std::move(value), trainable});
  return id;
}

int ParameterSet::IndexOf(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

void ParameterSet::Set(int i, Tensor value) {
  WFLOW_CHECK(value.shape() == entries_[i].value.shape(),
              "parameter " + entries_[i].name + ": shape " + ShapeToString(value.shape()) +
                  " does not match " + ShapeToString(entries_[i].value.shape()));
  entries_[i].value = value.detach();
}

ParameterSet ParameterSet::RecordOn(Tape& tape) const {
  ParameterSet out = *this;
  for (auto& e : out.entries_) {
    if (e.trainable) e.value = tape.leaf(e.value);
  }
  return out;
}

int64_t ParameterSet::TrainableCount() const {
  int64_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.value.numel();
  }
  return n;
}

std::string ToString(CouplingKind kind) {
  return kind == CouplingKind::kAffine ? "affine" : "additive";
}

CouplingKind ParseCouplingKind(const std::string& text) {
  if (text == "affine") return CouplingKind::kAffine;
  if (text == "additive") return CouplingKind::kAdditive;
  throw Error("unknown coupling kind '" + text + "' (expected affine or additive)");
}

Tensor StandardNormalLogProb(const Tensor& z) {
  const double per_dim = -0.5 * std::log(2.0 * std::numbers::pi);
  const int64_t dims = z.numel() / z.dim(0);
  return ops::AddScalar(ops::Scale(PerSampleSum(ops::Square(z)), -0.5), per_dim * dims);
}

LevelFlow::LevelFlow(FlowSpec spec, Rng& rng) : spec_(spec) {
  WFLOW_CHECK(spec_.channels >= 1, "flow needs at least one channel");
  WFLOW_CHECK(spec_.cond_channels >= 0, "negative conditioning channels");
  WFLOW_CHECK(spec_.steps >= 1, "flow needs at least one step");
  WFLOW_CHECK(spec_.hidden_channels >= 1 && spec_.residual_blocks >= 0, "invalid coupling network");
  WFLOW_CHECK(spec_.kernel_size == 1 || spec_.kernel_size == 3, "kernel size must be 1 or 3");

  const int64_t c = spec_.channels;
  const int64_t k = spec_.kernel_size;
  const int64_t width = spec_.hidden_channels;
  const int64_t half = (c + 1) / 2;

  std::vector<double> eye(c * c, 0.0);
  for (int64_t i = 0; i < c; ++i) eye[i * c + i] = 1.0;

  auto hidden = [&](int64_t cin, int64_t cout) {
    std::vector<double> w(k * k * cin * cout);
    for (double& v : w) v = 0.05 * rng.Normal();
    return Tensor({k, k, cin, cout}, std::move(w));
  };

  for (int i = 0; i < spec_.steps; ++i) {
    const std::string p = "step" + std::to_string(i) + ".";
    Step s;
    s.log_scale = params_.Add(p + "actnorm.log_scale", Tensor::Zeros({c}), true);
    s.bias = params_.Add(p + "actnorm.bias", Tensor::Zeros({c}), true);
    s.perm = params_.Add(p + "mix.perm", Tensor({c, c}, eye), false);
    s.sign = params_.Add(p + "mix.sign", Tensor::Full({c}, 1.0), false);
    s.lower = params_.Add(p + "mix.lower", Tensor::Zeros({c, c}), true);
    s.upper = params_.Add(p + "mix.upper", Tensor::Zeros({c, c}), true);
    s.log_diag = params_.Add(p + "mix.log_diag", Tensor::Zeros({c}), true);

    Coupling& cp = s.coupling;
    if (i % 2 == 0) {
      cp.a_begin = 0, cp.a_end = half, cp.b_begin = half, cp.b_end = c;
    } else {
      cp.a_begin = half, cp.a_end = c, cp.b_begin = 0, cp.b_end = half;
    }
    const int64_t na = cp.a_end - cp.a_begin;
    const int64_t nb = cp.b_end - cp.b_begin;
    const int64_t net_in = na + spec_.cond_channels;
    // A single unconditional channel leaves nothing to couple on.
    cp.active = nb > 0 && net_in > 0;
    if (cp.active) {
      const std::string q = p + "coupling.";
      cp.stem.weight = params_.Add(q + "stem.w", hidden(net_in, width), true);
      cp.stem.bias = params_.Add(q + "stem.b", Tensor::Zeros({width}), true);
      for (int r = 0; r < spec_.residual_blocks; ++r) {
        const std::string b = q + "block" + std::to_string(r) + ".";
        Conv c1, c2;
        c1.weight = params_.Add(b + "conv1.w", hidden(width, width), true);
        c1.bias = params_.Add(b + "conv1.b", Tensor::Zeros({width}), true);
        c2.weight = params_.Add(b + "conv2.w", hidden(width, width), true);
        c2.bias = params_.Add(b + "conv2.b", Tensor::Zeros({width}), true);
        cp.blocks.emplace_back(c1, c2);
      }
      const int64_t out_ch = spec_.coupling == CouplingKind::kAffine ? 2 * nb : nb;
      cp.out.weight = params_.Add(q + "out.w", Tensor::Zeros({k, k, width, out_ch}), true);
      cp.out.bias = params_.Add(q + "out.b", Tensor::Zeros({out_ch}), true);
    }
    steps_.push_back(std::move(s));
  }
}

void LevelFlow::InitializeMixing(Rng& rng) {
  const int64_t c = spec_.channels;
  for (const Step& s : steps_) {
    Matrix a(c, c);
    for (int64_t i = 0; i < c; ++i) {
      for (int64_t j = 0; j < c; ++j) a(i, j) = rng.Normal();
    }
    const Matrix q = Eigen::HouseholderQR<Matrix>(a).householderQ();
    // q = P^T L U with partial pivoting; store P^T as the fixed permutation.
    Eigen::PartialPivLU<Matrix> lu(q);
    const Matrix packed = lu.matrixLU();
    const Matrix perm = lu.permutationP().transpose().toDenseMatrix().cast<double>();
    Matrix lower = Matrix::Zero(c, c), upper = Matrix::Zero(c, c);
    std::vector<double> sign(c), log_diag(c);
    for (int64_t i = 0; i < c; ++i) {
      for (int64_t j = 0; j < c; ++j) {
        if (j < i) lower(i, j) = packed(i, j);
        if (j > i) upper(i, j) = packed(i, j);
      }
      sign[i] = packed(i, i) < 0 ? -1.0 : 1.0;
      log_diag[i] = std::log(std::abs(packed(i, i)));
    }
    params_.Set(s.perm, FromMatrix(perm));
    params_.Set(s.sign, Tensor({c}, sign));
    params_.Set(s.lower, FromMatrix(lower));
    params_.Set(s.upper, FromMatrix(upper));
    params_.Set(s.log_diag, Tensor({c}, log_diag));
  }
}

void LevelFlow::Randomize(Rng& rng, double scale) {
  for (int i = 0; i < params_.size(); ++i) {
    if (!params_.trainable(i)) continue;
    std::vector<double> v = params_[i].to_vector();
    for (double& x : v) x += scale * rng.Normal();
    params_.Set(i, Tensor(params_[i].shape(), std::move(v)));
  }
  actnorm_initialized_ = true;
}

void LevelFlow::CheckInputs(const Tensor& x, const Tensor& cond) const {
  WFLOW_CHECK(x.defined() && x.rank() == 4, "flow input must be NHWC");
  WFLOW_CHECK(x.dim(3) == spec_.channels, "flow input has " + std::to_string(x.dim(3)) +
                                              " channels, expected " +
                                              std::to_string(spec_.channels));
  if (conditional()) {
    WFLOW_CHECK(cond.defined(), "conditional flow requires a conditioning plane");
    WFLOW_CHECK(cond.rank() == 4 && cond.dim(0) == x.dim(0) && cond.dim(1) == x.dim(1) &&
                    cond.dim(2) == x.dim(2) && cond.dim(3) == spec_.cond_channels,
                "conditioning shape " + ShapeToString(cond.shape()) + " does not match input " +
                    ShapeToString(x.shape()) + " with " + std::to_string(spec_.cond_channels) +
                    " conditioning channels");
  } else {
    WFLOW_CHECK(!cond.defined(), "unconditional flow given a conditioning plane");
  }
}

Tensor LevelFlow::NormalizedCond(const Tensor& cond) const {
  if (!cond.defined()) return cond;
  return ops::AddScalar(ops::Scale(cond, spec_.cond_scale), -1.0);
}

Tensor LevelFlow::ConvBias(const ParameterSet& p, const Conv& conv, const Tensor& x) const {
  Tensor y = ops::Conv2d(x, p[conv.weight], 1, ops::PadMode::kSameZero);
  return ops::Add(y, ops::BroadcastChannels(p[conv.bias], y.shape()));
}

Tensor LevelFlow::Network(const ParameterSet& p, const Coupling& c, const Tensor& in) const {
  Tensor h = ops::Relu(ConvBias(p, c.stem, in));
  for (const auto& [c1, c2] : c.blocks) {
    h = ops::Add(h, ConvBias(p, c2, ops::Relu(ConvBias(p, c1, h))));
  }
  return ConvBias(p, c.out, h);
}

Tensor LevelFlow::ActnormForward(const ParameterSet& p, const Step& s, const Tensor& x,
                                 Tensor& logdet) const {
  const double area = static_cast<double>(x.dim(1) * x.dim(2));
  logdet = ops::Add(logdet, ops::Scale(ops::Sum(p[s.log_scale]), area));
  Tensor shifted = ops::Add(x, ops::BroadcastChannels(p[s.bias], x.shape()));
  return ops::Mul(shifted, ops::BroadcastChannels(ops::Exp(p[s.log_scale]), x.shape()));
}

Tensor LevelFlow::MixForward(const ParameterSet& p, const Step& s, const Tensor& x,
                             Tensor& logdet) const {
  const int64_t c = spec_.channels;
  const double area = static_cast<double>(x.dim(1) * x.dim(2));
  Tensor lower = ops::Add(ops::Mul(p[s.lower], StrictTriangleMask(c, true)), Tensor::Zeros({c, c}));
  {
    std::vector<double> eye(c * c, 0.0);
    for (int64_t i = 0; i < c; ++i) eye[i * c + i] = 1.0;
    lower = ops::Add(lower, Tensor({c, c}, std::move(eye)));
  }
  Tensor upper = ops::Add(ops::Mul(p[s.upper], StrictTriangleMask(c, false)),
                          ops::Diag(ops::Mul(p[s.sign], ops::Exp(p[s.log_diag]))));
  Tensor w = ops::MatMul(p[s.perm], ops::MatMul(lower, upper));
  logdet = ops::Add(logdet, ops::Scale(ops::Sum(p[s.log_diag]), area));
  return ops::Conv2d(x, ops::Reshape(ops::Transpose(w), {1, 1, c, c}), 1, ops::PadMode::kValid);
}

Tensor LevelFlow::CouplingForward(const ParameterSet& p, const Step& s, const Tensor& x,
                                  const Tensor& condn, Tensor& logdet) const {
  const Coupling& c = s.coupling;
  if (!c.active) return x;
  const bool has_a = c.a_end > c.a_begin;
  Tensor xa = has_a ? ops::SliceChannels(x, c.a_begin, c.a_end) : Tensor();
  Tensor xb = ops::SliceChannels(x, c.b_begin, c.b_end);
  std::vector<Tensor> net_in;
  if (has_a) net_in.push_back(xa);
  if (condn.defined()) net_in.push_back(condn);
  Tensor h = Network(p, c, ops::ConcatChannels(net_in));
  const int64_t nb = c.b_end - c.b_begin;
  Tensor yb;
  if (spec_.coupling == CouplingKind::kAffine) {
    Tensor log_s = ops::Tanh(ops::SliceChannels(h, 0, nb));
    Tensor t = ops::SliceChannels(h, nb, 2 * nb);
    yb = ops::Add(ops::Mul(xb, ops::Exp(log_s)), t);
    logdet = ops::Add(logdet, PerSampleSum(log_s));
  } else {
    yb = ops::Add(xb, h);
  }
  if (!has_a) return yb;
  return c.a_begin < c.b_begin ? ops::ConcatChannels({xa, yb}) : ops::ConcatChannels({yb, xa});
}

Tensor LevelFlow::ActnormInverse(const Step& s, const Tensor& y, Tensor& logdet) const {
  const ParameterSet& p = params_;
  const double area = static_cast<double>(y.dim(1) * y.dim(2));
  logdet = ops::Add(logdet, ops::Scale(ops::Sum(p[s.log_scale]), -area));
  Tensor unscaled = ops::Mul(y, ops::BroadcastChannels(ops::Exp(ops::Neg(p[s.log_scale])), y.shape()));
  return ops::Sub(unscaled, ops::BroadcastChannels(p[s.bias], y.shape()));
}

Tensor LevelFlow::MixInverse(const Step& s, const Tensor& y, Tensor& logdet) const {
  const ParameterSet& p = params_;
  const int64_t c = spec_.channels;
  const double area = static_cast<double>(y.dim(1) * y.dim(2));
  // W = P L U, so W^-1 = U^-1 L^-1 P^T via two triangular solves.
  Matrix lower = ToMatrix(p[s.lower]).triangularView<Eigen::StrictlyLower>();
  lower += Matrix::Identity(c, c);
  Matrix upper = ToMatrix(p[s.upper]).triangularView<Eigen::StrictlyUpper>();
  for (int64_t i = 0; i < c; ++i) upper(i, i) = p[s.sign].at(i) * std::exp(p[s.log_diag].at(i));
  Matrix rhs = ToMatrix(p[s.perm]).transpose();
  lower.triangularView<Eigen::UnitLower>().solveInPlace(rhs);
  upper.triangularView<Eigen::Upper>().solveInPlace(rhs);
  const Matrix kernel = rhs.transpose();
  logdet = ops::Add(logdet, ops::Scale(ops::Sum(p[s.log_diag]), -area));
  return ops::Conv2d(y, Tensor({1, 1, c, c}, std::vector<double>(kernel.data(), kernel.data() + c * c)),
                     1, ops::PadMode::kValid);
}

Tensor LevelFlow::CouplingInverse(const Step& s, const Tensor& y, const Tensor& condn,
                                  Tensor& logdet) const {
  const Coupling& c = s.coupling;
  if (!c.active) return y;
  const bool has_a = c.a_end > c.a_begin;
  Tensor ya = has_a ? ops::SliceChannels(y, c.a_begin, c.a_end) : Tensor();
  Tensor yb = ops::SliceChannels(y, c.b_begin, c.b_end);
  std::vector<Tensor> net_in;
  if (has_a) net_in.push_back(ya);
  if (condn.defined()) net_in.push_back(condn);
  Tensor h = Network(params_, c, ops::ConcatChannels(net_in));
  const int64_t nb = c.b_end - c.b_begin;
  Tensor xb;
  if (spec_.coupling == CouplingKind::kAffine) {
    Tensor log_s = ops::Tanh(ops::SliceChannels(h, 0, nb));
    Tensor t = ops::SliceChannels(h, nb, 2 * nb);
    xb = ops::Mul(ops::Sub(yb, t), ops::Exp(ops::Neg(log_s)));
    logdet = ops::Sub(logdet, PerSampleSum(log_s));
  } else {
    xb = ops::Sub(yb, h);
  }
  if (!has_a) return xb;
  return c.a_begin < c.b_begin ? ops::ConcatChannels({ya, xb}) : ops::ConcatChannels({xb, ya});
}

FlowResult LevelFlow::Forward(const Tensor& x, const Tensor& cond) const {
  return Forward(params_, x, cond);
}

FlowResult LevelFlow::Forward(const ParameterSet& params, const Tensor& x, const Tensor& cond) const {
  CheckInputs(x, cond);
  const Tensor condn = NormalizedCond(cond);
  Tensor logdet = Tensor::Zeros({x.dim(0)});
  Tensor h = x;
  for (const Step& s : steps_) {
    h = ActnormForward(params, s, h, logdet);
    h = MixForward(params, s, h, logdet);
    h = CouplingForward(params, s, h, condn, logdet);
  }
  return {h, logdet};
}

FlowResult LevelFlow::Inverse(const Tensor& z, const Tensor& cond) const {
  CheckInputs(z, cond);
  const Tensor condn = NormalizedCond(cond);
  Tensor logdet = Tensor::Zeros({z.dim(0)});
  Tensor h = z;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
    h = CouplingInverse(*it, h, condn, logdet);
    h = MixInverse(*it, h, logdet);
    h = ActnormInverse(*it, h, logdet);
  }
  return {h, logdet};
}

Tensor LevelFlow::LogProb(const Tensor& x, const Tensor& cond) const {
  return LogProb(params_, x, cond);
}

Tensor LevelFlow::LogProb(const ParameterSet& params, const Tensor& x, const Tensor& cond) const {
  FlowResult r = Forward(params, x, cond);
  return ops::Add(StandardNormalLogProb(r.value), r.logdet);
}

void LevelFlow::InitializeActnorm(const Tensor& x, const Tensor& cond) {
  CheckInputs(x, cond);
  const Tensor condn = NormalizedCond(cond.detach());
  const int64_t c = spec_.channels;
  Tensor logdet = Tensor::Zeros({x.dim(0)});
  Tensor h = x.detach();
  for (const Step& s : steps_) {
    const auto v = h.data();
    const int64_t count = h.numel() / c;
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (int64_t i = 0; i < count; ++i) {
      for (int64_t j = 0; j < c; ++j) mean[j] += v[i * c + j];
    }
    for (double& m : mean) m /= static_cast<double>(count);
    for (int64_t i = 0; i < count; ++i) {
      for (int64_t j = 0; j < c; ++j) {
        const double d = v[i * c + j] - mean[j];
        var[j] += d * d;
      }
    }
    std::vector<double> bias(c), log_scale(c);
    for (int64_t j = 0; j < c; ++j) {
      var[j] /= static_cast<double>(count);
      WFLOW_CHECK(var[j] > 0.0, "actnorm init: channel " + std::to_string(j) +
                                    " has zero variance in the initialization batch");
      bias[j] = -mean[j];
      log_scale[j] = -0.5 * std::log(var[j]);
    }
    params_.Set(s.bias, Tensor({c}, bias));
    params_.Set(s.log_scale, Tensor({c}, log_scale));
    h = ActnormForward(params_, s, h, logdet);
    h = MixForward(params_, s, h, logdet);
    h = CouplingForward(params_, s, h, condn, logdet);
  }
  actnorm_initialized_ = true;
}

}  // namespace wflow
