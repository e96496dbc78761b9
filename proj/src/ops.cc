#include "wflow/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <utility>

namespace wflow::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

bool AnyRecorded(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->recorded()) return true;
  }
  return false;
}

void RequireDefined(const Tensor& t, const char* what) {
  WFLOW_CHECK(t.defined(), std::string(what) + ": undefined input tensor");
}

using SharedData = std::shared_ptr<const std::vector<double>>;

SharedData Share(std::vector<double> v) {
  return std::make_shared<const std::vector<double>>(std::move(v));
}

Tensor Binary(OpKind kind, const Tensor& a, const Tensor& b) {
  RequireDefined(a, "elementwise");
  RequireDefined(b, "elementwise");
  const bool same = a.shape() == b.shape();
  WFLOW_CHECK(same || a.numel() == 1 || b.numel() == 1,
              "elementwise shape mismatch: " + ShapeToString(a.shape()) + " vs " +
                  ShapeToString(b.shape()));
  const Shape shape = (same || b.numel() == 1) ? a.shape() : b.shape();
  const int64_t n = NumElements(shape);
  const int64_t sa = a.numel() == n ? 1 : 0;
  const int64_t sb = b.numel() == n ? 1 : 0;
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(n);
  switch (kind) {
    case OpKind::kAdd:
      for (int64_t i = 0; i < n; ++i) out[i] = av[i * sa] + bv[i * sb];
      break;
    case OpKind::kSub:
      for (int64_t i = 0; i < n; ++i) out[i] = av[i * sa] - bv[i * sb];
      break;
    case OpKind::kMul:
      for (int64_t i = 0; i < n; ++i) out[i] = av[i * sa] * bv[i * sb];
      break;
    default:
      throw Error("not a binary op");
  }
  Tensor result(shape, std::move(out));
  if (!AnyRecorded({&a, &b})) return result;
  return MaybeRecord(result, {a, b},
                     [kind, a, b, n, sa, sb](std::span<const double> g,
                                             std::span<std::vector<double>* const> gin) {
                       const auto av = a.data();
                       const auto bv = b.data();
                       if (gin[0]) {
                         auto& ga = *gin[0];
                         if (kind == OpKind::kMul) {
                           for (int64_t i = 0; i < n; ++i) ga[i * sa] += g[i] * bv[i * sb];
                         } else {
                           for (int64_t i = 0; i < n; ++i) ga[i * sa] += g[i];
                         }
                       }
                       if (gin[1]) {
                         auto& gb = *gin[1];
                         if (kind == OpKind::kMul) {
                           for (int64_t i = 0; i < n; ++i) gb[i * sb] += g[i] * av[i * sa];
                         } else if (kind == OpKind::kSub) {
                           for (int64_t i = 0; i < n; ++i) gb[i * sb] -= g[i];
                         } else {
                           for (int64_t i = 0; i < n; ++i) gb[i * sb] += g[i];
                         }
                       }
                     });
}

// Unary op with derivative expressed through the input x and output y.
template <typename F, typename D>
Tensor Unary(const Tensor& a, F f, D dfdx) {
  RequireDefined(a, "elementwise");
  const auto av = a.data();
  const int64_t n = a.numel();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = f(av[i]);
  Tensor result(a.shape(), std::move(out));
  if (!a.recorded()) return result;
  return MaybeRecord(result, {a},
                     [a, result, n, dfdx](std::span<const double> g,
                                          std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       const auto x = a.data();
                       const auto y = result.data();
                       auto& ga = *gin[0];
                       for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
                     });
}

}  // namespace

Tensor Elementwise(OpKind kind, const Tensor& a, const Tensor& b) {
  switch (kind) {
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
      return Binary(kind, a, b);
    case OpKind::kNeg:
      return Unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
    case OpKind::kExp:
      return Unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
    case OpKind::kLog: {
      RequireDefined(a, "log");
      for (double v : a.data()) {
        WFLOW_CHECK(v > 0.0, "log of non-positive value " + std::to_string(v));
      }
      return Unary(a, [](double x) { return std::log(x); },
                   [](double x, double) { return 1.0 / x; });
    }
    case OpKind::kTanh:
      return Unary(a, [](double x) { return std::tanh(x); },
                   [](double, double y) { return 1.0 - y * y; });
    case OpKind::kRelu:
      return Unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                   [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
  }
  throw Error("unknown elementwise op");
}

Tensor Add(const Tensor& a, const Tensor& b) { return Binary(OpKind::kAdd, a, b); }
Tensor Sub(const Tensor& a, const Tensor& b) { return Binary(OpKind::kSub, a, b); }
Tensor Mul(const Tensor& a, const Tensor& b) { return Binary(OpKind::kMul, a, b); }
Tensor Neg(const Tensor& a) { return Elementwise(OpKind::kNeg, a); }
Tensor Exp(const Tensor& a) { return Elementwise(OpKind::kExp, a); }
Tensor Log(const Tensor& a) { return Elementwise(OpKind::kLog, a); }
Tensor Tanh(const Tensor& a) { return Elementwise(OpKind::kTanh, a); }
Tensor Relu(const Tensor& a) { return Elementwise(OpKind::kRelu, a); }

Tensor Square(const Tensor& a) {
  return Unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor Scale(const Tensor& a, double factor) {
  return Unary(a, [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Tensor AddScalar(const Tensor& a, double value) {
  return Unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor Conv2d(const Tensor& input, const Tensor& kernel, int stride, PadMode pad) {
  RequireDefined(input, "conv2d");
  RequireDefined(kernel, "conv2d");
  WFLOW_CHECK(input.rank() == 3 || input.rank() == 4, "conv2d input must be HWC or NHWC");
  WFLOW_CHECK(kernel.rank() == 4, "conv2d kernel must be [kh,kw,cin,cout]");
  WFLOW_CHECK(stride >= 1, "conv2d stride must be >= 1");
  const bool batched = input.rank() == 4;
  const int64_t n = batched ? input.dim(0) : 1;
  const int64_t h = input.dim(-3), w = input.dim(-2), ci = input.dim(-1);
  const int64_t kh = kernel.dim(0), kw = kernel.dim(1), co = kernel.dim(3);
  WFLOW_CHECK(kernel.dim(2) == ci, "conv2d channel mismatch: input " + std::to_string(ci) +
                                       ", kernel " + std::to_string(kernel.dim(2)));

  int64_t ho, wo, pad_top = 0, pad_left = 0;
  if (pad == PadMode::kValid) {
    WFLOW_CHECK(kh <= h && kw <= w, "conv2d kernel larger than input (dimension underflow)");
    ho = (h - kh) / stride + 1;
    wo = (w - kw) / stride + 1;
  } else {
    ho = (h + stride - 1) / stride;
    wo = (w + stride - 1) / stride;
    const int64_t pad_h = std::max<int64_t>((ho - 1) * stride + kh - h, 0);
    const int64_t pad_w = std::max<int64_t>((wo - 1) * stride + kw - w, 0);
    WFLOW_CHECK(kh <= h + pad_h && kw <= w + pad_w, "conv2d dimension underflow");
    pad_top = pad_h / 2;
    pad_left = pad_w / 2;
  }

  const int64_t rows = n * ho * wo;
  const int64_t depth = kh * kw * ci;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad_top == 0 && pad_left == 0;

  SharedData cols;
  if (pointwise) {
    cols = nullptr;
  } else {
    std::vector<double> c(rows * depth, 0.0);
    const auto in = input.data();
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
          double* row = c.data() + ((b * ho + oy) * wo + ox) * depth;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * stride + ky - pad_top;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * stride + kx - pad_left;
              if (ix < 0 || ix >= w) continue;
              const double* src = in.data() + ((b * h + iy) * w + ix) * ci;
              std::copy(src, src + ci, row + (ky * kw + kx) * ci);
            }
          }
        }
      }
    }
    cols = Share(std::move(c));
  }
  const double* cols_ptr = pointwise ? input.data().data() : cols->data();

  std::vector<double> out(rows * co);
  MatMap(out.data(), rows, co).noalias() =
      ConstMatMap(cols_ptr, rows, depth) * ConstMatMap(kernel.data().data(), depth, co);
  Shape out_shape = batched ? Shape{n, ho, wo, co} : Shape{ho, wo, co};
  Tensor result(std::move(out_shape), std::move(out));
  if (!AnyRecorded({&input, &kernel})) return result;

  return MaybeRecord(
      result, {input, kernel},
      [=](std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const double* cp = pointwise ? input.data().data() : cols->data();
        ConstMatMap gout(g.data(), rows, co);
        if (gin[1]) {
          MatMap(gin[1]->data(), depth, co).noalias() += ConstMatMap(cp, rows, depth).transpose() * gout;
        }
        if (gin[0]) {
          const ConstMatMap kmat(kernel.data().data(), depth, co);
          if (pointwise) {
            MatMap(gin[0]->data(), rows, depth).noalias() += gout * kmat.transpose();
            return;
          }
          RowMat gcols = gout * kmat.transpose();
          auto& gi = *gin[0];
          for (int64_t b = 0; b < n; ++b) {
            for (int64_t oy = 0; oy < ho; ++oy) {
              for (int64_t ox = 0; ox < wo; ++ox) {
                const double* row = gcols.data() + ((b * ho + oy) * wo + ox) * depth;
                for (int64_t ky = 0; ky < kh; ++ky) {
                  const int64_t iy = oy * stride + ky - pad_top;
                  if (iy < 0 || iy >= h) continue;
                  for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t ix = ox * stride + kx - pad_left;
                    if (ix < 0 || ix >= w) continue;
                    double* dst = gi.data() + ((b * h + iy) * w + ix) * ci;
                    const double* src = row + (ky * kw + kx) * ci;
                    for (int64_t c = 0; c < ci; ++c) dst[c] += src[c];
                  }
                }
              }
            }
          }
        }
      });
}

Tensor Reduce(ReduceKind kind, const Tensor& a, const std::vector<int>& axes) {
  RequireDefined(a, "reduce");
  if (axes.empty()) return a;
  std::vector<bool> reduced(a.rank(), false);
  for (int axis : axes) {
    WFLOW_CHECK(axis >= 0 && axis < a.rank(), "reduce: invalid axis " + std::to_string(axis));
    WFLOW_CHECK(!reduced[axis], "reduce: repeated axis " + std::to_string(axis));
    reduced[axis] = true;
  }
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i) {
    if (!reduced[i]) out_shape.push_back(a.dim(i));
  }
  if (out_shape.empty()) out_shape = {1};

  // Output stride of each input axis (0 for reduced axes).
  std::vector<int64_t> out_stride(a.rank(), 0);
  int64_t s = 1;
  for (int i = a.rank() - 1; i >= 0; --i) {
    if (!reduced[i]) {
      out_stride[i] = s;
      s *= a.dim(i);
    }
  }
  const int64_t n = a.numel();
  std::vector<int64_t> target(n);
  {
    std::vector<int64_t> idx(a.rank(), 0);
    int64_t off = 0;
    for (int64_t i = 0; i < n; ++i) {
      target[i] = off;
      for (int ax = a.rank() - 1; ax >= 0; --ax) {
        ++idx[ax];
        off += out_stride[ax];
        if (idx[ax] < a.dim(ax)) break;
        off -= out_stride[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }
  const int64_t out_n = NumElements(out_shape);
  const double scale = kind == ReduceKind::kMean ? static_cast<double>(out_n) / n : 1.0;
  const auto av = a.data();
  std::vector<double> out(out_n, 0.0);
  for (int64_t i = 0; i < n; ++i) out[target[i]] += av[i];
  if (kind == ReduceKind::kMean) {
    for (double& v : out) v *= scale;
  }
  Tensor result(out_shape, std::move(out));
  if (!a.recorded()) return result;
  auto shared_target = std::make_shared<const std::vector<int64_t>>(std::move(target));
  return MaybeRecord(result, {a},
                     [shared_target, n, scale](std::span<const double> g,
                                               std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       auto& ga = *gin[0];
                       const auto& t = *shared_target;
                       for (int64_t i = 0; i < n; ++i) ga[i] += g[t[i]] * scale;
                     });
}

Tensor Sum(const Tensor& a) {
  std::vector<int> axes(a.rank());
  for (int i = 0; i < a.rank(); ++i) axes[i] = i;
  return Reduce(ReduceKind::kSum, a, axes);
}

Tensor Mean(const Tensor& a) {
  std::vector<int> axes(a.rank());
  for (int i = 0; i < a.rank(); ++i) axes[i] = i;
  return Reduce(ReduceKind::kMean, a, axes);
}

Tensor Reshape(const Tensor& a, Shape shape) {
  RequireDefined(a, "reshape");
  WFLOW_CHECK(NumElements(shape) == a.numel(), "reshape: element count mismatch " +
                                                   ShapeToString(a.shape()) + " -> " +
                                                   ShapeToString(shape));
  Tensor result(std::move(shape), a.to_vector());
  if (!a.recorded()) return result;
  return MaybeRecord(result, {a},
                     [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       auto& ga = *gin[0];
                       for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     });
}

Tensor SliceChannels(const Tensor& a, int64_t begin, int64_t end) {
  RequireDefined(a, "slice_channels");
  const int64_t c = a.dim(-1);
  WFLOW_CHECK(0 <= begin && begin < end && end <= c, "slice_channels: invalid range");
  const int64_t outer = a.numel() / c;
  const int64_t width = end - begin;
  const auto av = a.data();
  std::vector<double> out(outer * width);
  for (int64_t i = 0; i < outer; ++i) {
    std::copy(av.begin() + i * c + begin, av.begin() + i * c + end, out.begin() + i * width);
  }
  Shape shape = a.shape();
  shape.back() = width;
  Tensor result(std::move(shape), std::move(out));
  if (!a.recorded()) return result;
  return MaybeRecord(result, {a},
                     [outer, width, c, begin](std::span<const double> g,
                                              std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       auto& ga = *gin[0];
                       for (int64_t i = 0; i < outer; ++i) {
                         for (int64_t j = 0; j < width; ++j) ga[i * c + begin + j] += g[i * width + j];
                       }
                     });
}

Tensor ConcatChannels(const std::vector<Tensor>& parts) {
  WFLOW_CHECK(!parts.empty(), "concat_channels: no inputs");
  if (parts.size() == 1) return parts[0];
  Shape lead = parts[0].shape();
  lead.pop_back();
  int64_t total = 0;
  std::vector<int64_t> widths;
  for (const Tensor& p : parts) {
    RequireDefined(p, "concat_channels");
    Shape l = p.shape();
    l.pop_back();
    WFLOW_CHECK(l == lead, "concat_channels: leading shapes differ");
    widths.push_back(p.dim(-1));
    total += p.dim(-1);
  }
  const int64_t outer = NumElements(lead);
  std::vector<double> out(outer * total);
  int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    const int64_t wk = widths[k];
    for (int64_t i = 0; i < outer; ++i) {
      std::copy(pv.begin() + i * wk, pv.begin() + (i + 1) * wk, out.begin() + i * total + off);
    }
    off += wk;
  }
  Shape shape = lead;
  shape.push_back(total);
  Tensor result(std::move(shape), std::move(out));
  bool any = false;
  for (const Tensor& p : parts) any = any || p.recorded();
  if (!any) return result;
  return MaybeRecord(result, parts,
                     [widths, outer, total](std::span<const double> g,
                                            std::span<std::vector<double>* const> gin) {
                       int64_t off = 0;
                       for (size_t k = 0; k < widths.size(); ++k) {
                         const int64_t wk = widths[k];
                         if (gin[k]) {
                           auto& gk = *gin[k];
                           for (int64_t i = 0; i < outer; ++i) {
                             for (int64_t j = 0; j < wk; ++j) gk[i * wk + j] += g[i * total + off + j];
                           }
                         }
                         off += wk;
                       }
                     });
}

Tensor BroadcastChannels(const Tensor& v, const Shape& shape) {
  RequireDefined(v, "broadcast_channels");
  WFLOW_CHECK(v.rank() == 1, "broadcast_channels: source must be rank 1");
  WFLOW_CHECK(!shape.empty() && shape.back() == v.numel(),
              "broadcast_channels: last extent must equal source length");
  const int64_t c = v.numel();
  const int64_t outer = NumElements(shape) / c;
  const auto vv = v.data();
  std::vector<double> out(outer * c);
  for (int64_t i = 0; i < outer; ++i) std::copy(vv.begin(), vv.end(), out.begin() + i * c);
  Tensor result(shape, std::move(out));
  if (!v.recorded()) return result;
  return MaybeRecord(result, {v},
                     [outer, c](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       auto& gv = *gin[0];
                       for (int64_t i = 0; i < outer; ++i) {
                         for (int64_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
                       }
                     });
}

Tensor SliceBatch(const Tensor& a, int64_t begin, int64_t end) {
  RequireDefined(a, "slice_batch");
  const int64_t n = a.dim(0);
  WFLOW_CHECK(0 <= begin && begin < end && end <= n, "slice_batch: invalid range");
  const int64_t inner = a.numel() / n;
  const auto av = a.data();
  std::vector<double> out(av.begin() + begin * inner, av.begin() + end * inner);
  Shape shape = a.shape();
  shape[0] = end - begin;
  Tensor result(std::move(shape), std::move(out));
  if (!a.recorded()) return result;
  return MaybeRecord(result, {a},
                     [begin, inner](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       auto& ga = *gin[0];
                       for (size_t i = 0; i < g.size(); ++i) ga[begin * inner + i] += g[i];
                     });
}

Tensor ConcatBatch(const std::vector<Tensor>& parts) {
  WFLOW_CHECK(!parts.empty(), "concat_batch: no inputs");
  if (parts.size() == 1) return parts[0];
  Shape inner_shape(parts[0].shape().begin() + 1, parts[0].shape().end());
  int64_t total = 0;
  std::vector<int64_t> sizes;
  for (const Tensor& p : parts) {
    RequireDefined(p, "concat_batch");
    WFLOW_CHECK(Shape(p.shape().begin() + 1, p.shape().end()) == inner_shape,
                "concat_batch: trailing shapes differ");
    total += p.dim(0);
    sizes.push_back(p.numel());
  }
  std::vector<double> out;
  out.reserve(total * NumElements(inner_shape));
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Shape shape = parts[0].shape();
  shape[0] = total;
  Tensor result(std::move(shape), std::move(out));
  bool any = false;
  for (const Tensor& p : parts) any = any || p.recorded();
  if (!any) return result;
  return MaybeRecord(result, parts,
                     [sizes](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       int64_t off = 0;
                       for (size_t k = 0; k < sizes.size(); ++k) {
                         if (gin[k]) {
                           auto& gk = *gin[k];
                           for (int64_t i = 0; i < sizes[k]; ++i) gk[i] += g[off + i];
                         }
                         off += sizes[k];
                       }
                     });
}

Tensor MatMul(const Tensor& a, const Tensor& b) {
  RequireDefined(a, "matmul");
  RequireDefined(b, "matmul");
  WFLOW_CHECK(a.rank() == 2 && b.rank() == 2, "matmul: operands must be matrices");
  WFLOW_CHECK(a.dim(1) == b.dim(0), "matmul: inner dimensions differ");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  Tensor result({m, n}, std::move(out));
  if (!AnyRecorded({&a, &b})) return result;
  return MaybeRecord(result, {a, b},
                     [a, b, m, k, n](std::span<const double> g,
                                     std::span<std::vector<double>* const> gin) {
                       ConstMatMap gm(g.data(), m, n);
                       if (gin[0]) {
                         MatMap(gin[0]->data(), m, k).noalias() +=
                             gm * ConstMatMap(b.data().data(), k, n).transpose();
                       }
                       if (gin[1]) {
                         MatMap(gin[1]->data(), k, n).noalias() +=
                             ConstMatMap(a.data().data(), m, k).transpose() * gm;
                       }
                     });
}

Tensor Transpose(const Tensor& a) {
  RequireDefined(a, "transpose");
  WFLOW_CHECK(a.rank() == 2, "transpose: operand must be a matrix");
  const int64_t m = a.dim(0), n = a.dim(1);
  const auto av = a.data();
  std::vector<double> out(m * n);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  Tensor result({n, m}, std::move(out));
  if (!a.recorded()) return result;
  return MaybeRecord(result, {a},
                     [m, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       auto& ga = *gin[0];
                       for (int64_t i = 0; i < m; ++i) {
                         for (int64_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                       }
                     });
}

Tensor Diag(const Tensor& v) {
  RequireDefined(v, "diag");
  WFLOW_CHECK(v.rank() == 1, "diag: source must be rank 1");
  const int64_t n = v.numel();
  std::vector<double> out(n * n, 0.0);
  for (int64_t i = 0; i < n; ++i) out[i * n + i] = v.at(i);
  Tensor result({n, n}, std::move(out));
  if (!v.recorded()) return result;
  return MaybeRecord(result, {v},
                     [n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       for (int64_t i = 0; i < n; ++i) (*gin[0])[i] += g[i * n + i];
                     });
}

}  // namespace wflow::ops
