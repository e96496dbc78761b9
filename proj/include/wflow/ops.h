// Differentiable tensor operations. Every function records itself on the tape
// of its recorded inputs (if any) so that Tape::backward can propagate through
// it. Binary elementwise operations require equal shapes; the only implicit
// broadcast is from a single-element tensor.

#ifndef WFLOW_OPS_H_
#define WFLOW_OPS_H_

#include <vector>

#include "wflow/tensor.h"

namespace wflow::ops {

enum class OpKind { kAdd, kSub, kMul, kNeg, kExp, kLog, kTanh, kRelu };

// Generic entry point; `b` is required for add/sub/mul and ignored otherwise.
Tensor Elementwise(OpKind kind, const Tensor& a, const Tensor& b = Tensor());

Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Neg(const Tensor& a);
Tensor Exp(const Tensor& a);
// Throws on non-positive input.
Tensor Log(const Tensor& a);
Tensor Tanh(const Tensor& a);
Tensor Relu(const Tensor& a);
Tensor Square(const Tensor& a);
Tensor Scale(const Tensor& a, double factor);
Tensor AddScalar(const Tensor& a, double value);

enum class PadMode { kValid, kSameZero };

// Cross-correlation over NHWC input (rank 4) or HWC input (rank 3, treated as
// a batch of one). Kernel layout is [kh, kw, c_in, c_out]. Same-zero padding
// follows the usual convention: output extent ceil(in / stride), with the odd
// padding element placed after.
Tensor Conv2d(const Tensor& input, const Tensor& kernel, int stride, PadMode pad);

enum class ReduceKind { kSum, kMean };

// Reduces over `axes` (dropped from the result). An empty axis list returns
// the input; reducing every axis yields shape [1]. Summation runs in
// row-major order.
Tensor Reduce(ReduceKind kind, const Tensor& a, const std::vector<int>& axes);
Tensor Sum(const Tensor& a);
Tensor Mean(const Tensor& a);

Tensor Reshape(const Tensor& a, Shape shape);

// Channel (last-axis) slicing, [begin, end).
Tensor SliceChannels(const Tensor& a, int64_t begin, int64_t end);
Tensor ConcatChannels(const std::vector<Tensor>& parts);

// Tiles a rank-1 tensor of length C over `shape`, whose last extent is C.
Tensor BroadcastChannels(const Tensor& v, const Shape& shape);

// Leading-axis slicing and concatenation (batch handling).
Tensor SliceBatch(const Tensor& a, int64_t begin, int64_t end);
Tensor ConcatBatch(const std::vector<Tensor>& parts);

Tensor MatMul(const Tensor& a, const Tensor& b);
Tensor Transpose(const Tensor& a);
// Square matrix with `v` on the diagonal.
Tensor Diag(const Tensor& v);

}  // namespace wflow::ops

#endif  // WFLOW_OPS_H_
