// Orthonormal 2-D Haar analysis and synthesis.
//
// Image planes are tensors of shape [S, S, C] (or batches [N, S, S, C]) with S
// a power of two. One analysis step maps each 2x2 block (a b / c d) of every
// channel to four coefficients:
//
//   low        = (a + b + c + d) / 2
//   horizontal = (a + b - c - d) / 2
//   vertical   = (a - b + c - d) / 2
//   diagonal   = (a - b - c + d) / 2
//
// The filter bank is orthonormal, so the transform has unit Jacobian
// determinant. (The common unnormalized bank uses +-1 entries and is only
// orthogonal; it is not used here.) The low band equals twice the 2x2 box
// average. Detail planes carry 3C channels ordered (horizontal, vertical,
// diagonal) per source channel: channel 3c + o.

#ifndef WFLOW_WAVELET_H_
#define WFLOW_WAVELET_H_

#include <array>
#include <vector>

#include "wflow/tensor.h"

namespace wflow::wavelet {

struct HaarSplit {
  Tensor low;
  Tensor detail;
};

// The 4x4 analysis matrix; rows are (low, horizontal, vertical, diagonal),
// columns the block positions (a, b, c, d).
std::array<std::array<double, 4>, 4> FilterBank();

// log2 of the spatial extent; throws unless the plane is square with a
// power-of-two extent.
int LevelOf(const Tensor& plane);

HaarSplit Analyze(const Tensor& image);
Tensor Synthesize(const Tensor& low, const Tensor& detail);

// h(I) = (I_0, D_0, ..., D_{n-1}); details[i] has spatial extent 2^i.
struct WaveletPyramid {
  Tensor base;
  std::vector<Tensor> details;

  int depth() const { return static_cast<int>(details.size()); }
};

WaveletPyramid BuildPyramid(const Tensor& image);
Tensor CollapsePyramid(const WaveletPyramid& pyramid);

// Repeated low-pass analysis down to spatial extent 2^level.
Tensor LowpassToLevel(const Tensor& image, int level);

}  // namespace wflow::wavelet

#endif  // WFLOW_WAVELET_H_
