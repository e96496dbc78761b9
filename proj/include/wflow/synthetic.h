// Desk-scale synthetic corpus: each image is a Gaussian random field on the
// torus, drawn from one of two textures with equal probability. Texture 0 is
// smooth and isotropic; texture 1 is elongated along a random direction.
// Fields have unit marginal variance and are mapped to 128 + 40 * field.

#ifndef WFLOW_SYNTHETIC_H_
#define WFLOW_SYNTHETIC_H_

#include <cstdint>

#include "wflow/tensor.h"

namespace wflow {

struct SyntheticOptions {
  int extent = 16;
  // Round and clamp to 8-bit intensities; otherwise values stay continuous.
  bool quantize = true;
};

// [count, extent, extent, 1]; image i depends only on (seed, i).
Tensor SyntheticImages(int64_t count, uint64_t seed, const SyntheticOptions& options = {});

}  // namespace wflow

#endif  // WFLOW_SYNTHETIC_H_
