#include "wflow/synthetic.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "wflow/rng.h"

namespace wflow {
namespace {

constexpr double kMean = 128.0;
constexpr double kStddev = 40.0;

// Signed wrapped offset in (-s/2, s/2].
int Wrap(int d, int s) {
  d = ((d % s) + s) % s;
  return d > s / 2 ? d - s : d;
}

// Kernel normalized to unit L2 norm, so filtered white noise has unit variance.
std::vector<double> Kernel(int s, bool oriented, double angle) {
  std::vector<double> k(s * s);
  const double c = std::cos(angle), sn = std::sin(angle);
  double norm = 0.0;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double dy = Wrap(y, s), dx = Wrap(x, s);
      double e;
      if (oriented) {
        const double u = dx * c + dy * sn, v = -dx * sn + dy * c;
        e = u * u / (2.0 * 3.0 * 3.0) + v * v / (2.0 * 0.7 * 0.7);
      } else {
        e = (dx * dx + dy * dy) / (2.0 * 1.5 * 1.5);
      }
      k[y * s + x] = std::exp(-e);
      norm += k[y * s + x] * k[y * s + x];
    }
  }
  for (double& v : k) v /= std::sqrt(norm);
  return k;
}

}  // namespace

Tensor SyntheticImages(int64_t count, uint64_t seed, const SyntheticOptions& options) {
  const int s = options.extent;
  WFLOW_CHECK(s >= 1 && count >= 1, "synthetic corpus needs positive count and extent");
  WFLOW_CHECK((s & (s - 1)) == 0, "synthetic extent " + std::to_string(s) + " is not a power of two");
  std::vector<double> out;
  out.reserve(count * s * s);
  std::vector<double> noise(s * s);
  for (int64_t i = 0; i < count; ++i) {
    Rng rng(Rng::Derive(seed, {static_cast<uint64_t>(i)}));
    const bool oriented = rng.Uniform() < 0.5;
    const double angle = rng.Uniform() * std::numbers::pi;
    for (double& v : noise) v = rng.Normal();
    const std::vector<double> k = Kernel(s, oriented, angle);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        double f = 0.0;
        for (int ky = 0; ky < s; ++ky) {
          const int sy = (y - ky + s) % s;
          for (int kx = 0; kx < s; ++kx) f += k[ky * s + kx] * noise[sy * s + (x - kx + s) % s];
        }
        double v = kMean + kStddev * f;
        if (options.quantize) v = std::clamp(std::round(v), 0.0, 255.0);
        out.push_back(v);
      }
    }
  }
  return Tensor({count, s, s, 1}, std::move(out));
}

}  // namespace wflow
