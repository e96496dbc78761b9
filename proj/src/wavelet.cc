#include "wflow/wavelet.h"

#include <bit>
#include <string>
#include <utility>

namespace wflow::wavelet {
namespace {

struct PlaneGeometry {
  int64_t batch;
  int64_t extent;
  int64_t channels;
  bool batched;
};

PlaneGeometry Geometry(const Tensor& t, const char* what) {
  WFLOW_CHECK(t.defined(), std::string(what) + ": undefined plane");
  WFLOW_CHECK(t.rank() == 3 || t.rank() == 4,
              std::string(what) + ": expected [S,S,C] or [N,S,S,C], got " + ShapeToString(t.shape()));
  const bool batched = t.rank() == 4;
  const int64_t h = t.dim(-3), w = t.dim(-2);
  WFLOW_CHECK(h == w, std::string(what) + ": plane must be square, got " + ShapeToString(t.shape()));
  return {batched ? t.dim(0) : 1, h, t.dim(-1), batched};
}

Shape MakeShape(const PlaneGeometry& g, int64_t extent, int64_t channels) {
  if (g.batched) return {g.batch, extent, extent, channels};
  return {extent, extent, channels};
}

// Coefficient index helpers for NHWC storage.
inline int64_t At(int64_t b, int64_t y, int64_t x, int64_t c, int64_t s, int64_t ch) {
  return ((b * s + y) * s + x) * ch + c;
}

// Forward analysis of `in` (extent 2s) into low (C) and detail (3C) buffers.
void AnalyzeInto(std::span<const double> in, int64_t batch, int64_t s, int64_t ch, double* low,
                 double* detail) {
  const int64_t big = 2 * s;
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t y = 0; y < s; ++y) {
      for (int64_t x = 0; x < s; ++x) {
        for (int64_t c = 0; c < ch; ++c) {
          const double p00 = in[At(b, 2 * y, 2 * x, c, big, ch)];
          const double p01 = in[At(b, 2 * y, 2 * x + 1, c, big, ch)];
          const double p10 = in[At(b, 2 * y + 1, 2 * x, c, big, ch)];
          const double p11 = in[At(b, 2 * y + 1, 2 * x + 1, c, big, ch)];
          low[At(b, y, x, c, s, ch)] = 0.5 * (p00 + p01 + p10 + p11);
          double* d = detail + At(b, y, x, 3 * c, s, 3 * ch);
          d[0] = 0.5 * (p00 + p01 - p10 - p11);
          d[1] = 0.5 * (p00 - p01 + p10 - p11);
          d[2] = 0.5 * (p00 - p01 - p10 + p11);
        }
      }
    }
  }
}

// Transpose of AnalyzeInto (also its inverse, by orthonormality); accumulates.
void SynthesizeAdd(const double* low, const double* detail, int64_t batch, int64_t s, int64_t ch,
                   double* out) {
  const int64_t big = 2 * s;
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t y = 0; y < s; ++y) {
      for (int64_t x = 0; x < s; ++x) {
        for (int64_t c = 0; c < ch; ++c) {
          const double l = low[At(b, y, x, c, s, ch)];
          const double* d = detail + At(b, y, x, 3 * c, s, 3 * ch);
          out[At(b, 2 * y, 2 * x, c, big, ch)] += 0.5 * (l + d[0] + d[1] + d[2]);
          out[At(b, 2 * y, 2 * x + 1, c, big, ch)] += 0.5 * (l + d[0] - d[1] - d[2]);
          out[At(b, 2 * y + 1, 2 * x, c, big, ch)] += 0.5 * (l - d[0] + d[1] - d[2]);
          out[At(b, 2 * y + 1, 2 * x + 1, c, big, ch)] += 0.5 * (l - d[0] - d[1] + d[2]);
        }
      }
    }
  }
}

}  // namespace

std::array<std::array<double, 4>, 4> FilterBank() {
  return {{{0.5, 0.5, 0.5, 0.5},
           {0.5, 0.5, -0.5, -0.5},
           {0.5, -0.5, 0.5, -0.5},
           {0.5, -0.5, -0.5, 0.5}}};
}

int LevelOf(const Tensor& plane) {
  const PlaneGeometry g = Geometry(plane, "wavelet");
  WFLOW_CHECK(std::has_single_bit(static_cast<uint64_t>(g.extent)),
              "spatial extent must be a power of two, got " + std::to_string(g.extent));
  return std::countr_zero(static_cast<uint64_t>(g.extent));
}

HaarSplit Analyze(const Tensor& image) {
  const PlaneGeometry g = Geometry(image, "haar_analyze");
  WFLOW_CHECK(g.extent >= 2, "haar_analyze: a 1x1 plane has nothing to analyze");
  WFLOW_CHECK(g.extent % 2 == 0, "haar_analyze: extent must be even");
  const int64_t s = g.extent / 2;
  const int64_t ch = g.channels;
  const int64_t low_n = g.batch * s * s * ch;
  std::vector<double> low(low_n), detail(3 * low_n);
  AnalyzeInto(image.data(), g.batch, s, ch, low.data(), detail.data());
  Tensor low_t(MakeShape(g, s, ch), std::move(low));
  Tensor detail_t(MakeShape(g, s, 3 * ch), std::move(detail));
  if (!image.recorded()) return {low_t, detail_t};

  // Each output gets its own node; the adjoint of one band is synthesis with
  // the other band set to zero.
  const std::vector<double> zeros_low(low_n, 0.0), zeros_detail(3 * low_n, 0.0);
  Tensor low_r = MaybeRecord(
      low_t, {image},
      [g, s, ch, zeros_detail](std::span<const double> grad, std::span<std::vector<double>* const> gin) {
        if (gin[0]) SynthesizeAdd(grad.data(), zeros_detail.data(), g.batch, s, ch, gin[0]->data());
      });
  Tensor detail_r = MaybeRecord(
      detail_t, {image},
      [g, s, ch, zeros_low](std::span<const double> grad, std::span<std::vector<double>* const> gin) {
        if (gin[0]) SynthesizeAdd(zeros_low.data(), grad.data(), g.batch, s, ch, gin[0]->data());
      });
  return {low_r, detail_r};
}

Tensor Synthesize(const Tensor& low, const Tensor& detail) {
  const PlaneGeometry gl = Geometry(low, "haar_synthesize");
  const PlaneGeometry gd = Geometry(detail, "haar_synthesize");
  WFLOW_CHECK(low.rank() == detail.rank() && gl.batch == gd.batch && gl.extent == gd.extent,
              "haar_synthesize: low " + ShapeToString(low.shape()) + " and detail " +
                  ShapeToString(detail.shape()) + " differ in spatial shape");
  WFLOW_CHECK(gd.channels == 3 * gl.channels,
              "haar_synthesize: detail must have 3x the low channels");
  const int64_t s = gl.extent, ch = gl.channels;
  std::vector<double> out(gl.batch * 4 * s * s * ch, 0.0);
  SynthesizeAdd(low.data().data(), detail.data().data(), gl.batch, s, ch, out.data());
  Tensor result(MakeShape(gl, 2 * s, ch), std::move(out));
  if (!low.recorded() && !detail.recorded()) return result;
  return MaybeRecord(result, {low, detail},
                     [gl, s, ch](std::span<const double> grad, std::span<std::vector<double>* const> gin) {
                       std::vector<double> gl_buf(gl.batch * s * s * ch), gd_buf(3 * gl_buf.size());
                       AnalyzeInto(grad, gl.batch, s, ch, gl_buf.data(), gd_buf.data());
                       if (gin[0]) {
                         for (size_t i = 0; i < gl_buf.size(); ++i) (*gin[0])[i] += gl_buf[i];
                       }
                       if (gin[1]) {
                         for (size_t i = 0; i < gd_buf.size(); ++i) (*gin[1])[i] += gd_buf[i];
                       }
                     });
}

WaveletPyramid BuildPyramid(const Tensor& image) {
  const int n = LevelOf(image);
  WaveletPyramid pyr;
  pyr.details.resize(n);
  Tensor current = image;
  for (int level = n - 1; level >= 0; --level) {
    HaarSplit split = Analyze(current);
    pyr.details[level] = std::move(split.detail);
    current = std::move(split.low);
  }
  pyr.base = std::move(current);
  return pyr;
}

Tensor CollapsePyramid(const WaveletPyramid& pyramid) {
  const PlaneGeometry g = Geometry(pyramid.base, "collapse_pyramid");
  WFLOW_CHECK(g.extent == 1, "collapse_pyramid: base must be 1x1");
  Tensor current = pyramid.base;
  for (int level = 0; level < pyramid.depth(); ++level) {
    const Tensor& d = pyramid.details[level];
    WFLOW_CHECK(d.defined() && d.rank() == current.rank() && d.dim(-3) == (int64_t{1} << level),
                "collapse_pyramid: detail level " + std::to_string(level) + " has shape " +
                    (d.defined() ? ShapeToString(d.shape()) : std::string("<undefined>")));
    current = Synthesize(current, d);
  }
  return current;
}

Tensor LowpassToLevel(const Tensor& image, int level) {
  const int n = LevelOf(image);
  WFLOW_CHECK(level >= 0 && level <= n, "lowpass_to_level: level " + std::to_string(level) +
                                            " outside [0, " + std::to_string(n) + "]");
  Tensor current = image;
  for (int l = n; l > level; --l) current = Analyze(current).low;
  return current;
}

}  // namespace wflow::wavelet
