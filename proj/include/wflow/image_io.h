// Binary PGM (P5) / PPM (P6) images with maxval 255, and image directories
// as batched tensors.

#ifndef WFLOW_IMAGE_IO_H_
#define WFLOW_IMAGE_IO_H_

#include <cstdint>
#include <string>
#include <vector>

#include "wflow/tensor.h"

namespace wflow {

struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 1;
  // Row-major, channels interleaved.
  std::vector<uint8_t> pixels;
};

// Throws Error naming the byte offset of malformed input.
Image8 DecodeImage(const std::string& bytes);
// P5 for one channel, P6 for three.
std::string EncodeImage(const Image8& image);

Image8 ReadImage(const std::string& path);
void WriteImage(const Image8& image, const std::string& path);

// [H, W, C] doubles in [0, 255].
Tensor ImageToTensor(const Image8& image);
// Rounds and clamps to [0, 255]; accepts [H, W, C] tensors.
Image8 TensorToImage(const Tensor& t);

// Every .pgm/.ppm file of a directory in name order, stacked as [N, H, W, C].
// All images must share one shape.
Tensor ReadImageDir(const std::string& dir);
std::vector<std::string> ListImages(const std::string& dir);

}  // namespace wflow

#endif  // WFLOW_IMAGE_IO_H_
