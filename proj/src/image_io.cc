#include "wflow/image_io.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace wflow {
namespace {

class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes) : bytes_(bytes) {}

  [[noreturn]] void Fail(const std::string& what) const {
    throw Error("image decode: " + what + " at byte offset " + std::to_string(pos_));
  }

  void SkipSpaceAndComments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  int ReadInt(const char* field) {
    SkipSpaceAndComments();
    if (pos_ >= bytes_.size()) Fail(std::string("truncated header while reading ") + field);
    if (!std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      Fail(std::string("expected decimal ") + field);
    }
    long long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 1 << 20) Fail(std::string(field) + " too large");
      ++pos_;
    }
    return static_cast<int>(v);
  }

  size_t pos() const { return pos_; }
  void Advance(size_t n) { pos_ += n; }

 private:
  const std::string& bytes_;
  size_t pos_ = 0;
};

std::string ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Image8 DecodeImage(const std::string& bytes) {
  HeaderReader r(bytes);
  if (bytes.size() < 2 || bytes[0] != 'P') r.Fail("missing PNM magic");
  Image8 img;
  switch (bytes[1]) {
    case '5':
      img.channels = 1;
      break;
    case '6':
      img.channels = 3;
      break;
    case '1':
    case '2':
    case '3':
    case '4':
      throw Error(std::string("image decode: unsupported variant P") + bytes[1] +
                  " at byte offset 0 (only binary P5/P6 are supported)");
    default:
      r.Fail("unknown PNM magic");
  }
  r.Advance(2);
  img.width = r.ReadInt("width");
  img.height = r.ReadInt("height");
  if (img.width <= 0 || img.height <= 0) r.Fail("zero image extent");
  const int maxval = r.ReadInt("maxval");
  if (maxval != 255) r.Fail("maxval " + std::to_string(maxval) + " unsupported (expected 255)");
  if (r.pos() >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos()]))) {
    r.Fail("expected whitespace after maxval");
  }
  r.Advance(1);
  const size_t need = static_cast<size_t>(img.width) * img.height * img.channels;
  if (bytes.size() - r.pos() < need) {
    throw Error("image decode: truncated payload at byte offset " + std::to_string(bytes.size()) +
                " (expected " + std::to_string(need) + " pixel bytes from offset " +
                std::to_string(r.pos()) + ")");
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos()),
                    bytes.begin() + static_cast<std::ptrdiff_t>(r.pos() + need));
  return img;
}

std::string EncodeImage(const Image8& image) {
  WFLOW_CHECK(image.channels == 1 || image.channels == 3,
              "only 1- or 3-channel images can be written, got " + std::to_string(image.channels));
  WFLOW_CHECK(image.pixels.size() == static_cast<size_t>(image.width) * image.height * image.channels,
              "image pixel buffer does not match its shape");
  std::string out = (image.channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.width) + " " +
                    std::to_string(image.height) + "\n255\n";
  out.append(image.pixels.begin(), image.pixels.end());
  return out;
}

Image8 ReadImage(const std::string& path) {
  try {
    return DecodeImage(ReadFile(path));
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

void WriteImage(const Image8& image, const std::string& path) {
  const std::string bytes = EncodeImage(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path);
}

Tensor ImageToTensor(const Image8& image) {
  std::vector<double> v(image.pixels.begin(), image.pixels.end());
  return Tensor({image.height, image.width, image.channels}, std::move(v));
}

Image8 TensorToImage(const Tensor& t) {
  WFLOW_CHECK(t.rank() == 3, "image tensor must be [H,W,C], got " + ShapeToString(t.shape()));
  WFLOW_CHECK(t.dim(2) == 1 || t.dim(2) == 3,
              "images need 1 or 3 channels, got " + std::to_string(t.dim(2)));
  Image8 img;
  img.height = static_cast<int>(t.dim(0));
  img.width = static_cast<int>(t.dim(1));
  img.channels = static_cast<int>(t.dim(2));
  img.pixels.reserve(t.numel());
  for (double v : t.data()) {
    const double c = std::clamp(std::round(v), 0.0, 255.0);
    img.pixels.push_back(static_cast<uint8_t>(std::isnan(v) ? 0.0 : c));
  }
  return img;
}

std::vector<std::string> ListImages(const std::string& dir) {
  namespace fs = std::filesystem;
  WFLOW_CHECK(fs::is_directory(dir), "not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

Tensor ReadImageDir(const std::string& dir) {
  const std::vector<std::string> files = ListImages(dir);
  WFLOW_CHECK(!files.empty(), "no .pgm/.ppm images in " + dir);
  std::vector<double> data;
  Shape first;
  for (const std::string& f : files) {
    const Image8 img = ReadImage(f);
    const Shape s = {img.height, img.width, img.channels};
    if (first.empty()) first = s;
    WFLOW_CHECK(s == first, f + ": shape " + ShapeToString(s) + " differs from " + ShapeToString(first));
    data.insert(data.end(), img.pixels.begin(), img.pixels.end());
  }
  Shape shape = first;
  shape.insert(shape.begin(), static_cast<int64_t>(files.size()));
  return Tensor(shape, std::move(data));
}

}  // namespace wflow
