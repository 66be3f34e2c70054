#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mame {

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
           static_cast<std::size_t>(channels);
  }
  bool operator==(const ImageShape&) const = default;
};

std::string to_string(const ImageShape& shape);

/// Height x width x channels image with intensities in [0, 1], stored row-major
/// (pixel-interleaved, HWC). Immutable once constructed.
class ImageTensor {
 public:
  ImageTensor() = default;
  /// Throws DimensionError on inconsistent shape and NumericError on values outside [0, 1].
  ImageTensor(ImageShape shape, std::vector<double> data);

  static ImageTensor filled(ImageShape shape, double value);
  /// Clamps every value into [0, 1] (NaN is rejected).
  static ImageTensor clamped(ImageShape shape, std::vector<double> data);

  const ImageShape& shape() const { return shape_; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  int channels() const { return shape_.channels; }
  std::span<const double> data() const { return data_; }
  double at(int y, int x, int c) const {
    return data_[(static_cast<std::size_t>(y) * shape_.width + x) * shape_.channels + c];
  }
  bool empty() const { return data_.empty(); }

  bool operator==(const ImageTensor&) const = default;

 private:
  ImageShape shape_{};
  std::vector<double> data_;
};

/// A tensor shaped like an image but without the [0, 1] constraint (pixel gradients).
struct ImageGradient {
  ImageShape shape;
  std::vector<double> data;
};

/// Rounds every intensity to the nearest 8-bit level.
ImageTensor quantize_8bit(const ImageTensor& image);

std::vector<std::uint8_t> encode_png(const ImageTensor& image);
ImageTensor decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::filesystem::path& path, const ImageTensor& image);
/// 8-bit gray, gray+alpha, RGB or RGBA; alpha is dropped.
ImageTensor read_png(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
/// Writes to a temporary sibling then renames, so readers never observe partial files.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace mame
