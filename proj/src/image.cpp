#include "mame/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mame/error.hpp"

namespace mame {

std::string to_string(const ImageShape& shape) {
  std::ostringstream os;
  os << shape.height << "x" << shape.width << "x" << shape.channels;
  return os.str();
}

ImageTensor::ImageTensor(ImageShape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  if (shape_.height <= 0 || shape_.width <= 0 || (shape_.channels != 1 && shape_.channels != 3)) {
    throw DimensionError("invalid image shape " + to_string(shape_));
  }
  if (data_.size() != shape_.size()) {
    throw DimensionError("image data length " + std::to_string(data_.size()) +
                         " does not match shape " + to_string(shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!(data_[i] >= 0.0 && data_[i] <= 1.0)) {
      throw NumericError("image intensity " + std::to_string(data_[i]) + " at index " +
                         std::to_string(i) + " outside [0,1]");
    }
  }
}

ImageTensor ImageTensor::filled(ImageShape shape, double value) {
  return ImageTensor(shape, std::vector<double>(shape.size(), value));
}

ImageTensor ImageTensor::clamped(ImageShape shape, std::vector<double> data) {
  for (double& v : data) {
    if (std::isnan(v)) throw NumericError("NaN intensity");
    v = std::clamp(v, 0.0, 1.0);
  }
  return ImageTensor(shape, std::move(data));
}

ImageTensor quantize_8bit(const ImageTensor& image) {
  std::vector<double> data(image.data().begin(), image.data().end());
  for (double& v : data) v = std::round(v * 255.0) / 255.0;
  return ImageTensor(image.shape(), std::move(data));
}

namespace {

struct PngWriteBuffer {
  std::vector<std::uint8_t> bytes;
};

void png_write_callback(png_structp png, png_bytep data, png_size_t length) {
  auto* buffer = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buffer->bytes.insert(buffer->bytes.end(), data, data + length);
}

void png_flush_callback(png_structp) {}

struct PngReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void png_read_callback(png_structp png, png_bytep out, png_size_t length) {
  auto* cursor = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + length > cursor->bytes.size()) {
    png_error(png, "truncated PNG stream");
  }
  std::memcpy(out, cursor->bytes.data() + cursor->offset, length);
  cursor->offset += length;
}

[[noreturn]] void png_error_callback(png_structp png, png_const_charp message) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = message;
  png_longjmp(png, 1);
}

void png_warning_callback(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const ImageTensor& image) {
  const int h = image.height();
  const int w = image.width();
  const int c = image.channels();
  std::vector<std::uint8_t> pixels(image.shape().size());
  auto src = image.data();
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<std::uint8_t>(std::lround(src[i] * 255.0));
  }

  std::string message;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_callback, png_warning_callback);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  PngWriteBuffer buffer;
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encode failed: " + message);
  }
  png_set_write_fn(png, &buffer, png_write_callback, png_flush_callback);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    rows[static_cast<std::size_t>(y)] = pixels.data() + static_cast<std::size_t>(y) * w * c;
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(buffer.bytes);
}

ImageTensor decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw IoError("not a PNG stream");
  }
  std::string message;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_callback, png_warning_callback);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  PngReadCursor cursor{bytes, 0};
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("PNG decode failed: " + message);
  }
  png_set_read_fn(png, &cursor, png_read_callback);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int type = png_get_color_type(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG channel count " + std::to_string(channels));
  }
  pixels.resize(static_cast<std::size_t>(w) * h * channels);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * w * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::vector<double> data(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) data[i] = pixels[i] / 255.0;
  return ImageTensor({static_cast<int>(h), static_cast<int>(w), channels}, std::move(data));
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
  write_file_atomic(path, encode_png(image));
}

ImageTensor read_png(const std::filesystem::path& path) {
  try {
    return decode_png(read_file_bytes(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  write_file_bytes(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace mame
