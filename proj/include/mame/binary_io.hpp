#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mame/error.hpp"
#include "mame/image.hpp"

namespace mame {

/// Little-endian writer for the toolkit's matrix containers.
class BinaryWriter {
 public:
  void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  /// u64 rows, u64 cols, then row-major f64 values.
  void matrix(const Eigen::MatrixXd& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
    }
  }
  std::span<const std::uint8_t> data() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : source_(path.string()) {
    try {
      buf_ = read_file_bytes(path);
    } catch (const IoError& e) {
      throw LoadError(e.what());
    }
  }

  void expect_magic(const char* magic, std::size_t n) {
    need(n);
    if (std::memcmp(buf_.data() + pos_, magic, n) != 0) {
      throw LoadError(source_ + ": bad magic, expected \"" + std::string(magic, n) + "\"");
    }
    pos_ += n;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  Eigen::MatrixXd matrix() {
    const auto rows = u64();
    const auto cols = u64();
    if (rows > (1u << 28) || cols > (1u << 28)) throw LoadError(source_ + ": implausible matrix shape");
    need(rows * cols * 8);
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = f64();
    }
    return m;
  }
  void expect_end() const {
    if (pos_ != buf_.size()) throw LoadError(source_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw LoadError(source_ + ": truncated container");
  }
  std::vector<std::uint8_t> buf_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace mame
