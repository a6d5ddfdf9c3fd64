#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rawkit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent pipeline parameters.
class ParamError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (NPY, PNG).
class FormatError : public Error {
 public:
  using Error::Error;
};

// JSON documents that do not match the manifest/params/report schemas.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Data that cannot support the requested estimate (rank deficiency, no valid pixels, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Interleaved row-major image: element (y, x, c) lives at (y * width + x) * channels + c.
/// This is the C-contiguous (H, W, C) layout used by the NPY codec.
template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(int height, int width, int channels, T fill = T{})
      : height_(height), width_(width), channels_(channels) {
    if (height < 0 || width < 0 || channels < 1) {
      throw DimensionError("image dimensions must be nonnegative with at least one channel");
    }
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  std::size_t pixels() const { return static_cast<std::size_t>(height_) * width_; }
  bool empty() const { return data_.empty(); }

  std::size_t index(int y, int x, int c = 0) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }
  T& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
  const T& at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

  T* row(int y) { return data_.data() + index(y, 0, 0); }
  const T* row(int y) const { return data_.data() + index(y, 0, 0); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  template <typename U>
  bool same_shape(const Image<U>& o) const {
    return height_ == o.height() && width_ == o.width() && channels_ == o.channels();
  }

  bool operator==(const Image&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<T> data_;
};

using ImageF = Image<double>;
using ImageU8 = Image<std::uint8_t>;
using ImageU16 = Image<std::uint16_t>;

/// Per-site boolean mask; true marks a clipped or saturated sample.
///
/// Masks live at full mosaic / RGB resolution. A packed (h/2, w/2, 4) image is annotated by a
/// (h, w) mask: packed sample (i, j, c) corresponds to the mosaic site of channel c in block (i, j).
class ClipMask {
 public:
  ClipMask() = default;
  ClipMask(int height, int width) : bits_(height, width, 1, 0) {}

  int height() const { return bits_.height(); }
  int width() const { return bits_.width(); }
  bool at(int y, int x) const { return bits_.at(y, x) != 0; }
  void set(int y, int x, bool v = true) { bits_.at(y, x) = v ? 1 : 0; }

  void merge(const ClipMask& other) {
    if (other.height() != height() || other.width() != width()) {
      throw DimensionError("clip mask shapes differ");
    }
    auto dst = bits_.data();
    auto src = other.bits_.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] |= src[i];
  }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.data().begin(), bits_.data().end(), 1));
  }
  double fraction() const {
    return bits_.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(bits_.size());
  }
  const ImageU8& bits() const { return bits_; }

  bool operator==(const ClipMask&) const = default;

 private:
  ImageU8 bits_;
};

/// Checks that `mask` can annotate an image of the given shape: either the same (h, w), or the
/// (2h, 2w) mosaic of a packed 4-channel image.
inline void check_mask_shape(const ClipMask& mask, int height, int width, int channels) {
  const bool same = mask.height() == height && mask.width() == width;
  const bool mosaic = channels == 4 && mask.height() == 2 * height && mask.width() == 2 * width;
  if (!same && !mosaic) {
    throw DimensionError("mask is " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
                         ", image is " + std::to_string(height) + "x" + std::to_string(width));
  }
}

/// Whether sample (y, x, c) is masked. Mosaic-size masks address packed RGGB samples.
inline bool sample_masked(const ClipMask& mask, int height, int y, int x, int c) {
  if (mask.height() == height) return mask.at(y, x);
  return mask.at(2 * y + c / 2, 2 * x + c % 2);
}

}  // namespace rawkit
