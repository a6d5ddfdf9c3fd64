#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>

#include "rawkit/dataio.hpp"

namespace rawkit {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngPixels {
  int width = 0;
  int height = 0;
  int bit_depth = 0;
  int color_type = 0;
  int channels = 0;
  std::vector<std::uint16_t> samples;
};

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text != nullptr) *text = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

PngPixels read_png_samples(const fs::path& path) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw Error("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError("not a PNG file: " + path.string());
  }
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  if (png == nullptr) throw Error("libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  PngPixels out;
  std::vector<png_bytep> rows;
  std::vector<png_byte> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("PNG decode error in " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  out.color_type = png_get_color_type(png, info);
  out.channels = png_get_channels(png, info);
  if (out.color_type == PNG_COLOR_TYPE_PALETTE || out.bit_depth < 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    out.samples.clear();
    return out;  // caller rejects
  }
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = buffer.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(out.width) * out.height * out.channels;
  out.samples.resize(n);
  if (out.bit_depth == 16) {
    for (std::size_t k = 0; k < n; ++k) out.samples[k] = static_cast<std::uint16_t>((buffer[2 * k] << 8) | buffer[2 * k + 1]);
  } else {
    for (std::size_t k = 0; k < n; ++k) out.samples[k] = buffer[k];
  }
  return out;
}

void write_png(const fs::path& path, int width, int height, int color_type, int bit_depth,
               const std::vector<png_byte>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw Error("cannot write " + path.string());
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  if (png == nullptr) throw Error("libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(bytes.data() + rowbytes * y);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("PNG encode error in " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

RgbImage read_rgb_png(const fs::path& path) {
  const PngPixels px = read_png_samples(path);
  if (px.color_type == PNG_COLOR_TYPE_PALETTE) throw FormatError("unsupported PNG: paletted image " + path.string());
  if (px.bit_depth != 8) {
    throw FormatError("unsupported PNG: " + std::to_string(px.bit_depth) + "-bit samples in " + path.string());
  }
  if (px.color_type == PNG_COLOR_TYPE_GRAY || px.color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
    throw FormatError("unsupported PNG: grayscale image " + path.string());
  }
  if (px.color_type == PNG_COLOR_TYPE_RGB_ALPHA) {
    throw FormatError("unsupported PNG: alpha channel in " + path.string());
  }
  ImageU8 img(px.height, px.width, 3);
  auto dst = img.data();
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<std::uint8_t>(px.samples[k]);
  return RgbImage::from_u8(std::move(img));
}

void write_rgb_png(const fs::path& path, const RgbImage& rgb) {
  const ImageU8 img = rgb.stored();
  std::vector<png_byte> bytes(img.data().begin(), img.data().end());
  write_png(path, img.width(), img.height(), PNG_COLOR_TYPE_RGB, 8, bytes);
}

ImageU16 read_gray_png(const fs::path& path) {
  const PngPixels px = read_png_samples(path);
  if (px.color_type != PNG_COLOR_TYPE_GRAY || (px.bit_depth != 8 && px.bit_depth != 16)) {
    throw FormatError("unsupported PNG: expected 8- or 16-bit grayscale mosaic in " + path.string());
  }
  ImageU16 img(px.height, px.width, 1);
  std::copy(px.samples.begin(), px.samples.end(), img.data().begin());
  return img;
}

void write_gray_png16(const fs::path& path, const ImageU16& mosaic) {
  if (mosaic.channels() != 1) throw DimensionError("grayscale PNG needs a single-channel image");
  std::vector<png_byte> bytes(mosaic.size() * 2);
  auto src = mosaic.data();
  for (std::size_t k = 0; k < src.size(); ++k) {
    bytes[2 * k] = static_cast<png_byte>(src[k] >> 8);
    bytes[2 * k + 1] = static_cast<png_byte>(src[k] & 0xFF);
  }
  write_png(path, mosaic.width(), mosaic.height(), PNG_COLOR_TYPE_GRAY, 16, bytes);
}

}  // namespace rawkit
