#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "rawkit/image.hpp"

namespace rawkit {

// ---------------------------------------------------------------------------
// Bayer patterns

enum class BayerPattern { rggb, bggr, grbg, gbrg };

inline constexpr std::array<BayerPattern, 4> kAllPatterns = {
    BayerPattern::rggb, BayerPattern::bggr, BayerPattern::grbg, BayerPattern::gbrg};

std::string_view to_string(BayerPattern p);
BayerPattern parse_pattern(std::string_view name);  // lowercase or uppercase; throws ParamError

// Packed channel order: R, G on the R row, G on the B row, B.
enum Channel : int { kR = 0, kG1 = 1, kG2 = 2, kB = 3 };

/// Canonical packed channel of the site at (dy, dx) inside a 2x2 cell laid out as `p`.
int canonical_channel(BayerPattern p, int dy, int dx);
/// Inverse of canonical_channel: {dy, dx} of packed channel `ch` in a cell laid out as `p`.
std::array<int, 2> channel_site(BayerPattern p, int ch);
/// Color index (0 = R, 1 = G, 2 = B) of a packed channel.
constexpr int channel_color(int ch) { return ch == kR ? 0 : (ch == kB ? 2 : 1); }

// ---------------------------------------------------------------------------
// Dihedral group on image grids

enum class Dihedral : std::uint8_t { identity, rot90, rot180, rot270, flip_h, flip_v, transpose, antitranspose };

inline constexpr std::array<Dihedral, 8> kAllDihedral = {
    Dihedral::identity, Dihedral::rot90,  Dihedral::rot180,    Dihedral::rot270,
    Dihedral::flip_h,   Dihedral::flip_v, Dihedral::transpose, Dihedral::antitranspose};
// Elements that keep the grid dimensions on non-square images.
inline constexpr std::array<Dihedral, 4> kFlipDihedral = {Dihedral::identity, Dihedral::flip_h, Dihedral::flip_v,
                                                           Dihedral::rot180};

std::string_view to_string(Dihedral t);
Dihedral inverse(Dihedral t);
bool swaps_axes(Dihedral t);

/// Maps output coordinates of `t` applied to an (height, width) grid back to source coordinates.
/// rot90 follows numpy.rot90 (counter-clockwise).
struct DihedralMap {
  Dihedral t;
  int src_height;
  int src_width;
  int out_height() const { return swaps_axes(t) ? src_width : src_height; }
  int out_width() const { return swaps_axes(t) ? src_height : src_width; }
  std::array<int, 2> source(int y, int x) const;
};

template <typename T>
Image<T> transform_image(const Image<T>& img, Dihedral t) {
  const DihedralMap map{t, img.height(), img.width()};
  Image<T> out(map.out_height(), map.out_width(), img.channels());
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      const auto [sy, sx] = map.source(y, x);
      for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

/// Layout of the 2x2 cell after transforming a mosaic laid out as `p` with `t` (even dimensions).
BayerPattern transform_pattern(BayerPattern p, Dihedral t);

// ---------------------------------------------------------------------------
// RAW images

struct SensorLevels {
  int bit_depth = 10;
  int black_level = 0;
  int white_level = 1023;
  bool operator==(const SensorLevels&) const = default;
};

/// Packed (h/2, w/2, 4) sensor frame in canonical channel order. Immutable once created.
class RawImage {
 public:
  RawImage() = default;
  /// Validates bit depth, levels and sample range; throws ParamError / DataError / DimensionError.
  static RawImage create(ImageU16 packed, SensorLevels levels, BayerPattern origin = BayerPattern::rggb);

  const ImageU16& data() const { return data_; }
  int packed_height() const { return data_.height(); }
  int packed_width() const { return data_.width(); }
  int mosaic_height() const { return 2 * data_.height(); }
  int mosaic_width() const { return 2 * data_.width(); }
  int bit_depth() const { return levels_.bit_depth; }
  int black_level() const { return levels_.black_level; }
  int white_level() const { return levels_.white_level; }
  const SensorLevels& levels() const { return levels_; }
  BayerPattern pattern_of_origin() const { return origin_; }
  int max_value() const { return (1 << levels_.bit_depth) - 1; }

  bool operator==(const RawImage&) const = default;

 private:
  ImageU16 data_;
  SensorLevels levels_;
  BayerPattern origin_ = BayerPattern::rggb;
};

void validate_levels(const SensorLevels& levels);

/// Packs any single-channel mosaic into canonical (h/2, w/2, 4) order. Throws DimensionError on odd sizes.
template <typename T>
Image<T> pack_mosaic(const Image<T>& mosaic, BayerPattern p) {
  if (mosaic.channels() != 1) throw DimensionError("mosaic must be single-channel");
  if (mosaic.height() % 2 != 0 || mosaic.width() % 2 != 0 || mosaic.height() == 0 || mosaic.width() == 0) {
    throw DimensionError("mosaic dimensions must be even and nonzero, got " + std::to_string(mosaic.height()) +
                         "x" + std::to_string(mosaic.width()));
  }
  Image<T> packed(mosaic.height() / 2, mosaic.width() / 2, 4);
  for (int ch = 0; ch < 4; ++ch) {
    const auto [dy, dx] = channel_site(p, ch);
    for (int i = 0; i < packed.height(); ++i) {
      for (int j = 0; j < packed.width(); ++j) packed.at(i, j, ch) = mosaic.at(2 * i + dy, 2 * j + dx);
    }
  }
  return packed;
}

template <typename T>
Image<T> unpack_mosaic(const Image<T>& packed, BayerPattern p) {
  if (packed.channels() != 4) throw DimensionError("packed image must have 4 channels");
  Image<T> mosaic(packed.height() * 2, packed.width() * 2, 1);
  for (int ch = 0; ch < 4; ++ch) {
    const auto [dy, dx] = channel_site(p, ch);
    for (int i = 0; i < packed.height(); ++i) {
      for (int j = 0; j < packed.width(); ++j) mosaic.at(2 * i + dy, 2 * j + dx) = packed.at(i, j, ch);
    }
  }
  return mosaic;
}

RawImage pack_bayer(const ImageU16& mosaic, BayerPattern p, SensorLevels levels = {});
ImageU16 unpack_bayer(const RawImage& raw, BayerPattern p);

/// Transforms the scene a packed RGGB image represents: the packed grid moves spatially and
/// the four channels are permuted so the result is again read as an RGGB mosaic.
/// Equivalent to unpack (RGGB) -> transform mosaic -> pack (RGGB).
template <typename T>
Image<T> transform_packed(const Image<T>& packed, Dihedral t) {
  if (packed.channels() != 4) throw DimensionError("packed image must have 4 channels");
  const DihedralMap map{t, 2 * packed.height(), 2 * packed.width()};
  Image<T> out(map.out_height() / 2, map.out_width() / 2, 4);
  for (int i = 0; i < out.height(); ++i) {
    for (int j = 0; j < out.width(); ++j) {
      for (int ch = 0; ch < 4; ++ch) {
        const auto [dy, dx] = channel_site(BayerPattern::rggb, ch);
        const auto [sy, sx] = map.source(2 * i + dy, 2 * j + dx);
        out.at(i, j, ch) = packed.at(sy / 2, sx / 2, canonical_channel(BayerPattern::rggb, sy % 2, sx % 2));
      }
    }
  }
  return out;
}

RawImage dihedral_transform_packed(const RawImage& raw, Dihedral t);

// ---------------------------------------------------------------------------
// RGB images

/// Display-referred 3-channel image, held either as stored 8-bit values or normalized reals.
class RgbImage {
 public:
  RgbImage() = default;
  static RgbImage from_u8(ImageU8 img);
  static RgbImage from_real(ImageF img);  // values must lie in [0, 1]

  bool is_stored() const { return std::holds_alternative<ImageU8>(data_); }
  int height() const;
  int width() const;
  const ImageU8& u8() const;     // throws if not stored
  const ImageF& real() const;    // throws if stored
  ImageF normalized() const;     // v8 / 255 for stored images
  ImageU8 stored() const;        // quantizes real images (half away from zero)
  double value(int y, int x, int c) const;

  bool operator==(const RgbImage&) const = default;

 private:
  std::variant<ImageU8, ImageF> data_;
};

// ---------------------------------------------------------------------------
// ISP parameters

using Mat3 = std::array<std::array<double, 3>, 3>;
inline constexpr Mat3 kIdentity3 = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

double determinant(const Mat3& m);
Mat3 inverse(const Mat3& m);
Mat3 multiply(const Mat3& a, const Mat3& b);

struct GammaCurve {
  enum class Kind { srgb, power };
  Kind kind = Kind::srgb;
  double exponent = 2.2;  // used by Kind::power: encode x^(1/exponent)

  bool operator==(const GammaCurve&) const = default;
};

/// One fixed monotone curve on [0,1] with c(0) = 0 and c(1) = 1.
struct ToneCurve {
  std::string name;
  double (*eval)(double);
  double (*slope)(double);
};

/// Fixed tone-curve basis; tone maps are convex combinations of its curves.
class ToneBasis {
 public:
  explicit ToneBasis(std::vector<ToneCurve> curves);
  /// identity, smoothstep 3x^2 - 2x^3, x^2, sqrt(x)
  static const ToneBasis& standard();

  std::size_t size() const { return curves_.size(); }
  const ToneCurve& curve(std::size_t k) const { return curves_[k]; }
  double eval(std::span<const double> weights, double x) const;
  double slope(std::span<const double> weights, double x) const;
  /// Solves t(y) = x for y in [0,1] by bisection; inputs outside [0,1] saturate.
  double invert(std::span<const double> weights, double x) const;

 private:
  std::vector<ToneCurve> curves_;
};

enum ToneIndex : std::size_t { kToneIdentity = 0, kToneSmoothstep = 1, kToneSquare = 2, kToneSqrt = 3 };

struct IspParams {
  int black_level = 0;
  int white_level = 1023;
  int bit_depth = 10;
  std::array<double, 3> wb_gains = {1.0, 1.0, 1.0};
  Mat3 ccm = kIdentity3;
  std::vector<double> tone_weights = {1.0, 0.0, 0.0, 0.0};
  GammaCurve gamma;
  /// Radial gain a0 + a1 r^2 + a2 r^4, r = 1 at the frame corner.
  std::array<double, 3> shading = {1.0, 0.0, 0.0};

  SensorLevels levels() const { return {bit_depth, black_level, white_level}; }
  static IspParams identity(SensorLevels levels = {});

  bool operator==(const IspParams&) const = default;
};

/// Throws ParamError naming the first violated invariant.
void validate_params(const IspParams& p);

/// Minimum of a0 + a1 u + a2 u^2 over u = r^2 in [0, 1].
double min_shading_gain(const std::array<double, 3>& a);

}  // namespace rawkit
