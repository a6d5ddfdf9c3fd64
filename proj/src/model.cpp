#include "rawkit/model.hpp"

#include <cctype>
#include <cmath>
#include <limits>

namespace rawkit {

namespace {

// Cell layouts, row-major over (0,0) (0,1) (1,0) (1,1), as canonical channels.
constexpr std::array<std::array<int, 4>, 4> kCellChannels = {{
    {kR, kG1, kG2, kB},  // rggb
    {kB, kG2, kG1, kR},  // bggr
    {kG1, kR, kB, kG2},  // grbg
    {kG2, kB, kR, kG1},  // gbrg
}};

}  // namespace

std::string_view to_string(BayerPattern p) {
  switch (p) {
    case BayerPattern::rggb: return "rggb";
    case BayerPattern::bggr: return "bggr";
    case BayerPattern::grbg: return "grbg";
    case BayerPattern::gbrg: return "gbrg";
  }
  return "?";
}

BayerPattern parse_pattern(std::string_view name) {
  std::string lower(name);
  for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  for (auto p : kAllPatterns) {
    if (to_string(p) == lower) return p;
  }
  throw ParamError("unknown Bayer pattern '" + std::string(name) + "' (expected rggb, bggr, grbg or gbrg)");
}

int canonical_channel(BayerPattern p, int dy, int dx) {
  return kCellChannels[static_cast<int>(p)][dy * 2 + dx];
}

std::array<int, 2> channel_site(BayerPattern p, int ch) {
  const auto& cell = kCellChannels[static_cast<int>(p)];
  for (int k = 0; k < 4; ++k) {
    if (cell[k] == ch) return {k / 2, k % 2};
  }
  throw ParamError("invalid packed channel " + std::to_string(ch));
}

// ---------------------------------------------------------------------------

std::string_view to_string(Dihedral t) {
  switch (t) {
    case Dihedral::identity: return "identity";
    case Dihedral::rot90: return "rot90";
    case Dihedral::rot180: return "rot180";
    case Dihedral::rot270: return "rot270";
    case Dihedral::flip_h: return "flip_h";
    case Dihedral::flip_v: return "flip_v";
    case Dihedral::transpose: return "transpose";
    case Dihedral::antitranspose: return "antitranspose";
  }
  return "?";
}

Dihedral inverse(Dihedral t) {
  if (t == Dihedral::rot90) return Dihedral::rot270;
  if (t == Dihedral::rot270) return Dihedral::rot90;
  return t;
}

bool swaps_axes(Dihedral t) {
  return t == Dihedral::rot90 || t == Dihedral::rot270 || t == Dihedral::transpose || t == Dihedral::antitranspose;
}

std::array<int, 2> DihedralMap::source(int y, int x) const {
  // Output (y, x) optionally flipped in output space, then read from source with axes swapped.
  const int oh = out_height();
  const int ow = out_width();
  bool flip_y = false;
  bool flip_x = false;
  switch (t) {
    case Dihedral::identity:
    case Dihedral::transpose: break;
    case Dihedral::rot90:
    case Dihedral::flip_v: flip_y = true; break;
    case Dihedral::rot270:
    case Dihedral::flip_h: flip_x = true; break;
    case Dihedral::rot180:
    case Dihedral::antitranspose: flip_y = flip_x = true; break;
  }
  const int a = flip_y ? oh - 1 - y : y;
  const int b = flip_x ? ow - 1 - x : x;
  if (swaps_axes(t)) return {b, a};
  return {a, b};
}

BayerPattern transform_pattern(BayerPattern p, Dihedral t) {
  const DihedralMap map{t, 2, 2};
  // A Bayer layout is fixed by where R sits in the cell.
  int r_site = -1;
  for (int k = 0; k < 4; ++k) {
    const auto [ty, tx] = map.source(k / 2, k % 2);
    if (canonical_channel(p, ty, tx) == kR) r_site = k;
  }
  switch (r_site) {
    case 0: return BayerPattern::rggb;
    case 1: return BayerPattern::grbg;
    case 2: return BayerPattern::gbrg;
    default: return BayerPattern::bggr;
  }
}

// ---------------------------------------------------------------------------

void validate_levels(const SensorLevels& levels) {
  if (levels.bit_depth != 10 && levels.bit_depth != 12 && levels.bit_depth != 14) {
    throw ParamError("bit_depth must be 10, 12 or 14 (got " + std::to_string(levels.bit_depth) + ")");
  }
  const int max_value = (1 << levels.bit_depth) - 1;
  if (levels.black_level < 0) throw ParamError("black_level must be nonnegative");
  if (levels.white_level <= levels.black_level) throw ParamError("white_level must exceed black_level");
  if (levels.white_level > max_value) {
    throw ParamError("white_level " + std::to_string(levels.white_level) + " exceeds " +
                     std::to_string(levels.bit_depth) + "-bit range");
  }
}

RawImage RawImage::create(ImageU16 packed, SensorLevels levels, BayerPattern origin) {
  validate_levels(levels);
  if (packed.channels() != 4) throw DimensionError("packed RAW must have 4 channels");
  if (packed.height() < 1 || packed.width() < 1) throw DimensionError("packed RAW dimensions must be >= 1");
  const int max_value = (1 << levels.bit_depth) - 1;
  for (auto v : packed.data()) {
    if (v > max_value) {
      throw DataError("sample value " + std::to_string(v) + " exceeds " + std::to_string(levels.bit_depth) +
                      "-bit range");
    }
  }
  RawImage raw;
  raw.data_ = std::move(packed);
  raw.levels_ = levels;
  raw.origin_ = origin;
  return raw;
}

RawImage pack_bayer(const ImageU16& mosaic, BayerPattern p, SensorLevels levels) {
  return RawImage::create(pack_mosaic(mosaic, p), levels, p);
}

ImageU16 unpack_bayer(const RawImage& raw, BayerPattern p) { return unpack_mosaic(raw.data(), p); }

RawImage dihedral_transform_packed(const RawImage& raw, Dihedral t) {
  return RawImage::create(transform_packed(raw.data(), t), raw.levels(), raw.pattern_of_origin());
}

// ---------------------------------------------------------------------------

RgbImage RgbImage::from_u8(ImageU8 img) {
  if (img.channels() != 3) throw DimensionError("RGB image must have 3 channels");
  RgbImage out;
  out.data_ = std::move(img);
  return out;
}

RgbImage RgbImage::from_real(ImageF img) {
  if (img.channels() != 3) throw DimensionError("RGB image must have 3 channels");
  for (double v : img.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("normalized RGB values must lie in [0,1]");
  }
  RgbImage out;
  out.data_ = std::move(img);
  return out;
}

int RgbImage::height() const {
  return std::visit([](const auto& im) { return im.height(); }, data_);
}

int RgbImage::width() const {
  return std::visit([](const auto& im) { return im.width(); }, data_);
}

const ImageU8& RgbImage::u8() const {
  if (!is_stored()) throw Error("RGB image holds normalized reals, not stored 8-bit values");
  return std::get<ImageU8>(data_);
}

const ImageF& RgbImage::real() const {
  if (is_stored()) throw Error("RGB image holds stored 8-bit values");
  return std::get<ImageF>(data_);
}

ImageF RgbImage::normalized() const {
  if (!is_stored()) return std::get<ImageF>(data_);
  const auto& src = std::get<ImageU8>(data_);
  ImageF out(src.height(), src.width(), 3);
  auto d = out.data();
  auto s = src.data();
  for (std::size_t i = 0; i < s.size(); ++i) d[i] = s[i] / 255.0;
  return out;
}

ImageU8 RgbImage::stored() const {
  if (is_stored()) return std::get<ImageU8>(data_);
  const auto& src = std::get<ImageF>(data_);
  ImageU8 out(src.height(), src.width(), 3);
  auto d = out.data();
  auto s = src.data();
  for (std::size_t i = 0; i < s.size(); ++i) d[i] = static_cast<std::uint8_t>(std::round(255.0 * std::clamp(s[i], 0.0, 1.0)));
  return out;
}

double RgbImage::value(int y, int x, int c) const {
  if (is_stored()) return std::get<ImageU8>(data_).at(y, x, c) / 255.0;
  return std::get<ImageF>(data_).at(y, x, c);
}

// ---------------------------------------------------------------------------

double determinant(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Mat3 inverse(const Mat3& m) {
  const double det = determinant(m);
  if (std::abs(det) <= 1e-8) throw ParamError("singular color matrix");
  const double s = 1.0 / det;
  Mat3 r;
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * s;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * s;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * s;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * s;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * s;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * s;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * s;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * s;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * s;
  return r;
}

Mat3 multiply(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
  }
  return r;
}

// ---------------------------------------------------------------------------

namespace {

double curve_identity(double x) { return x; }
double slope_identity(double) { return 1.0; }
double curve_smoothstep(double x) { return x * x * (3.0 - 2.0 * x); }
double slope_smoothstep(double x) { return 6.0 * x * (1.0 - x); }
double curve_square(double x) { return x * x; }
double slope_square(double x) { return 2.0 * x; }
double curve_sqrt(double x) { return std::sqrt(x); }
double slope_sqrt(double x) {
  return x > 0.0 ? 0.5 / std::sqrt(x) : std::numeric_limits<double>::infinity();
}

}  // namespace

ToneBasis::ToneBasis(std::vector<ToneCurve> curves) : curves_(std::move(curves)) {
  if (curves_.empty()) throw ParamError("tone basis needs at least one curve");
}

const ToneBasis& ToneBasis::standard() {
  static const ToneBasis basis({{"identity", curve_identity, slope_identity},
                                {"smoothstep", curve_smoothstep, slope_smoothstep},
                                {"square", curve_square, slope_square},
                                {"sqrt", curve_sqrt, slope_sqrt}});
  return basis;
}

double ToneBasis::eval(std::span<const double> weights, double x) const {
  x = std::clamp(x, 0.0, 1.0);
  double acc = 0.0;
  for (std::size_t k = 0; k < curves_.size(); ++k) {
    if (weights[k] != 0.0) acc += weights[k] * curves_[k].eval(x);
  }
  return acc;
}

double ToneBasis::slope(std::span<const double> weights, double x) const {
  double acc = 0.0;
  for (std::size_t k = 0; k < curves_.size(); ++k) {
    if (weights[k] != 0.0) acc += weights[k] * curves_[k].slope(x);
  }
  return acc;
}

double ToneBasis::invert(std::span<const double> weights, double x) const {
  if (!(x > 0.0)) return 0.0;
  if (x >= 1.0) return 1.0;
  double lo = 0.0;
  double hi = 1.0;
  // Bisect until the bracket collapses to adjacent doubles.
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (eval(weights, mid) < x) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::abs(eval(weights, lo) - x) < std::abs(eval(weights, hi) - x) ? lo : hi;
}

// ---------------------------------------------------------------------------

IspParams IspParams::identity(SensorLevels levels) {
  IspParams p;
  p.bit_depth = levels.bit_depth;
  p.black_level = levels.black_level;
  p.white_level = levels.white_level;
  return p;
}

double min_shading_gain(const std::array<double, 3>& a) {
  auto g = [&](double u) { return a[0] + a[1] * u + a[2] * u * u; };
  double m = std::min(g(0.0), g(1.0));
  if (a[2] != 0.0) {
    const double vertex = -a[1] / (2.0 * a[2]);
    if (vertex > 0.0 && vertex < 1.0) m = std::min(m, g(vertex));
  }
  return m;
}

void validate_params(const IspParams& p) {
  validate_levels(p.levels());
  for (double g : p.wb_gains) {
    if (!(g > 0.0) || !std::isfinite(g)) throw ParamError("wb_gains must be positive");
  }
  for (const auto& row : p.ccm) {
    for (double v : row) {
      if (!std::isfinite(v)) throw ParamError("ccm entries must be finite");
    }
  }
  if (!(std::abs(determinant(p.ccm)) > 1e-8)) throw ParamError("singular color matrix");
  double sum = 0.0;
  for (double w : p.tone_weights) {
    if (!(w >= 0.0)) throw ParamError("tone_weights not a simplex point (negative weight)");
    sum += w;
  }
  if (p.tone_weights.empty() || std::abs(sum - 1.0) > 1e-9) {
    throw ParamError("tone_weights not a simplex point (sum " + std::to_string(sum) + ")");
  }
  if (p.tone_weights.size() != ToneBasis::standard().size()) {
    throw ParamError("tone_weights size must match the tone basis (" +
                     std::to_string(ToneBasis::standard().size()) + ")");
  }
  if (p.gamma.kind == GammaCurve::Kind::power && !(p.gamma.exponent > 0.0)) {
    throw ParamError("gamma exponent must be positive");
  }
  for (double a : p.shading) {
    if (!std::isfinite(a)) throw ParamError("shading coefficients must be finite");
  }
  if (min_shading_gain(p.shading) < 1.0 - 1e-12) throw ParamError("shading gain below 1 on the unit disk");
}

}  // namespace rawkit
