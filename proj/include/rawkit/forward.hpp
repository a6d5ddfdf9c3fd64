#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rawkit/model.hpp"

namespace rawkit {

enum class Direction { forward, inverse };

/// Placement of an image inside the full sensor frame, in RGB / mosaic pixels.
/// A zero frame size means the image is the whole frame.
struct FrameGeometry {
  int offset_x = 0;
  int offset_y = 0;
  int frame_width = 0;
  int frame_height = 0;

  bool is_full_frame() const { return frame_width == 0 && frame_height == 0; }
  bool operator==(const FrameGeometry&) const = default;
};

/// Precomputed squared normalized radius for every packed pixel. The radius is measured from
/// the frame center in packed-pixel units and is exactly 1 at the frame corners.
class RadiusField {
 public:
  RadiusField(int packed_height, int packed_width, const FrameGeometry& frame);
  double r2(int i, int j) const { return row_term_[i] + col_term_[j]; }

 private:
  std::vector<double> row_term_;
  std::vector<double> col_term_;
};

inline double shading_gain(const std::array<double, 3>& a, double r2) { return a[0] + a[1] * r2 + a[2] * r2 * r2; }

struct PackedLinear {
  ImageF image;   // (h/2, w/2, 4) in [0, 1]
  ClipMask mask;  // (h, w) mosaic sites at or above white level
};

// Stage functions. Packed stages take (h/2, w/2, 4) images and (h, w) masks; color stages take (h, w, 3).
// `threads` only splits rows; results are identical for every value.

PackedLinear normalize_black_white(const RawImage& raw, const IspParams& p);
ImageF apply_shading_gain(ImageF packed, const IspParams& p, Direction dir, const FrameGeometry& frame = {});
/// Forward multiplies (r, g, g, b) gains and clamps to [0,1], marking clamped sites in `mask`.
/// Inverse divides and never clamps.
ImageF apply_wb(ImageF packed, const IspParams& p, Direction dir, ClipMask* mask = nullptr);
ImageF demosaic_bilinear(const ImageF& packed);
ImageF apply_ccm(ImageF rgb, const IspParams& p, Direction dir, ClipMask* mask = nullptr, int threads = 1);
ImageF apply_tone_curve(ImageF img, const IspParams& p, Direction dir, int threads = 1);
ImageF apply_gamma(ImageF img, const GammaCurve& g, Direction dir, int threads = 1);
RgbImage quantize_rgb8(const ImageF& img);

double gamma_encode(const GammaCurve& g, double x);
double gamma_decode(const GammaCurve& g, double y);
/// Round half away from zero into [0, 255].
std::uint8_t quantize8(double v);

struct StageTrace {
  std::vector<std::pair<std::string, ImageF>> stages;
};

struct ForwardOptions {
  bool trace = false;
  FrameGeometry frame;
  int threads = 1;
};

struct ForwardResult {
  RgbImage rgb;
  ClipMask mask;  // (h, w): sites whose value was clamped anywhere along the pipeline
  StageTrace trace;
};

/// black/white -> shading -> WB -> demosaic -> CCM -> tone -> gamma -> 8-bit.
ForwardResult run_forward(const RawImage& raw, const IspParams& p, const ForwardOptions& opts = {});

/// Half-resolution preview: R, mean of the greens, B; smoothstep tone; sRGB gamma.
RgbImage render_quicklook(const RawImage& raw);

}  // namespace rawkit
