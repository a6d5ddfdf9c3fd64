#include "rawkit/forward.hpp"

#include <cmath>

#include "rawkit/parallel.hpp"

namespace rawkit {

namespace {

inline int reflect101(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

void require_packed(const ImageF& img) {
  if (img.channels() != 4) throw DimensionError("expected a packed 4-channel image");
}

void require_rgb(const ImageF& img) {
  if (img.channels() != 3) throw DimensionError("expected a 3-channel image");
}

// Mosaic site of packed channel `ch` in block (i, j) under the canonical RGGB layout.
inline void mark_site(ClipMask* mask, int i, int j, int ch) {
  if (mask == nullptr) return;
  const auto [dy, dx] = channel_site(BayerPattern::rggb, ch);
  mask->set(2 * i + dy, 2 * j + dx);
}

void check_mask_for_packed(const ClipMask* mask, const ImageF& packed) {
  if (mask != nullptr && (mask->height() != 2 * packed.height() || mask->width() != 2 * packed.width())) {
    throw DimensionError("clip mask must have mosaic resolution");
  }
}

}  // namespace

RadiusField::RadiusField(int packed_height, int packed_width, const FrameGeometry& frame) {
  int frame_h = packed_height;
  int frame_w = packed_width;
  int off_y = 0;
  int off_x = 0;
  if (!frame.is_full_frame()) {
    if (frame.frame_width % 2 != 0 || frame.frame_height % 2 != 0 || frame.offset_x % 2 != 0 ||
        frame.offset_y % 2 != 0 || frame.offset_x < 0 || frame.offset_y < 0) {
      throw DimensionError("frame geometry must use even, nonnegative offsets and sizes");
    }
    frame_h = frame.frame_height / 2;
    frame_w = frame.frame_width / 2;
    off_y = frame.offset_y / 2;
    off_x = frame.offset_x / 2;
    if (off_y + packed_height > frame_h || off_x + packed_width > frame_w) {
      throw DimensionError("image extends beyond its frame");
    }
  }
  const double cy = 0.5 * (frame_h - 1);
  const double cx = 0.5 * (frame_w - 1);
  const double denom = cy * cy + cx * cx;
  row_term_.resize(packed_height);
  col_term_.resize(packed_width);
  for (int i = 0; i < packed_height; ++i) {
    const double d = (off_y + i) - cy;
    row_term_[i] = denom > 0.0 ? d * d / denom : 0.0;
  }
  for (int j = 0; j < packed_width; ++j) {
    const double d = (off_x + j) - cx;
    col_term_[j] = denom > 0.0 ? d * d / denom : 0.0;
  }
}

PackedLinear normalize_black_white(const RawImage& raw, const IspParams& p) {
  if (p.white_level <= p.black_level) throw ParamError("white_level must exceed black_level");
  const ImageU16& src = raw.data();
  PackedLinear out{ImageF(src.height(), src.width(), 4), ClipMask(2 * src.height(), 2 * src.width())};
  const double black = p.black_level;
  const double range = p.white_level - p.black_level;
  for (int i = 0; i < src.height(); ++i) {
    for (int j = 0; j < src.width(); ++j) {
      for (int ch = 0; ch < 4; ++ch) {
        const int dn = src.at(i, j, ch);
        out.image.at(i, j, ch) = std::clamp((dn - black) / range, 0.0, 1.0);
        if (dn >= p.white_level) mark_site(&out.mask, i, j, ch);
      }
    }
  }
  return out;
}

ImageF apply_shading_gain(ImageF packed, const IspParams& p, Direction dir, const FrameGeometry& frame) {
  require_packed(packed);
  const RadiusField radius(packed.height(), packed.width(), frame);
  for (int i = 0; i < packed.height(); ++i) {
    for (int j = 0; j < packed.width(); ++j) {
      const double g = shading_gain(p.shading, radius.r2(i, j));
      double* px = &packed.at(i, j, 0);
      for (int ch = 0; ch < 4; ++ch) px[ch] = dir == Direction::forward ? px[ch] * g : px[ch] / g;
    }
  }
  return packed;
}

ImageF apply_wb(ImageF packed, const IspParams& p, Direction dir, ClipMask* mask) {
  require_packed(packed);
  check_mask_for_packed(mask, packed);
  for (int i = 0; i < packed.height(); ++i) {
    for (int j = 0; j < packed.width(); ++j) {
      for (int ch = 0; ch < 4; ++ch) {
        const double gain = p.wb_gains[channel_color(ch)];
        double& v = packed.at(i, j, ch);
        if (dir == Direction::inverse) {
          v = v / gain;
          continue;
        }
        const double scaled = v * gain;
        if (scaled > 1.0 || scaled < 0.0) {
          v = std::clamp(scaled, 0.0, 1.0);
          mark_site(mask, i, j, ch);
        } else {
          v = scaled;
        }
      }
    }
  }
  return packed;
}

ImageF demosaic_bilinear(const ImageF& packed) {
  require_packed(packed);
  const ImageF m = unpack_mosaic(packed, BayerPattern::rggb);
  const int h = m.height();
  const int w = m.width();
  ImageF rgb(h, w, 3);
  auto at = [&](int y, int x) { return m.at(reflect101(y, h), reflect101(x, w)); };
  auto cross = [&](int y, int x) { return ((at(y - 1, x) + at(y + 1, x)) + (at(y, x - 1) + at(y, x + 1))) * 0.25; };
  auto diag = [&](int y, int x) {
    return ((at(y - 1, x - 1) + at(y - 1, x + 1)) + (at(y + 1, x - 1) + at(y + 1, x + 1))) * 0.25;
  };
  auto horiz = [&](int y, int x) { return (at(y, x - 1) + at(y, x + 1)) * 0.5; };
  auto vert = [&](int y, int x) { return (at(y - 1, x) + at(y + 1, x)) * 0.5; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double* px = &rgb.at(y, x, 0);
      const double own = m.at(y, x);
      const bool even_row = (y % 2) == 0;
      const bool even_col = (x % 2) == 0;
      if (even_row && even_col) {  // R site
        px[0] = own;
        px[1] = cross(y, x);
        px[2] = diag(y, x);
      } else if (even_row) {  // G on R row
        px[0] = horiz(y, x);
        px[1] = own;
        px[2] = vert(y, x);
      } else if (even_col) {  // G on B row
        px[0] = vert(y, x);
        px[1] = own;
        px[2] = horiz(y, x);
      } else {  // B site
        px[0] = diag(y, x);
        px[1] = cross(y, x);
        px[2] = own;
      }
    }
  }
  return rgb;
}

ImageF apply_ccm(ImageF rgb, const IspParams& p, Direction dir, ClipMask* mask, int threads) {
  require_rgb(rgb);
  if (mask != nullptr && (mask->height() != rgb.height() || mask->width() != rgb.width())) {
    throw DimensionError("clip mask shape must match the RGB image");
  }
  const Mat3 m = dir == Direction::forward ? p.ccm : inverse(p.ccm);
  parallel_rows(rgb.height(), threads, [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < rgb.width(); ++x) {
        double* px = &rgb.at(y, x, 0);
        const double a = px[0];
        const double b = px[1];
        const double c = px[2];
        bool clipped = false;
        for (int k = 0; k < 3; ++k) {
          double v = m[k][0] * a + m[k][1] * b + m[k][2] * c;
          if (dir == Direction::forward && (v < 0.0 || v > 1.0)) {
            v = std::clamp(v, 0.0, 1.0);
            clipped = true;
          }
          px[k] = v;
        }
        if (clipped && mask != nullptr) mask->set(y, x);
      }
    }
  });
  return rgb;
}

ImageF apply_tone_curve(ImageF img, const IspParams& p, Direction dir, int threads) {
  const ToneBasis& basis = ToneBasis::standard();
  const std::span<const double> w = p.tone_weights;
  const int width = img.width() * img.channels();
  parallel_rows(img.height(), threads, [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y) {
      double* row = img.row(y);
      for (int k = 0; k < width; ++k) row[k] = dir == Direction::forward ? basis.eval(w, row[k]) : basis.invert(w, row[k]);
    }
  });
  return img;
}

double gamma_encode(const GammaCurve& g, double x) {
  if (g.kind == GammaCurve::Kind::power) return x <= 0.0 ? 0.0 : std::pow(x, 1.0 / g.exponent);
  if (x <= 0.0031308) return 12.92 * x;
  return 1.055 * std::pow(x, 1.0 / 2.4) - 0.055;
}

double gamma_decode(const GammaCurve& g, double y) {
  if (g.kind == GammaCurve::Kind::power) return y <= 0.0 ? 0.0 : std::pow(y, g.exponent);
  if (y <= 0.04045) return y / 12.92;
  return std::pow((y + 0.055) / 1.055, 2.4);
}

ImageF apply_gamma(ImageF img, const GammaCurve& g, Direction dir, int threads) {
  const int width = img.width() * img.channels();
  parallel_rows(img.height(), threads, [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y) {
      double* row = img.row(y);
      for (int k = 0; k < width; ++k) row[k] = dir == Direction::forward ? gamma_encode(g, row[k]) : gamma_decode(g, row[k]);
    }
  });
  return img;
}

std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::round(255.0 * std::clamp(v, 0.0, 1.0)));
}

RgbImage quantize_rgb8(const ImageF& img) {
  require_rgb(img);
  ImageU8 out(img.height(), img.width(), 3);
  auto src = img.data();
  auto dst = out.data();
  for (std::size_t k = 0; k < src.size(); ++k) dst[k] = quantize8(src[k]);
  return RgbImage::from_u8(std::move(out));
}

ForwardResult run_forward(const RawImage& raw, const IspParams& p, const ForwardOptions& opts) {
  validate_params(p);
  ForwardResult result;
  auto record = [&](const char* name, const ImageF& img) {
    if (opts.trace) result.trace.stages.emplace_back(name, img);
  };

  PackedLinear norm = normalize_black_white(raw, p);
  ClipMask mask = std::move(norm.mask);
  record("normalize", norm.image);
  ImageF packed = apply_shading_gain(std::move(norm.image), p, Direction::forward, opts.frame);
  record("shading", packed);
  // Shading can push values past 1; the WB clamp catches both.
  packed = apply_wb(std::move(packed), p, Direction::forward, &mask);
  record("white_balance", packed);
  ImageF rgb = demosaic_bilinear(packed);
  record("demosaic", rgb);
  rgb = apply_ccm(std::move(rgb), p, Direction::forward, &mask, opts.threads);
  record("ccm", rgb);
  rgb = apply_tone_curve(std::move(rgb), p, Direction::forward, opts.threads);
  record("tone", rgb);
  rgb = apply_gamma(std::move(rgb), p.gamma, Direction::forward, opts.threads);
  record("gamma", rgb);
  result.rgb = quantize_rgb8(rgb);
  if (opts.trace) result.trace.stages.emplace_back("quantize", result.rgb.normalized());
  result.mask = std::move(mask);
  return result;
}

RgbImage render_quicklook(const RawImage& raw) {
  const ImageU16& src = raw.data();
  const double black = raw.black_level();
  const double range = raw.white_level() - raw.black_level();
  const GammaCurve srgb;
  ImageU8 out(src.height(), src.width(), 3);
  auto norm = [&](int dn) { return std::clamp((dn - black) / range, 0.0, 1.0); };
  auto finish = [&](double v) {
    v = std::clamp(v, 0.0, 1.0);
    return quantize8(gamma_encode(srgb, v * v * (3.0 - 2.0 * v)));
  };
  for (int i = 0; i < src.height(); ++i) {
    for (int j = 0; j < src.width(); ++j) {
      const double r = norm(src.at(i, j, kR));
      const double g = 0.5 * (norm(src.at(i, j, kG1)) + norm(src.at(i, j, kG2)));
      const double b = norm(src.at(i, j, kB));
      out.at(i, j, 0) = finish(r);
      out.at(i, j, 1) = finish(g);
      out.at(i, j, 2) = finish(b);
    }
  }
  return RgbImage::from_u8(std::move(out));
}

}  // namespace rawkit
