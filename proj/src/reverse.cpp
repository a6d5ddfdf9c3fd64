#include "rawkit/reverse.hpp"

#include <array>
#include <chrono>
#include <cmath>

#include "json.hpp"

#include "rawkit/parallel.hpp"

namespace rawkit {

namespace {

void require_even(int h, int w) {
  if (h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0) {
    throw DimensionError("RGB dimensions must be even and nonzero, got " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
}

// Uniform in [-0.5, 0.5) from (seed, sample index); independent of evaluation order.
double dither_offset(std::uint64_t seed, std::size_t index) {
  const std::uint64_t bits = mix64(seed ^ mix64(index + 0x632be59bd9b4e019ULL));
  return static_cast<double>(bits >> 11) * 0x1.0p-53 - 0.5;
}

inline std::uint16_t to_dn(double v, double black, double range, int max_value, double offset) {
  const double dn = std::round(black + v * range + offset);
  return static_cast<std::uint16_t>(std::clamp(dn, 0.0, static_cast<double>(max_value)));
}

void check_options(const IspParams& p, const ReverseOptions& opts) {
  if (opts.output_bit_depth != p.bit_depth) {
    throw ParamError("output bit depth " + std::to_string(opts.output_bit_depth) +
                     " does not match params bit depth " + std::to_string(p.bit_depth));
  }
}

}  // namespace

ImageF mosaic_cfa(const ImageF& rgb, BayerPattern cfa) {
  if (rgb.channels() != 3) throw DimensionError("expected a 3-channel image");
  require_even(rgb.height(), rgb.width());
  ImageF packed(rgb.height() / 2, rgb.width() / 2, 4);
  for (int ch = 0; ch < 4; ++ch) {
    const auto [dy, dx] = channel_site(cfa, ch);
    const int color = channel_color(ch);
    for (int i = 0; i < packed.height(); ++i) {
      for (int j = 0; j < packed.width(); ++j) packed.at(i, j, ch) = rgb.at(2 * i + dy, 2 * j + dx, color);
    }
  }
  return packed;
}

ImageF mosaic_rggb(const ImageF& rgb) { return mosaic_cfa(rgb, BayerPattern::rggb); }

RawImage quantize_raw(const ImageF& packed, const IspParams& p, const ReverseOptions& opts) {
  check_options(p, opts);
  if (packed.channels() != 4) throw DimensionError("expected a packed 4-channel image");
  ImageU16 out(packed.height(), packed.width(), 4);
  const double black = p.black_level;
  const double range = p.white_level - p.black_level;
  const int max_value = (1 << p.bit_depth) - 1;
  auto src = packed.data();
  auto dst = out.data();
  for (std::size_t k = 0; k < src.size(); ++k) {
    const double offset = opts.dither ? dither_offset(opts.seed, k) : 0.0;
    dst[k] = to_dn(src[k], black, range, max_value, offset);
  }
  return RawImage::create(std::move(out), p.levels(), opts.cfa);
}

ReverseLinear reverse_linear(const RgbImage& rgb, const IspParams& p, const ReverseOptions& opts) {
  validate_params(p);
  const int h = rgb.height();
  const int w = rgb.width();
  require_even(h, w);
  const ToneBasis& basis = ToneBasis::standard();
  const std::span<const double> weights = p.tone_weights;
  auto linearize = [&](double v) { return basis.invert(weights, gamma_decode(p.gamma, v)); };

  std::array<double, 256> table{};
  if (rgb.is_stored()) {
    for (int v = 0; v < 256; ++v) table[v] = linearize(v / 255.0);
  }
  const Mat3 minv = inverse(p.ccm);
  const RadiusField radius(h / 2, w / 2, opts.frame);
  std::array<int, 4> site_color{};
  std::array<int, 4> site_channel{};
  for (int k = 0; k < 4; ++k) {
    site_channel[k] = canonical_channel(opts.cfa, k / 2, k % 2);
    site_color[k] = channel_color(site_channel[k]);
  }

  ReverseLinear out{ImageF(h / 2, w / 2, 4), ClipMask(h, w)};
  parallel_rows(h / 2, opts.threads, [&](int i0, int i1) {
    for (int i = i0; i < i1; ++i) {
      for (int dy = 0; dy < 2; ++dy) {
        const int y = 2 * i + dy;
        for (int x = 0; x < w; ++x) {
          const int j = x / 2;
          const int k = dy * 2 + (x % 2);
          double l0, l1, l2;
          bool saturated;
          if (rgb.is_stored()) {
            const std::uint8_t* px = &rgb.u8().at(y, x, 0);
            saturated = px[0] == 255 || px[1] == 255 || px[2] == 255;
            l0 = table[px[0]];
            l1 = table[px[1]];
            l2 = table[px[2]];
          } else {
            const double* px = &rgb.real().at(y, x, 0);
            saturated = px[0] >= 1.0 || px[1] >= 1.0 || px[2] >= 1.0;
            l0 = linearize(px[0]);
            l1 = linearize(px[1]);
            l2 = linearize(px[2]);
          }
          const int color = site_color[k];
          double v = minv[color][0] * l0 + minv[color][1] * l1 + minv[color][2] * l2;
          v = v / p.wb_gains[color];
          v = v / shading_gain(p.shading, radius.r2(i, j));
          if (saturated) {
            out.mask.set(y, x);
            if (opts.clip_policy == ClipPolicy::clamp) v = 1.0;
          }
          out.packed.at(i, j, site_channel[k]) = v;
        }
      }
    }
  });
  return out;
}

ReverseResult run_reverse(const RgbImage& rgb, const IspParams& p, const ReverseOptions& opts) {
  check_options(p, opts);
  ReverseLinear lin = reverse_linear(rgb, p, opts);
  return {quantize_raw(lin.packed, p, opts), std::move(lin.mask)};
}

ReverseResult reverse_by_stages(const RgbImage& rgb, const IspParams& p, const ReverseOptions& opts) {
  validate_params(p);
  check_options(p, opts);
  require_even(rgb.height(), rgb.width());
  ImageF img = rgb.normalized();
  ClipMask mask(rgb.height(), rgb.width());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (img.at(y, x, 0) >= 1.0 || img.at(y, x, 1) >= 1.0 || img.at(y, x, 2) >= 1.0) mask.set(y, x);
    }
  }
  img = apply_gamma(std::move(img), p.gamma, Direction::inverse);
  img = apply_tone_curve(std::move(img), p, Direction::inverse);
  img = apply_ccm(std::move(img), p, Direction::inverse);
  ImageF packed = mosaic_cfa(img, opts.cfa);
  packed = apply_wb(std::move(packed), p, Direction::inverse);
  packed = apply_shading_gain(std::move(packed), p, Direction::inverse, opts.frame);
  if (opts.clip_policy == ClipPolicy::clamp) {
    for (int ch = 0; ch < 4; ++ch) {
      const auto [dy, dx] = channel_site(opts.cfa, ch);
      for (int i = 0; i < packed.height(); ++i) {
        for (int j = 0; j < packed.width(); ++j) {
          if (mask.at(2 * i + dy, 2 * j + dx)) packed.at(i, j, ch) = 1.0;
        }
      }
    }
  }
  return {quantize_raw(packed, p, opts), std::move(mask)};
}

std::string BatchRecord::to_json_line() const {
  nlohmann::json j = {{"id", id},
                      {"path", path},
                      {"output", output},
                      {"status", ok ? "ok" : "error"},
                      {"milliseconds", milliseconds}};
  if (!ok) j["error"] = error;
  return j.dump();
}

std::size_t BatchSummary::succeeded() const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.ok ? 1 : 0;
  return n;
}

BatchSummary unprocess_batch(const DatasetManifest& manifest, const IspParams& p, const ReverseOptions& opts,
                             const fs::path& out_dir, const ReverseFn& reverse,
                             const std::function<void(const BatchRecord&)>& on_record) {
  using clock = std::chrono::steady_clock;
  validate_params(p);
  BatchSummary summary;
  const auto batch_start = clock::now();
  fs::create_directories(out_dir);
  for (const auto& entry : manifest.entries) {
    if (!entry.rgb_path) continue;
    BatchRecord rec;
    rec.id = entry.id;
    rec.path = *entry.rgb_path;
    rec.output = (out_dir / (entry.id + ".npy")).string();
    const auto start = clock::now();
    try {
      const RgbImage rgb = read_rgb_png(manifest.resolve(*entry.rgb_path));
      ReverseOptions entry_opts = opts;
      entry_opts.frame = entry.frame();
      const ReverseResult result = reverse ? reverse(rgb, entry_opts) : run_reverse(rgb, p, entry_opts);
      write_array(rec.output, result.raw.data());
      rec.ok = true;
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
    }
    rec.milliseconds = std::chrono::duration<double, std::milli>(clock::now() - start).count();
    if (on_record) on_record(rec);
    summary.records.push_back(std::move(rec));
  }
  summary.total_milliseconds = std::chrono::duration<double, std::milli>(clock::now() - batch_start).count();
  return summary;
}

}  // namespace rawkit
