#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "rawkit/dataio.hpp"
#include "rawkit/forward.hpp"

namespace rawkit {

enum class ClipPolicy {
  clamp,  // saturated RGB pixels are written at white level and marked
  mark,   // saturated pixels keep their inverted value and are only marked
};

struct ReverseOptions {
  int output_bit_depth = 10;
  ClipPolicy clip_policy = ClipPolicy::clamp;
  bool dither = false;  // uniform +-0.5 DN before rounding
  std::uint64_t seed = 0;
  /// CFA layout to sample. The packed output is in canonical order relative to this layout.
  BayerPattern cfa = BayerPattern::rggb;
  FrameGeometry frame;
  int threads = 1;
};

/// Samples an (h, w, 3) image on the RGGB grid into (h/2, w/2, 4). Throws DimensionError on odd sizes.
ImageF mosaic_rggb(const ImageF& rgb);
ImageF mosaic_cfa(const ImageF& rgb, BayerPattern cfa);

/// dn = round(black + v (white - black)) clamped to the bit-depth range, half away from zero.
RawImage quantize_raw(const ImageF& packed, const IspParams& p, const ReverseOptions& opts = {});

struct ReverseLinear {
  ImageF packed;  // normalized, before quantization
  ClipMask mask;  // (h, w): pixels with any channel at full scale
};

struct ReverseResult {
  RawImage raw;
  ClipMask mask;
};

/// RGB -> normalized packed RAW. Uses 256-entry tables for stored 8-bit input.
ReverseLinear reverse_linear(const RgbImage& rgb, const IspParams& p, const ReverseOptions& opts = {});

/// dequantize -> inverse gamma -> inverse tone -> inverse CCM -> mosaic -> inverse WB -> inverse shading -> quantize.
ReverseResult run_reverse(const RgbImage& rgb, const IspParams& p, const ReverseOptions& opts = {});

/// The same composition built from the individual stage functions. Bit-identical to run_reverse
/// with the default CFA; kept as the readable reference path.
ReverseResult reverse_by_stages(const RgbImage& rgb, const IspParams& p, const ReverseOptions& opts = {});

struct BatchRecord {
  std::string id;
  std::string path;
  std::string output;
  bool ok = false;
  double milliseconds = 0.0;
  std::string error;

  std::string to_json_line() const;
};

struct BatchSummary {
  std::vector<BatchRecord> records;
  double total_milliseconds = 0.0;
  std::size_t succeeded() const;
  std::size_t failed() const { return records.size() - succeeded(); }
};

/// Receives each entry's options with its frame geometry filled in.
using ReverseFn = std::function<ReverseResult(const RgbImage&, const ReverseOptions&)>;

/// Runs the reverse pipeline over every manifest entry with an RGB path and writes `<id>.npy` into
/// `out_dir`. Per-file failures are recorded and do not stop the batch. `on_record` sees each record
/// as soon as it finishes.
BatchSummary unprocess_batch(const DatasetManifest& manifest, const IspParams& p, const ReverseOptions& opts,
                             const std::filesystem::path& out_dir, const ReverseFn& reverse = {},
                             const std::function<void(const BatchRecord&)>& on_record = {});

}  // namespace rawkit
