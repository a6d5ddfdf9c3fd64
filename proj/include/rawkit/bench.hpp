#pragma once

#include <span>
#include <string>
#include <vector>

#include "rawkit/dataio.hpp"
#include "rawkit/reverse.hpp"

namespace rawkit {

inline constexpr double kPsnrCapDb = 100.0;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Peak-1 PSNR over unmasked samples, capped at 100 dB. The squared-error sum is exactly rounded,
/// so the result does not depend on sample order. `mask` may be the images' size or, for packed
/// 4-channel images, the mosaic size.
double psnr(const ImageF& pred, const ImageF& gt, const ClipMask* mask = nullptr);

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, range 1) with
/// reflect-101 borders, averaged over pixels and channels.
double ssim(const ImageF& pred, const ImageF& gt);

/// Normalized [0, 1] view of a packed RAW.
ImageF normalized_raw(const ImageU16& packed, const SensorLevels& levels);

struct EnsembleResult {
  RawImage raw;
  ClipMask mask;
  std::vector<Dihedral> transforms;  // elements actually used
  std::string notice;                // set when rotations were dropped for a non-square input
};

/// Reverses every dihedral view of `rgb`, maps each result back to the original orientation,
/// averages in the normalized domain and quantizes once. Each view samples the CFA layout the
/// transform carries the RGGB grid to, so every view reconstructs the same sensor sites.
EnsembleResult self_ensemble(const RgbImage& rgb, const IspParams& p, const ReverseOptions& opts = {},
                             std::span<const Dihedral> transforms = kAllDihedral);

/// Frame geometry of an image after `t` is applied to its whole frame.
FrameGeometry transform_frame(const FrameGeometry& frame, Dihedral t, int height, int width);

struct ScoreRecord {
  std::string run;
  std::string id;
  Split split = Split::test1;
  bool ok = true;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double masked_psnr_db = 0.0;
  double milliseconds = 0.0;
  std::string error;
  bool operator==(const ScoreRecord&) const = default;
};

struct ScoreAggregate {
  std::string run;
  Split split = Split::test1;
  double mean_psnr_db = 0.0;
  double mean_ssim = 0.0;
  double mean_masked_psnr_db = 0.0;
  std::size_t count = 0;
};

struct ScoreReport {
  std::vector<ScoreRecord> records;

  /// Means over successful records, one row per (run, split) in order of first appearance.
  std::vector<ScoreAggregate> aggregates() const;
  std::size_t failures() const;
  bool operator==(const ScoreReport&) const = default;
};

struct ScoreOptions {
  std::string run = "rawkit";
  double tau = 0.98;
  int threads = 1;
};

/// Scores `<pred_dir>/<id>.npy` against every manifest entry with a RAW path, in id order.
/// Missing or malformed predictions become failure rows.
ScoreReport score_run(const fs::path& pred_dir, const DatasetManifest& manifest, const ScoreOptions& opts = {});

enum class ReportFormat { csv, markdown, json };
ReportFormat parse_report_format(std::string_view name);

std::string emit_report(const ScoreReport& report, ReportFormat format);
ScoreReport load_report_csv(std::string_view text);
ScoreReport load_report_json(std::string_view text);

struct TimingResult {
  std::vector<double> milliseconds;  // per repeat, warm-up excluded
  double median_ms = 0.0;
  double ms_per_megapixel = 0.0;
};

/// Times run_reverse on a synthetic width x height RGB image. Requires repeats >= 3.
TimingResult time_pipeline(int width, int height, const IspParams& p, int repeats, int threads = 1);

}  // namespace rawkit
