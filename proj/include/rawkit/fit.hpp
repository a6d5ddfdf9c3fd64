#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rawkit/forward.hpp"
#include "rawkit/model.hpp"

namespace rawkit {

struct LossSpec {
  enum class Kind { l1, l2, soft_gaussian };
  Kind kind = Kind::l2;
  double delta = 0.0;  // soft_gaussian tolerance band

  std::string to_string() const;
  bool operator==(const LossSpec&) const = default;
};

/// "l1", "l2" or "soft:DELTA".
LossSpec parse_loss(std::string_view text);

/// Masked mean of |d| (L1), d^2 (L2) or max(0, |d| - delta)^2 (soft). Throws DataError when every
/// sample is masked. `mask` may be null, the images' size, or mosaic size for packed images.
double loss(const ImageF& pred, const ImageF& target, const ClipMask* mask, const LossSpec& kind);

struct PairSample {
  RgbImage rgb;
  RawImage raw;
  std::optional<FrameGeometry> frame;  // required for shading estimation
};

struct PairBatch {
  std::vector<PairSample> pairs;
  bool aligned = true;
};

/// Throws DataError on empty or inconsistent batches (RGB must be 2x the packed RAW).
void validate_batch(const PairBatch& batch);

/// True where any normalized channel is >= tau. tau must lie in (0, 1].
ClipMask overexposure_mask(const RgbImage& rgb, double tau);

struct LinearColorFit {
  std::array<double, 3> wb_gains{};
  Mat3 ccm{};
  double residual_rmse = 0.0;
  std::size_t samples = 0;
};

struct ToneFit {
  std::vector<double> weights;
  double residual = 0.0;  // final loss value
  int iterations = 0;
};

struct ShadingFit {
  std::array<double, 3> coeffs{};
  double residual_rmse = 0.0;  // over radial bins
  int bins_used = 0;
};

inline constexpr int kShadingBins = 32;
inline constexpr int kToneMaxIterations = 2000;

/// Least-squares fit of the linear color map with gamma, tone and shading held at `current`.
/// Gains are the diagonal factor that leaves the CCM with unit row sums.
LinearColorFit fit_linear_color(const PairBatch& batch, const std::vector<ClipMask>& masks, const IspParams& current);

/// Projected-gradient fit of tone weights on the basis simplex, with color held at `current`.
ToneFit fit_tone_weights(const PairBatch& batch, const std::vector<ClipMask>& masks, const IspParams& current,
                         const LossSpec& loss_kind = {}, const ToneBasis& basis = ToneBasis::standard());

/// Radial gain from binned predicted/observed RAW ratios. Coefficients are not renormalized, so a0
/// may come out below 1 when color gains absorbed part of the falloff.
ShadingFit fit_shading(const PairBatch& batch, const std::vector<ClipMask>& masks, const IspParams& current);

/// Euclidean projection onto the probability simplex.
std::vector<double> project_to_simplex(std::vector<double> v);

/// 256-level per-channel CDF matching of src onto ref. Works on stored 8-bit values.
RgbImage histogram_match(const RgbImage& src, const RgbImage& ref);
/// The per-channel lookup tables histogram_match applies.
std::array<std::array<std::uint8_t, 256>, 3> histogram_match_tables(const RgbImage& src, const RgbImage& ref);

struct FitConfig {
  LossSpec loss;
  double tau = 0.98;
  GammaCurve gamma;
  int max_iterations = 100;  // joint refinement steps
  double tolerance = 1e-12;  // relative cost decrease that ends the refinement
};

struct FitReport {
  IspParams params;
  double linear_color_rmse = 0.0;      // linear domain
  double tone_residual = 0.0;          // tone-stage loss
  std::optional<double> shading_rmse;  // radial bins; absent without frame coordinates
  double rgb_rmse = 0.0;               // joint residual in normalized 8-bit units
  int iterations = 0;
  double excluded_fraction = 0.0;

  std::string to_json() const;
};

/// overexposure mask -> linear color -> tone -> shading as initialization, then a joint
/// Levenberg-Marquardt refinement of color, tone and shading on the RGB residual.
FitReport fit_full(const PairBatch& batch, const FitConfig& config = {});

}  // namespace rawkit
