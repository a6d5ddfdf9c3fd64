#include "rawkit/fit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "rawkit/dataio.hpp"
#include "rawkit/reverse.hpp"

namespace rawkit {

namespace {

constexpr int kBorder = 2;
constexpr std::size_t kRobustSubsample = 32768;
constexpr double kImprovementTolerance = 1e-9;

void check_masks(const PairBatch& batch, const std::vector<ClipMask>& masks) {
  if (masks.empty()) return;
  if (masks.size() != batch.pairs.size()) throw DimensionError("one mask per pair is required");
  for (std::size_t k = 0; k < masks.size(); ++k) {
    check_mask_shape(masks[k], batch.pairs[k].rgb.height(), batch.pairs[k].rgb.width(), 3);
  }
}

void require_aligned(const PairBatch& batch) {
  validate_batch(batch);
  if (!batch.aligned) throw DataError("pixel-wise fitting requires an aligned batch");
}

IspParams with_levels(IspParams p, const RawImage& raw) {
  p.black_level = raw.black_level();
  p.white_level = raw.white_level();
  p.bit_depth = raw.bit_depth();
  return p;
}

FrameGeometry frame_of(const PairSample& pair) { return pair.frame.value_or(FrameGeometry{}); }

// Maps stored or real RGB values to the linear (pre-tone) domain of `p`.
class Linearizer {
 public:
  explicit Linearizer(const IspParams& p) : p_(p) {
    for (int v = 0; v < 256; ++v) table_[v] = apply(v / 255.0);
  }
  double apply(double v) const {
    return ToneBasis::standard().invert(p_.tone_weights, gamma_decode(p_.gamma, v));
  }
  double operator()(const RgbImage& rgb, int y, int x, int c) const {
    return rgb.is_stored() ? table_[rgb.u8().at(y, x, c)] : apply(rgb.real().at(y, x, c));
  }

 private:
  const IspParams& p_;
  std::array<double, 256> table_{};
};

// Pixels usable as color correspondences under `current`: unmasked, off the border, no zero
// channel, and no sensor or white-balance saturation within the 3x3 demosaic footprint.
ImageU8 usable_pixels(const PairSample& pair, const ClipMask* mask, const IspParams& current) {
  const int h = pair.rgb.height();
  const int w = pair.rgb.width();
  const RawImage& raw = pair.raw;
  const RadiusField radius(h / 2, w / 2, frame_of(pair));
  const double range = raw.white_level() - raw.black_level();
  ImageU8 hot(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int ch = canonical_channel(BayerPattern::rggb, y % 2, x % 2);
      const int dn = raw.data().at(y / 2, x / 2, ch);
      const double n = (dn - raw.black_level()) / range;
      const double gained = n * shading_gain(current.shading, radius.r2(y / 2, x / 2)) *
                            current.wb_gains[channel_color(ch)];
      hot.at(y, x) = (dn >= raw.white_level() || gained >= 1.0) ? 1 : 0;
    }
  }
  ImageU8 ok(h, w, 1);
  for (int y = kBorder; y < h - kBorder; ++y) {
    for (int x = kBorder; x < w - kBorder; ++x) {
      if (mask != nullptr && mask->at(y, x)) continue;
      bool good = true;
      for (int c = 0; c < 3 && good; ++c) good = pair.rgb.value(y, x, c) > 0.0;
      for (int dy = -1; dy <= 1 && good; ++dy) {
        for (int dx = -1; dx <= 1 && good; ++dx) good = hot.at(y + dy, x + dx) == 0;
      }
      ok.at(y, x) = good ? 1 : 0;
    }
  }
  return ok;
}

// Demosaicked, shading-corrected, normalized RAW: the linear color regressors.
ImageF color_regressors(const PairSample& pair, const IspParams& current) {
  ImageF n = normalize_black_white(pair.raw, current).image;
  n = apply_shading_gain(std::move(n), current, Direction::forward, frame_of(pair));
  return demosaic_bilinear(n);
}

Mat3 color_matrix(const IspParams& p) {
  Mat3 m = p.ccm;
  for (auto& row : m) {
    for (int c = 0; c < 3; ++c) row[c] *= p.wb_gains[c];
  }
  return m;
}

std::array<double, 3> apply3(const Mat3& m, const double* v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

double sample_loss(double d, const LossSpec& kind) {
  switch (kind.kind) {
    case LossSpec::Kind::l1:
      return std::abs(d);
    case LossSpec::Kind::l2:
      return d * d;
    case LossSpec::Kind::soft_gaussian: {
      const double e = std::max(0.0, std::abs(d) - kind.delta);
      return e * e;
    }
  }
  return 0.0;
}

double sample_loss_derivative(double d, const LossSpec& kind) {
  const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
  switch (kind.kind) {
    case LossSpec::Kind::l1:
      return s;
    case LossSpec::Kind::l2:
      return 2.0 * d;
    case LossSpec::Kind::soft_gaussian:
      return 2.0 * std::max(0.0, std::abs(d) - kind.delta) * s;
  }
  return 0.0;
}

// Minimizes w'Gw - 2b'w over the simplex by enumerating supports; exact for small K.
std::vector<double> simplex_qp(const Eigen::MatrixXd& G, const Eigen::VectorXd& b) {
  const int k = static_cast<int>(b.size());
  std::vector<double> best(k, 1.0 / k);
  double best_value = std::numeric_limits<double>::infinity();
  for (unsigned support = 1; support < (1u << k); ++support) {
    std::vector<int> idx;
    for (int i = 0; i < k; ++i) {
      if (support & (1u << i)) idx.push_back(i);
    }
    const int m = static_cast<int>(idx.size());
    // KKT: [G_s 1; 1' 0] [w; mu] = [b_s; 1]
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m + 1, m + 1);
    Eigen::VectorXd rhs(m + 1);
    for (int r = 0; r < m; ++r) {
      for (int c = 0; c < m; ++c) A(r, c) = G(idx[r], idx[c]);
      A(r, m) = 1.0;
      A(m, r) = 1.0;
      rhs(r) = b(idx[r]);
    }
    rhs(m) = 1.0;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    if (!lu.isInvertible()) continue;
    const Eigen::VectorXd sol = lu.solve(rhs);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(k);
    bool feasible = true;
    for (int r = 0; r < m; ++r) {
      if (sol(r) < -1e-12) feasible = false;
      w(idx[r]) = std::max(0.0, sol(r));
    }
    if (!feasible) continue;
    const double value = w.dot(G * w) - 2.0 * b.dot(w);
    if (value < best_value) {
      best_value = value;
      best.assign(w.data(), w.data() + k);
    }
  }
  return project_to_simplex(best);
}

struct ToneSamples {
  std::vector<double> x;  // linear value after the color matrix
  std::vector<double> y;  // gamma-decoded target
};

struct BinFit {
  std::array<double, 3> coeffs{};
  double rmse = 0.0;
};

// Weighted least squares of g ~ a0 + a1 u + a2 u^2 with a1, a2 >= 0 (dropping negative terms and refitting).
BinFit fit_radial(const std::vector<double>& u, const std::vector<double>& g, const std::vector<double>& wt) {
  std::array<bool, 3> active = {true, true, true};
  std::array<double, 3> a{};
  for (int round = 0; round < 3; ++round) {
    std::vector<int> cols;
    for (int c = 0; c < 3; ++c) {
      if (active[c]) cols.push_back(c);
    }
    Eigen::MatrixXd A(u.size(), cols.size());
    Eigen::VectorXd rhs(u.size());
    for (std::size_t r = 0; r < u.size(); ++r) {
      const double sw = std::sqrt(wt[r]);
      for (std::size_t c = 0; c < cols.size(); ++c) A(r, c) = sw * std::pow(u[r], cols[c]);
      rhs(r) = sw * g[r];
    }
    const Eigen::VectorXd sol = A.colPivHouseholderQr().solve(rhs);
    a = {0.0, 0.0, 0.0};
    for (std::size_t c = 0; c < cols.size(); ++c) a[cols[c]] = sol(c);
    int worst = -1;
    for (int c = 1; c < 3; ++c) {
      if (a[c] < 0.0 && (worst < 0 || a[c] < a[worst])) worst = c;
    }
    if (worst < 0) break;
    active[worst] = false;
  }
  for (int c = 1; c < 3; ++c) a[c] = std::max(0.0, a[c]);
  double num = 0.0;
  double den = 0.0;
  for (std::size_t r = 0; r < u.size(); ++r) {
    const double e = g[r] - shading_gain(a, u[r]);
    num += wt[r] * e * e;
    den += wt[r];
  }
  return {a, den > 0.0 ? std::sqrt(num / den) : 0.0};
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string LossSpec::to_string() const {
  switch (kind) {
    case Kind::l1:
      return "l1";
    case Kind::l2:
      return "l2";
    case Kind::soft_gaussian:
      return "soft:" + format_double(delta);
  }
  return "l2";
}

LossSpec parse_loss(std::string_view text) {
  if (text == "l1" || text == "L1") return {LossSpec::Kind::l1, 0.0};
  if (text == "l2" || text == "L2") return {LossSpec::Kind::l2, 0.0};
  constexpr std::string_view prefix = "soft:";
  if (text.substr(0, prefix.size()) == prefix) {
    const std::string_view num = text.substr(prefix.size());
    double delta = 0.0;
    const auto res = std::from_chars(num.data(), num.data() + num.size(), delta);
    if (res.ec == std::errc() && res.ptr == num.data() + num.size() && std::isfinite(delta) && delta >= 0.0) {
      return {LossSpec::Kind::soft_gaussian, delta};
    }
  }
  throw ParamError("unknown loss '" + std::string(text) + "' (expected l1, l2 or soft:DELTA)");
}

double loss(const ImageF& pred, const ImageF& target, const ClipMask* mask, const LossSpec& kind) {
  if (!pred.same_shape(target)) throw DimensionError("loss needs images of equal shape");
  if (mask != nullptr) check_mask_shape(*mask, pred.height(), pred.width(), pred.channels());
  double sum = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < pred.height(); ++y) {
    for (int x = 0; x < pred.width(); ++x) {
      for (int c = 0; c < pred.channels(); ++c) {
        if (mask != nullptr && sample_masked(*mask, pred.height(), y, x, c)) continue;
        sum += sample_loss(pred.at(y, x, c) - target.at(y, x, c), kind);
        ++n;
      }
    }
  }
  if (n == 0) throw DataError("no valid pixels");
  return sum / static_cast<double>(n);
}

void validate_batch(const PairBatch& batch) {
  if (batch.pairs.empty()) throw DataError("empty batch");
  const SensorLevels levels = batch.pairs.front().raw.levels();
  for (std::size_t k = 0; k < batch.pairs.size(); ++k) {
    const auto& pair = batch.pairs[k];
    if (pair.rgb.height() != pair.raw.mosaic_height() || pair.rgb.width() != pair.raw.mosaic_width()) {
      throw DataError("pair " + std::to_string(k) + ": RGB " + std::to_string(pair.rgb.height()) + "x" +
                      std::to_string(pair.rgb.width()) + " is not twice the packed RAW " +
                      std::to_string(pair.raw.packed_height()) + "x" + std::to_string(pair.raw.packed_width()));
    }
    const SensorLevels& l = pair.raw.levels();
    if (l.bit_depth != levels.bit_depth || l.black_level != levels.black_level ||
        l.white_level != levels.white_level) {
      throw DataError("pair " + std::to_string(k) + ": sensor levels differ within the batch");
    }
  }
}

ClipMask overexposure_mask(const RgbImage& rgb, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ParamError("tau must lie in (0, 1]");
  ClipMask mask(rgb.height(), rgb.width());
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      if (rgb.value(y, x, 0) >= tau || rgb.value(y, x, 1) >= tau || rgb.value(y, x, 2) >= tau) mask.set(y, x);
    }
  }
  return mask;
}

LinearColorFit fit_linear_color(const PairBatch& batch, const std::vector<ClipMask>& masks,
                                const IspParams& current_in) {
  require_aligned(batch);
  check_masks(batch, masks);
  const IspParams current = with_levels(current_in, batch.pairs.front().raw);
  const Linearizer linearize(current);

  Eigen::Matrix3d xtx = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d xty = Eigen::Matrix3d::Zero();
  std::size_t n = 0;
  std::vector<ImageF> regressors;
  std::vector<ImageU8> usable;
  for (std::size_t k = 0; k < batch.pairs.size(); ++k) {
    const auto& pair = batch.pairs[k];
    regressors.push_back(color_regressors(pair, current));
    usable.push_back(usable_pixels(pair, masks.empty() ? nullptr : &masks[k], current));
    const ImageF& d = regressors.back();
    for (int y = 0; y < d.height(); ++y) {
      for (int x = 0; x < d.width(); ++x) {
        if (usable.back().at(y, x) == 0) continue;
        const Eigen::Vector3d xv(d.at(y, x, 0), d.at(y, x, 1), d.at(y, x, 2));
        const Eigen::Vector3d yv(linearize(pair.rgb, y, x, 0), linearize(pair.rgb, y, x, 1),
                                 linearize(pair.rgb, y, x, 2));
        xtx += xv * xv.transpose();
        xty += xv * yv.transpose();
        ++n;
      }
    }
  }
  if (n < 3) throw DataError("degenerate color data: too few usable pixels");
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(xtx);
  const double top = eig.eigenvalues().maxCoeff();
  if (!(top > 0.0) || eig.eigenvalues().minCoeff() <= 1e-10 * top) throw DataError("degenerate color data");

  // y = M x with M = ccm * diag(gains).
  const Eigen::Matrix3d m = xtx.ldlt().solve(xty).transpose();
  const Eigen::Vector3d s = m.fullPivLu().solve(Eigen::Vector3d::Ones());
  if (!(s.array() > 0.0).all() || !s.allFinite()) {
    throw DataError("degenerate color data: fitted map has no positive white balance");
  }
  LinearColorFit fit;
  for (int c = 0; c < 3; ++c) {
    fit.wb_gains[c] = 1.0 / s(c);
    for (int r = 0; r < 3; ++r) fit.ccm[r][c] = m(r, c) * s(c);
  }

  double sse = 0.0;
  for (std::size_t k = 0; k < batch.pairs.size(); ++k) {
    const ImageF& d = regressors[k];
    for (int y = 0; y < d.height(); ++y) {
      for (int x = 0; x < d.width(); ++x) {
        if (usable[k].at(y, x) == 0) continue;
        const Eigen::Vector3d xv(d.at(y, x, 0), d.at(y, x, 1), d.at(y, x, 2));
        const Eigen::Vector3d r = m * xv;
        for (int c = 0; c < 3; ++c) {
          const double e = r(c) - linearize(batch.pairs[k].rgb, y, x, c);
          sse += e * e;
        }
      }
    }
  }
  fit.samples = n;
  fit.residual_rmse = std::sqrt(sse / (3.0 * static_cast<double>(n)));
  return fit;
}

std::vector<double> project_to_simplex(std::vector<double> v) {
  if (v.empty()) return v;
  std::vector<double> u = v;
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    const double t = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  double total = 0.0;
  for (double& x : v) {
    x = std::max(0.0, x - theta);
    total += x;
  }
  for (double& x : v) x /= total;
  return v;
}

ToneFit fit_tone_weights(const PairBatch& batch, const std::vector<ClipMask>& masks, const IspParams& current_in,
                         const LossSpec& loss_kind, const ToneBasis& basis) {
  require_aligned(batch);
  check_masks(batch, masks);
  const std::size_t k = basis.size();
  if (k == 0) throw ParamError("tone basis is empty");
  ToneFit fit;
  if (k == 1) {
    fit.weights = {1.0};
    return fit;
  }
  const IspParams current = with_levels(current_in, batch.pairs.front().raw);
  const Mat3 m = color_matrix(current);

  ToneSamples samples;
  for (std::size_t p = 0; p < batch.pairs.size(); ++p) {
    const auto& pair = batch.pairs[p];
    const ImageF d = color_regressors(pair, current);
    const ImageU8 ok = usable_pixels(pair, masks.empty() ? nullptr : &masks[p], current);
    std::array<double, 256> decoded{};
    for (int v = 0; v < 256; ++v) decoded[v] = gamma_decode(current.gamma, v / 255.0);
    for (int y = 0; y < d.height(); ++y) {
      for (int x = 0; x < d.width(); ++x) {
        if (ok.at(y, x) == 0) continue;
        const auto lin = apply3(m, &d.at(y, x, 0));
        for (int c = 0; c < 3; ++c) {
          if (lin[c] < 0.0 || lin[c] > 1.0) continue;
          samples.x.push_back(lin[c]);
          samples.y.push_back(pair.rgb.is_stored() ? decoded[pair.rgb.u8().at(y, x, c)]
                                                   : gamma_decode(current.gamma, pair.rgb.real().at(y, x, c)));
        }
      }
    }
  }
  const std::size_t n = samples.x.size();
  if (n == 0) throw DataError("no valid pixels");

  // Normal equations of the squared loss; also the warm start and step size for the robust losses.
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
  double yy = 0.0;
  Eigen::VectorXd phi(k);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < k; ++c) phi(c) = basis.curve(c).eval(samples.x[s]);
    gram.noalias() += phi * phi.transpose();
    b += samples.y[s] * phi;
    yy += samples.y[s] * samples.y[s];
  }
  gram /= static_cast<double>(n);
  b /= static_cast<double>(n);
  yy /= static_cast<double>(n);
  const double lipschitz = 2.0 * Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram).eigenvalues().maxCoeff();
  const double step = lipschitz > 0.0 ? 1.0 / lipschitz : 1.0;

  // Subsample for the per-sample losses; evenly strided so the choice is deterministic.
  std::vector<std::size_t> subset;
  if (loss_kind.kind != LossSpec::Kind::l2) {
    const std::size_t stride = std::max<std::size_t>(1, n / kRobustSubsample);
    for (std::size_t s = 0; s < n; s += stride) subset.push_back(s);
  }
  auto objective = [&](const std::vector<double>& w) {
    if (loss_kind.kind == LossSpec::Kind::l2) {
      const Eigen::Map<const Eigen::VectorXd> wv(w.data(), k);
      return std::max(0.0, wv.dot(gram * wv) - 2.0 * b.dot(wv) + yy);
    }
    double sum = 0.0;
    for (std::size_t s : subset) sum += sample_loss(basis.eval(w, samples.x[s]) - samples.y[s], loss_kind);
    return sum / static_cast<double>(subset.size());
  };
  auto gradient = [&](const std::vector<double>& w) {
    std::vector<double> g(k, 0.0);
    if (loss_kind.kind == LossSpec::Kind::l2) {
      const Eigen::Map<const Eigen::VectorXd> wv(w.data(), k);
      const Eigen::VectorXd gv = 2.0 * (gram * wv - b);
      std::copy(gv.data(), gv.data() + k, g.begin());
      return g;
    }
    for (std::size_t s : subset) {
      const double dl = sample_loss_derivative(basis.eval(w, samples.x[s]) - samples.y[s], loss_kind);
      for (std::size_t c = 0; c < k; ++c) g[c] += dl * basis.curve(c).eval(samples.x[s]);
    }
    for (double& v : g) v /= static_cast<double>(subset.size());
    return g;
  };

  // Accelerated projected gradient with function-value restart, warm-started at the exact
  // least-squares simplex solution.
  std::vector<double> w = simplex_qp(gram, b);
  std::vector<double> z = w;
  double t = 1.0;
  double f = objective(w);
  std::vector<double> best = w;
  double best_f = f;
  int it = 0;
  for (; it < kToneMaxIterations; ++it) {
    const double eta = loss_kind.kind == LossSpec::Kind::l1 ? step / std::sqrt(1.0 + it) : step;
    const std::vector<double> g = gradient(z);
    std::vector<double> next(k);
    for (std::size_t c = 0; c < k; ++c) next[c] = z[c] - eta * g[c];
    next = project_to_simplex(std::move(next));
    const double f_next = objective(next);
    if (f_next > f) {
      if (z == w) break;  // a plain gradient step no longer descends
      z = w;
      t = 1.0;
      continue;
    }
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    for (std::size_t c = 0; c < k; ++c) z[c] = next[c] + ((t - 1.0) / t_next) * (next[c] - w[c]);
    const double improvement = f - f_next;
    w = next;
    t = t_next;
    if (f_next < best_f) {
      best_f = f_next;
      best = w;
    }
    if (improvement <= kImprovementTolerance * f) {
      ++it;
      break;
    }
    f = f_next;
  }
  fit.weights = project_to_simplex(best);
  fit.residual = objective(fit.weights);
  fit.iterations = it;
  return fit;
}

ShadingFit fit_shading(const PairBatch& batch, const std::vector<ClipMask>& masks, const IspParams& current_in) {
  require_aligned(batch);
  check_masks(batch, masks);
  for (const auto& pair : batch.pairs) {
    if (!pair.frame) throw DataError("shading requires full-frame coordinates");
  }
  const IspParams current = with_levels(current_in, batch.pairs.front().raw);
  IspParams flat = current;
  flat.shading = {1.0, 0.0, 0.0};

  std::array<double, kShadingBins> sum_pred{};
  std::array<double, kShadingBins> sum_obs{};
  std::array<double, kShadingBins> sum_u{};
  std::array<std::size_t, kShadingBins> count{};
  for (std::size_t p = 0; p < batch.pairs.size(); ++p) {
    const auto& pair = batch.pairs[p];
    ReverseOptions opts;
    opts.output_bit_depth = current.bit_depth;
    opts.clip_policy = ClipPolicy::mark;
    opts.frame = *pair.frame;
    const ImageF pred = reverse_linear(pair.rgb, flat, opts).packed;
    const ImageF obs = normalize_black_white(pair.raw, current).image;
    const ImageU8 ok = usable_pixels(pair, masks.empty() ? nullptr : &masks[p], current);
    const RadiusField radius(pred.height(), pred.width(), *pair.frame);
    for (int i = 0; i < pred.height(); ++i) {
      for (int j = 0; j < pred.width(); ++j) {
        const double u = radius.r2(i, j);
        const int bin = std::min(kShadingBins - 1, static_cast<int>(std::sqrt(u) * kShadingBins));
        for (int ch = 0; ch < 4; ++ch) {
          const auto [dy, dx] = channel_site(BayerPattern::rggb, ch);
          if (ok.at(2 * i + dy, 2 * j + dx) == 0) continue;
          const double o = obs.at(i, j, ch);
          const double q = pred.at(i, j, ch);
          if (!(o > 0.02) || !(q > 0.0) || q >= 1.0) continue;
          sum_pred[bin] += q;
          sum_obs[bin] += o;
          sum_u[bin] += u * o;
          ++count[bin];
        }
      }
    }
  }
  std::vector<double> u;
  std::vector<double> g;
  std::vector<double> wt;
  for (int bin = 0; bin < kShadingBins; ++bin) {
    if (count[bin] == 0) continue;
    u.push_back(sum_u[bin] / sum_obs[bin]);
    g.push_back(std::exp(std::log(sum_pred[bin]) - std::log(sum_obs[bin])));
    wt.push_back(static_cast<double>(count[bin]));
  }
  if (u.size() < 3) throw DataError("shading fit needs samples in at least 3 radial bins");
  const BinFit bins = fit_radial(u, g, wt);
  return {bins.coeffs, bins.rmse, static_cast<int>(u.size())};
}

std::array<std::array<std::uint8_t, 256>, 3> histogram_match_tables(const RgbImage& src, const RgbImage& ref) {
  const ImageU8 s = src.stored();
  const ImageU8 r = ref.stored();
  std::array<std::array<std::uint8_t, 256>, 3> tables{};
  for (int c = 0; c < 3; ++c) {
    std::array<std::uint64_t, 256> cs{};
    std::array<std::uint64_t, 256> cr{};
    for (std::size_t k = c; k < s.size(); k += 3) ++cs[s.data()[k]];
    for (std::size_t k = c; k < r.size(); k += 3) ++cr[r.data()[k]];
    std::partial_sum(cs.begin(), cs.end(), cs.begin());
    std::partial_sum(cr.begin(), cr.end(), cr.begin());
    const std::uint64_t ns = cs[255];
    const std::uint64_t nr = cr[255];
    int u = 0;
    for (int v = 0; v < 256; ++v) {
      // Smallest u with CDF_ref(u) >= CDF_src(v); nondecreasing in v.
      while (u < 255 && cr[u] * ns < cs[v] * nr) ++u;
      tables[c][v] = static_cast<std::uint8_t>(u);
    }
  }
  return tables;
}

RgbImage histogram_match(const RgbImage& src, const RgbImage& ref) {
  const auto tables = histogram_match_tables(src, ref);
  ImageU8 out = src.stored();
  for (std::size_t k = 0; k < out.size(); ++k) out.data()[k] = tables[k % 3][out.data()[k]];
  return RgbImage::from_u8(std::move(out));
}

std::string FitReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema"] = "rawkit-fit-report-v1";
  j["params"] = nlohmann::ordered_json::parse(params_to_json(params));
  j["residuals"] = {{"linear_color", linear_color_rmse},
                    {"tone", tone_residual},
                    {"shading", shading_rmse ? nlohmann::ordered_json(*shading_rmse) : nlohmann::ordered_json()}};
  j["residuals"]["rgb"] = rgb_rmse;
  j["iterations"] = iterations;
  j["excluded_fraction"] = excluded_fraction;
  return j.dump(2);
}

namespace {

double gamma_slope(const GammaCurve& g, double x) {
  if (g.kind == GammaCurve::Kind::power) {
    return x <= 0.0 ? std::numeric_limits<double>::infinity() : std::pow(x, 1.0 / g.exponent - 1.0) / g.exponent;
  }
  if (x <= 0.0031308) return 12.92;
  return 1.055 / 2.4 * std::pow(x, 1.0 / 2.4 - 1.0);
}

// Per-pair data of the joint refinement. The shading-corrected regressor is linear in the
// shading coefficients: d(a) = D0 + a1 D1 + a2 D2 with a0 = 1.
struct JointPair {
  std::array<ImageF, 3> parts;
  ImageU8 usable;
  const RgbImage* rgb = nullptr;
};

struct JointState {
  Eigen::Matrix3d m;  // ccm * diag(gains)
  std::vector<double> w;
  double a1 = 0.0;
  double a2 = 0.0;
};

struct JointEval {
  double cost = 0.0;  // mean squared residual in the encoded (8-bit normalized) domain
  std::size_t samples = 0;
  Eigen::MatrixXd h;  // J'J / n
  Eigen::VectorXd g;  // J'r / n
};

JointPair make_joint_pair(const PairSample& pair, const ClipMask* mask, const IspParams& current) {
  JointPair jp;
  jp.rgb = &pair.rgb;
  jp.usable = usable_pixels(pair, mask, current);
  const ImageF n = normalize_black_white(pair.raw, current).image;
  const RadiusField radius(n.height(), n.width(), frame_of(pair));
  ImageF n1 = n;
  ImageF n2 = n;
  for (int i = 0; i < n.height(); ++i) {
    for (int j = 0; j < n.width(); ++j) {
      const double u = radius.r2(i, j);
      for (int ch = 0; ch < 4; ++ch) {
        n1.at(i, j, ch) *= u;
        n2.at(i, j, ch) *= u * u;
      }
    }
  }
  jp.parts = {demosaic_bilinear(n), demosaic_bilinear(n1), demosaic_bilinear(n2)};
  return jp;
}

// Residuals r = gamma(tone(M d(a))) - rgb over usable samples whose linear value stays in [0, 1].
// Parameter order: M row-major (9), tone weights (K), then a1, a2 when `shading` is set.
JointEval evaluate_joint(const std::vector<JointPair>& pairs, const JointState& st, const GammaCurve& gamma,
                         const ToneBasis& basis, bool shading, bool with_jacobian) {
  const std::size_t k = basis.size();
  const int np = 9 + static_cast<int>(k) + (shading ? 2 : 0);
  JointEval ev;
  if (with_jacobian) {
    ev.h = Eigen::MatrixXd::Zero(np, np);
    ev.g = Eigen::VectorXd::Zero(np);
  }
  constexpr int kBlock = 2048;
  Eigen::MatrixXd block(kBlock, np);
  Eigen::VectorXd rblock(kBlock);
  int rows = 0;
  auto flush = [&] {
    if (rows == 0) return;
    ev.h.noalias() += block.topRows(rows).transpose() * block.topRows(rows);
    ev.g.noalias() += block.topRows(rows).transpose() * rblock.head(rows);
    rows = 0;
  };
  double sse = 0.0;
  std::vector<double> phi(k);
  for (const auto& jp : pairs) {
    const ImageF& d0 = jp.parts[0];
    for (int y = 0; y < d0.height(); ++y) {
      for (int x = 0; x < d0.width(); ++x) {
        if (jp.usable.at(y, x) == 0) continue;
        Eigen::Vector3d d(d0.at(y, x, 0), d0.at(y, x, 1), d0.at(y, x, 2));
        Eigen::Vector3d d1 = Eigen::Vector3d::Zero();
        Eigen::Vector3d d2 = Eigen::Vector3d::Zero();
        if (shading) {
          d1 = Eigen::Vector3d(jp.parts[1].at(y, x, 0), jp.parts[1].at(y, x, 1), jp.parts[1].at(y, x, 2));
          d2 = Eigen::Vector3d(jp.parts[2].at(y, x, 0), jp.parts[2].at(y, x, 1), jp.parts[2].at(y, x, 2));
          d += st.a1 * d1 + st.a2 * d2;
        }
        const Eigen::Vector3d lin = st.m * d;
        for (int c = 0; c < 3; ++c) {
          const double v = lin(c);
          if (v < 0.0 || v > 1.0) continue;
          const double t = basis.eval(st.w, v);
          const double r = gamma_encode(gamma, t) - jp.rgb->value(y, x, c);
          sse += r * r;
          ++ev.samples;
          if (!with_jacobian) continue;
          const double ge = gamma_slope(gamma, t);
          const double gt = ge * basis.slope(st.w, v);
          if (!std::isfinite(gt)) continue;
          auto row = block.row(rows);
          row.setZero();
          for (int q = 0; q < 3; ++q) row(3 * c + q) = gt * d(q);
          for (std::size_t b = 0; b < k; ++b) row(9 + b) = ge * basis.curve(b).eval(v);
          if (shading) {
            row(9 + k) = gt * st.m.row(c).dot(d1);
            row(10 + k) = gt * st.m.row(c).dot(d2);
          }
          rblock(rows) = r;
          if (++rows == kBlock) flush();
        }
      }
    }
  }
  if (with_jacobian) flush();
  if (ev.samples == 0) throw DataError("no valid pixels");
  const double n = static_cast<double>(ev.samples);
  ev.cost = sse / n;
  if (with_jacobian) {
    ev.h /= n;
    ev.g /= n;
  }
  return ev;
}

// Projected Levenberg-Marquardt on the joint residual. Tone weights stay on the simplex (the
// equality is enforced in each step, bounds by an active set), shading terms stay nonnegative.
JointState refine_joint(const std::vector<JointPair>& pairs, JointState st, const GammaCurve& gamma,
                        const ToneBasis& basis, bool shading, int max_iterations, double tolerance,
                        int& iterations_used) {
  const int k = static_cast<int>(basis.size());
  const int np = 9 + k + (shading ? 2 : 0);
  double lambda = 1e-4;
  JointEval ev = evaluate_joint(pairs, st, gamma, basis, shading, true);
  iterations_used = 0;
  for (int it = 0; it < max_iterations; ++it) {
    ++iterations_used;
    bool improved = false;
    while (lambda < 1e12) {
      // Variables pinned at a bound whose step would leave the feasible set are dropped.
      std::vector<bool> fixed(np, false);
      Eigen::VectorXd delta = Eigen::VectorXd::Zero(np);
      for (int round = 0; round <= np; ++round) {
        std::vector<int> free;
        for (int q = 0; q < np; ++q) {
          if (!fixed[q]) free.push_back(q);
        }
        std::vector<int> tone_free;
        for (std::size_t f = 0; f < free.size(); ++f) {
          if (free[f] >= 9 && free[f] < 9 + k) tone_free.push_back(static_cast<int>(f));
        }
        const int nf = static_cast<int>(free.size());
        const int nc = tone_free.empty() ? 0 : 1;
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(nf + nc, nf + nc);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nf + nc);
        for (int r = 0; r < nf; ++r) {
          for (int c = 0; c < nf; ++c) a(r, c) = ev.h(free[r], free[c]);
          a(r, r) += lambda * std::max(ev.h(free[r], free[r]), 1e-12);
          rhs(r) = -ev.g(free[r]);
        }
        for (int f : tone_free) {
          a(f, nf) = 1.0;
          a(nf, f) = 1.0;
        }
        const Eigen::VectorXd sol = a.fullPivLu().solve(rhs);
        delta.setZero();
        for (int r = 0; r < nf; ++r) delta(free[r]) = sol(r);
        bool changed = false;
        for (int q = 9; q < np; ++q) {
          const double value = q < 9 + k ? st.w[q - 9] : (q == 9 + k ? st.a1 : st.a2);
          if (!fixed[q] && value <= 0.0 && delta(q) < 0.0) {
            fixed[q] = true;
            changed = true;
          }
        }
        if (!changed) break;
      }
      JointState trial = st;
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) trial.m(r, c) += delta(3 * r + c);
      }
      for (int b = 0; b < k; ++b) trial.w[b] += delta(9 + b);
      trial.w = project_to_simplex(trial.w);
      if (shading) {
        trial.a1 = std::max(0.0, trial.a1 + delta(9 + k));
        trial.a2 = std::max(0.0, trial.a2 + delta(10 + k));
      }
      JointEval trial_ev;
      try {
        trial_ev = evaluate_joint(pairs, trial, gamma, basis, shading, true);
      } catch (const DataError&) {
        lambda *= 8.0;
        continue;
      }
      if (trial_ev.cost < ev.cost) {
        const double gain = (ev.cost - trial_ev.cost) / ev.cost;
        st = std::move(trial);
        ev = std::move(trial_ev);
        lambda = std::max(lambda / 4.0, 1e-12);
        improved = gain > tolerance;
        break;
      }
      lambda *= 8.0;
    }
    if (!improved) break;
  }
  return st;
}

// Linear-domain RMSE of the color map under `p` (the linear color stage's residual).
double linear_color_residual(const PairBatch& batch, const std::vector<ClipMask>& masks, const IspParams& p) {
  const Linearizer linearize(p);
  const Mat3 m = color_matrix(p);
  double sse = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < batch.pairs.size(); ++k) {
    const auto& pair = batch.pairs[k];
    const ImageF d = color_regressors(pair, p);
    const ImageU8 ok = usable_pixels(pair, &masks[k], p);
    for (int y = 0; y < d.height(); ++y) {
      for (int x = 0; x < d.width(); ++x) {
        if (ok.at(y, x) == 0) continue;
        const auto lin = apply3(m, &d.at(y, x, 0));
        for (int c = 0; c < 3; ++c) {
          const double e = lin[c] - linearize(pair.rgb, y, x, c);
          sse += e * e;
        }
        ++n;
      }
    }
  }
  return n == 0 ? 0.0 : std::sqrt(sse / (3.0 * static_cast<double>(n)));
}

}  // namespace

FitReport fit_full(const PairBatch& batch, const FitConfig& config) {
  require_aligned(batch);
  if (config.max_iterations < 1) throw ParamError("max_iterations must be at least 1");
  const ToneBasis& basis = ToneBasis::standard();
  std::vector<ClipMask> masks;
  std::size_t total_pixels = 0;
  for (const auto& pair : batch.pairs) {
    masks.push_back(overexposure_mask(pair.rgb, config.tau));
    total_pixels += static_cast<std::size_t>(pair.rgb.height()) * pair.rgb.width();
  }
  const bool has_frames =
      std::all_of(batch.pairs.begin(), batch.pairs.end(), [](const PairSample& s) { return s.frame.has_value(); });

  // Stage-wise initialization.
  IspParams p = IspParams::identity(batch.pairs.front().raw.levels());
  p.gamma = config.gamma;
  const LinearColorFit lc = fit_linear_color(batch, masks, p);
  p.wb_gains = lc.wb_gains;
  p.ccm = lc.ccm;
  p.tone_weights = fit_tone_weights(batch, masks, p, LossSpec{}, basis).weights;
  if (has_frames) {
    const ShadingFit sf = fit_shading(batch, masks, p);
    if (sf.coeffs[0] > 0.0) {
      p.shading = {1.0, sf.coeffs[1] / sf.coeffs[0], sf.coeffs[2] / sf.coeffs[0]};
      for (double& g : p.wb_gains) g *= sf.coeffs[0];
    }
  }

  // Joint refinement; the usable-pixel set depends on the gains, so it is rebuilt once the
  // parameters have moved.
  FitReport report;
  for (int round = 0; round < 2; ++round) {
    std::vector<JointPair> pairs;
    for (std::size_t k = 0; k < batch.pairs.size(); ++k) {
      pairs.push_back(make_joint_pair(batch.pairs[k], &masks[k], p));
    }
    JointState st;
    const Mat3 m = color_matrix(p);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) st.m(r, c) = m[r][c];
    }
    st.w = p.tone_weights;
    st.a1 = p.shading[1];
    st.a2 = p.shading[2];
    int used = 0;
    st = refine_joint(pairs, st, p.gamma, basis, has_frames, config.max_iterations, config.tolerance, used);
    report.iterations += used;

    const Eigen::Vector3d s = st.m.fullPivLu().solve(Eigen::Vector3d::Ones());
    if (!(s.array() > 0.0).all() || !s.allFinite()) {
      throw DataError("degenerate color data: fitted map has no positive white balance");
    }
    for (int c = 0; c < 3; ++c) {
      p.wb_gains[c] = 1.0 / s(c);
      for (int r = 0; r < 3; ++r) p.ccm[r][c] = st.m(r, c) * s(c);
    }
    p.tone_weights = st.w;
    if (has_frames) p.shading = {1.0, st.a1, st.a2};
    report.rgb_rmse = std::sqrt(evaluate_joint(pairs, st, p.gamma, basis, has_frames, false).cost);
  }

  // A non-default loss refits the tone curve alone under that loss.
  if (config.loss.kind != LossSpec::Kind::l2) {
    p.tone_weights = fit_tone_weights(batch, masks, p, config.loss, basis).weights;
  }
  validate_params(p);

  const LinearColorFit final_fit = fit_linear_color(batch, masks, p);
  report.excluded_fraction = 1.0 - static_cast<double>(final_fit.samples) / static_cast<double>(total_pixels);
  report.linear_color_rmse = linear_color_residual(batch, masks, p);
  report.tone_residual = fit_tone_weights(batch, masks, p, config.loss, basis).residual;
  if (has_frames) report.shading_rmse = fit_shading(batch, masks, p).residual_rmse;
  report.params = p;
  return report;
}

}  // namespace rawkit
