#include "rawkit/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"

#include "rawkit/fit.hpp"
#include "rawkit/parallel.hpp"

namespace rawkit {

namespace {

using nlohmann::ordered_json;

// Exactly rounded floating-point sum (Shewchuk partials, as in Python's math.fsum).
class ExactSum {
 public:
  void add(double x) {
    std::size_t used = 0;
    for (double y : partials_) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[used++] = lo;
      x = hi;
    }
    partials_.resize(used);
    partials_.push_back(x);
  }

  double value() const {
    std::size_t n = partials_.size();
    if (n == 0) return 0.0;
    double hi = partials_[--n];
    double lo = 0.0;
    while (n > 0) {
      const double x = hi;
      const double y = partials_[--n];
      hi = x + y;
      lo = y - (hi - x);
      if (lo != 0.0) break;
    }
    // Round half-even across the remaining partials.
    if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) || (lo > 0.0 && partials_[n - 1] > 0.0))) {
      const double y = lo * 2.0;
      const double x = hi + y;
      if (y == x - hi) hi = x;
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
};

inline int reflect101(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

std::array<double, kSsimWindow> gaussian_taps() {
  std::array<double, kSsimWindow> taps{};
  const int r = kSsimWindow / 2;
  double total = 0.0;
  for (int k = -r; k <= r; ++k) {
    taps[k + r] = std::exp(-(k * k) / (2.0 * kSsimSigma * kSsimSigma));
    total += taps[k + r];
  }
  for (double& t : taps) t /= total;
  return taps;
}

// Separable Gaussian blur of an (h, w) plane with reflect-101 borders.
std::vector<double> blur(const std::vector<double>& plane, int h, int w) {
  static const auto taps = gaussian_taps();
  const int r = kSsimWindow / 2;
  std::vector<double> tmp(plane.size());
  std::vector<double> out(plane.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) s += taps[k + r] * plane[static_cast<std::size_t>(y) * w + reflect101(x + k, w)];
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) s += taps[k + r] * tmp[static_cast<std::size_t>(reflect101(y + k, h)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  return out;
}

RgbImage transform_rgb(const RgbImage& rgb, Dihedral t) {
  if (rgb.is_stored()) return RgbImage::from_u8(transform_image(rgb.u8(), t));
  return RgbImage::from_real(transform_image(rgb.real(), t));
}

std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(digits);
  ss << v;
  return ss.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw SchemaError("report CSV: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

double parse_number(const std::string& s, const char* what) {
  if (s.empty()) return 0.0;
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw SchemaError(std::string("report: bad ") + what + " value '" + s + "'");
  }
  return v;
}

constexpr std::array<const char*, 9> kCsvColumns = {"run", "split", "psnr_db", "ssim", "id",
                                                    "masked_psnr_db", "milliseconds", "status", "error"};

ordered_json record_json(const ScoreRecord& r) {
  ordered_json j;
  j["run"] = r.run;
  j["id"] = r.id;
  j["split"] = std::string(to_string(r.split));
  j["status"] = r.ok ? "ok" : "error";
  j["psnr_db"] = r.ok ? ordered_json(r.psnr_db) : ordered_json();
  j["ssim"] = r.ok ? ordered_json(r.ssim) : ordered_json();
  j["masked_psnr_db"] = r.ok ? ordered_json(r.masked_psnr_db) : ordered_json();
  j["milliseconds"] = r.milliseconds;
  if (!r.ok) j["error"] = r.error;
  return j;
}

}  // namespace

double psnr(const ImageF& pred, const ImageF& gt, const ClipMask* mask) {
  if (!pred.same_shape(gt)) throw DimensionError("psnr needs images of equal shape");
  if (mask != nullptr) check_mask_shape(*mask, pred.height(), pred.width(), pred.channels());
  ExactSum sum;
  std::size_t n = 0;
  for (int y = 0; y < pred.height(); ++y) {
    for (int x = 0; x < pred.width(); ++x) {
      for (int c = 0; c < pred.channels(); ++c) {
        if (mask != nullptr && sample_masked(*mask, pred.height(), y, x, c)) continue;
        const double d = pred.at(y, x, c) - gt.at(y, x, c);
        sum.add(d * d);
        ++n;
      }
    }
  }
  if (n == 0) throw DataError("no valid pixels");
  const double mse = sum.value() / static_cast<double>(n);
  if (mse <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, -10.0 * std::log10(mse));
}

double ssim(const ImageF& pred, const ImageF& gt) {
  if (!pred.same_shape(gt)) throw DimensionError("ssim needs images of equal shape");
  const int h = pred.height();
  const int w = pred.width();
  if (h < kSsimWindow || w < kSsimWindow) {
    throw DimensionError("ssim needs images of at least " + std::to_string(kSsimWindow) + "x" +
                         std::to_string(kSsimWindow));
  }
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  double total = 0.0;
  for (int c = 0; c < pred.channels(); ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t k = 0; k < n; ++k) {
      x[k] = pred.data()[k * pred.channels() + c];
      y[k] = gt.data()[k * gt.channels() + c];
      xx[k] = x[k] * x[k];
      yy[k] = y[k] * y[k];
      xy[k] = x[k] * y[k];
    }
    const auto mx = blur(x, h, w);
    const auto my = blur(y, h, w);
    const auto sxx = blur(xx, h, w);
    const auto syy = blur(yy, h, w);
    const auto sxy = blur(xy, h, w);
    double channel_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double vx = sxx[k] - mx[k] * mx[k];
      const double vy = syy[k] - my[k] * my[k];
      const double cov = sxy[k] - mx[k] * my[k];
      channel_sum += ((2.0 * mx[k] * my[k] + c1) * (2.0 * cov + c2)) /
                     ((mx[k] * mx[k] + my[k] * my[k] + c1) * (vx + vy + c2));
    }
    total += channel_sum / static_cast<double>(n);
  }
  return total / pred.channels();
}

ImageF normalized_raw(const ImageU16& packed, const SensorLevels& levels) {
  validate_levels(levels);
  ImageF out(packed.height(), packed.width(), packed.channels());
  const double range = levels.white_level - levels.black_level;
  for (std::size_t k = 0; k < packed.size(); ++k) {
    out.data()[k] = std::clamp((packed.data()[k] - levels.black_level) / range, 0.0, 1.0);
  }
  return out;
}

FrameGeometry transform_frame(const FrameGeometry& frame, Dihedral t, int height, int width) {
  if (frame.is_full_frame()) return frame;
  const bool swap = swaps_axes(t);
  const int out_h = swap ? frame.frame_width : frame.frame_height;
  const int out_w = swap ? frame.frame_height : frame.frame_width;
  // Forward point map of t on the frame grid.
  const DihedralMap back{inverse(t), out_h, out_w};
  const auto a = back.source(frame.offset_y, frame.offset_x);
  const auto b = back.source(frame.offset_y + height - 1, frame.offset_x + width - 1);
  FrameGeometry out;
  out.offset_y = std::min(a[0], b[0]);
  out.offset_x = std::min(a[1], b[1]);
  out.frame_height = out_h;
  out.frame_width = out_w;
  return out;
}

EnsembleResult self_ensemble(const RgbImage& rgb, const IspParams& p, const ReverseOptions& opts,
                             std::span<const Dihedral> transforms) {
  if (transforms.empty()) throw ParamError("self-ensemble needs at least one transform");
  const int h = rgb.height();
  const int w = rgb.width();
  EnsembleResult result;
  for (Dihedral t : transforms) {
    if (h != w && swaps_axes(t)) continue;
    result.transforms.push_back(t);
  }
  if (result.transforms.size() != transforms.size()) {
    result.notice = "non-square input " + std::to_string(h) + "x" + std::to_string(w) +
                    ": rotations dropped, ensembling " + std::to_string(result.transforms.size()) + " flips";
  }
  if (result.transforms.empty()) throw ParamError("no usable transforms for a non-square input");

  ImageF sum;
  result.mask = ClipMask(h, w);
  for (Dihedral t : result.transforms) {
    ReverseOptions view = opts;
    view.cfa = transform_pattern(opts.cfa, t);
    view.frame = transform_frame(opts.frame, t, h, w);
    const ReverseLinear lin = reverse_linear(transform_rgb(rgb, t), p, view);
    const ImageF mosaic = transform_image(unpack_mosaic(lin.packed, view.cfa), inverse(t));
    const ImageF packed = pack_mosaic(mosaic, opts.cfa);
    if (sum.empty()) {
      sum = packed;
    } else {
      for (std::size_t k = 0; k < sum.size(); ++k) sum.data()[k] += packed.data()[k];
    }
    const ImageU8 bits = transform_image(lin.mask.bits(), inverse(t));
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (bits.at(y, x)) result.mask.set(y, x);
      }
    }
  }
  const double scale = 1.0 / static_cast<double>(result.transforms.size());
  for (double& v : sum.data()) v *= scale;
  result.raw = quantize_raw(sum, p, opts);
  return result;
}

std::vector<ScoreAggregate> ScoreReport::aggregates() const {
  std::vector<ScoreAggregate> out;
  std::map<std::pair<std::string, Split>, std::size_t> index;
  std::vector<std::array<double, 3>> sums;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.run, r.split);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      out.push_back({r.run, r.split, 0.0, 0.0, 0.0, 0});
      sums.push_back({0.0, 0.0, 0.0});
    }
    if (!r.ok) continue;
    auto& s = sums[it->second];
    s[0] += r.psnr_db;
    s[1] += r.ssim;
    s[2] += r.masked_psnr_db;
    ++out[it->second].count;
  }
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (out[k].count == 0) continue;
    const double n = static_cast<double>(out[k].count);
    out[k].mean_psnr_db = sums[k][0] / n;
    out[k].mean_ssim = sums[k][1] / n;
    out[k].mean_masked_psnr_db = sums[k][2] / n;
  }
  return out;
}

std::size_t ScoreReport::failures() const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const auto& r) { return !r.ok; }));
}

ScoreReport score_run(const fs::path& pred_dir, const DatasetManifest& manifest, const ScoreOptions& opts) {
  std::vector<const ManifestEntry*> entries;
  for (const auto& e : manifest.entries) {
    if (e.raw_path) entries.push_back(&e);
  }
  std::sort(entries.begin(), entries.end(), [](const auto* a, const auto* b) { return a->id < b->id; });

  ScoreReport report;
  report.records.resize(entries.size());
  parallel_rows(static_cast<int>(entries.size()), opts.threads, [&](int begin, int end) {
    for (int k = begin; k < end; ++k) {
      const ManifestEntry& e = *entries[k];
      ScoreRecord& rec = report.records[k];
      rec.run = opts.run;
      rec.id = e.id;
      rec.split = e.split;
      const auto start = std::chrono::steady_clock::now();
      try {
        const fs::path pred_path = pred_dir / (e.id + ".npy");
        if (!fs::exists(pred_path)) throw Error("missing prediction " + pred_path.string());
        const RawImage gt = load_raw(manifest.resolve(*e.raw_path), manifest.levels);
        const ImageU16 pred = read_array(pred_path);
        if (!pred.same_shape(gt.data())) {
          throw DimensionError("prediction shape " + std::to_string(pred.height()) + "x" +
                               std::to_string(pred.width()) + " does not match ground truth " +
                               std::to_string(gt.packed_height()) + "x" + std::to_string(gt.packed_width()));
        }
        const ImageF pn = normalized_raw(pred, manifest.levels);
        const ImageF gn = normalized_raw(gt.data(), manifest.levels);
        rec.psnr_db = psnr(pn, gn);
        rec.ssim = ssim(pn, gn);
        rec.masked_psnr_db = rec.psnr_db;
        if (e.rgb_path) {
          const ClipMask mask = overexposure_mask(read_rgb_png(manifest.resolve(*e.rgb_path)), opts.tau);
          rec.masked_psnr_db = mask.count() == mask.bits().size() ? rec.psnr_db : psnr(pn, gn, &mask);
        }
        rec.ok = true;
      } catch (const std::exception& ex) {
        rec.ok = false;
        rec.psnr_db = rec.ssim = rec.masked_psnr_db = 0.0;
        rec.error = ex.what();
      }
      rec.milliseconds = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
  });
  return report;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "markdown" || name == "md") return ReportFormat::markdown;
  if (name == "json") return ReportFormat::json;
  throw ParamError("unknown report format '" + std::string(name) + "' (expected csv, markdown or json)");
}

std::string emit_report(const ScoreReport& report, ReportFormat format) {
  std::string out;
  switch (format) {
    case ReportFormat::csv: {
      for (std::size_t k = 0; k < kCsvColumns.size(); ++k) out += (k ? "," : "") + std::string(kCsvColumns[k]);
      out += "\n";
      for (const auto& r : report.records) {
        const auto metric = [&](double v) { return r.ok ? shortest(v) : std::string(); };
        out += csv_field(r.run) + "," + std::string(to_string(r.split)) + "," + metric(r.psnr_db) + "," +
               metric(r.ssim) + "," + csv_field(r.id) + "," + metric(r.masked_psnr_db) + "," +
               shortest(r.milliseconds) + "," + (r.ok ? "ok" : "error") + "," + csv_field(r.error) + "\n";
      }
      return out;
    }
    case ReportFormat::markdown: {
      out += "| Run | Split | PSNR (dB) | SSIM | Masked PSNR (dB) | Images |\n";
      out += "|---|---|---:|---:|---:|---:|\n";
      for (const auto& a : report.aggregates()) {
        out += "| " + a.run + " | " + std::string(to_string(a.split)) + " | " + fixed(a.mean_psnr_db, 2) + " | " +
               fixed(a.mean_ssim, 4) + " | " + fixed(a.mean_masked_psnr_db, 2) + " | " + std::to_string(a.count) +
               " |\n";
      }
      if (!report.records.empty()) {
        out += "\n| Run | Split | Image | PSNR (dB) | SSIM | Masked PSNR (dB) | ms | Status |\n";
        out += "|---|---|---|---:|---:|---:|---:|---|\n";
        for (const auto& r : report.records) {
          const auto metric = [&](double v, int d) { return r.ok ? fixed(v, d) : std::string("-"); };
          out += "| " + r.run + " | " + std::string(to_string(r.split)) + " | " + r.id + " | " + metric(r.psnr_db, 2) +
                 " | " + metric(r.ssim, 4) + " | " + metric(r.masked_psnr_db, 2) + " | " + fixed(r.milliseconds, 1) +
                 " | " + (r.ok ? std::string("ok") : "error: " + r.error) + " |\n";
        }
      }
      return out;
    }
    case ReportFormat::json: {
      ordered_json j;
      j["schema"] = "rawkit-score-v1";
      j["records"] = ordered_json::array();
      for (const auto& r : report.records) j["records"].push_back(record_json(r));
      j["aggregates"] = ordered_json::array();
      for (const auto& a : report.aggregates()) {
        j["aggregates"].push_back({{"run", a.run},
                                   {"split", std::string(to_string(a.split))},
                                   {"mean_psnr_db", a.mean_psnr_db},
                                   {"mean_ssim", a.mean_ssim},
                                   {"mean_masked_psnr_db", a.mean_masked_psnr_db},
                                   {"count", a.count}});
      }
      return j.dump(2) + "\n";
    }
  }
  return out;
}

ScoreReport load_report_csv(std::string_view text) {
  const auto rows = parse_csv(text);
  if (rows.empty()) throw SchemaError("report CSV: missing header");
  const auto& header = rows.front();
  if (header.size() != kCsvColumns.size() || !std::equal(header.begin(), header.end(), kCsvColumns.begin())) {
    throw SchemaError("report CSV: unexpected header");
  }
  ScoreReport report;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& row = rows[k];
    if (row.size() != kCsvColumns.size()) {
      throw SchemaError("report CSV: row " + std::to_string(k) + " has " + std::to_string(row.size()) + " fields");
    }
    ScoreRecord r;
    r.run = row[0];
    r.split = parse_split(row[1]);
    r.psnr_db = parse_number(row[2], "psnr_db");
    r.ssim = parse_number(row[3], "ssim");
    r.id = row[4];
    r.masked_psnr_db = parse_number(row[5], "masked_psnr_db");
    r.milliseconds = parse_number(row[6], "milliseconds");
    if (row[7] != "ok" && row[7] != "error") throw SchemaError("report CSV: bad status '" + row[7] + "'");
    r.ok = row[7] == "ok";
    r.error = row[8];
    report.records.push_back(std::move(r));
  }
  return report;
}

ScoreReport load_report_json(std::string_view text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const ordered_json::parse_error& e) {
    throw SchemaError(std::string("report JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("schema", "") != "rawkit-score-v1" || !j.contains("records") ||
      !j["records"].is_array()) {
    throw SchemaError("report JSON: expected a rawkit-score-v1 document with records");
  }
  ScoreReport report;
  try {
    for (const auto& e : j["records"]) {
      ScoreRecord r;
      r.run = e.at("run").get<std::string>();
      r.id = e.at("id").get<std::string>();
      r.split = parse_split(e.at("split").get<std::string>());
      const std::string status = e.at("status").get<std::string>();
      if (status != "ok" && status != "error") throw SchemaError("report JSON: bad status '" + status + "'");
      r.ok = status == "ok";
      const auto num = [&](const char* key) { return e.at(key).is_null() ? 0.0 : e.at(key).get<double>(); };
      r.psnr_db = num("psnr_db");
      r.ssim = num("ssim");
      r.masked_psnr_db = num("masked_psnr_db");
      r.milliseconds = num("milliseconds");
      if (!r.ok) r.error = e.value("error", "");
      report.records.push_back(std::move(r));
    }
  } catch (const ordered_json::exception& e) {
    throw SchemaError(std::string("report JSON: ") + e.what());
  }
  if (j.contains("aggregates")) {
    const auto expected = report.aggregates();
    const auto& given = j["aggregates"];
    if (!given.is_array() || given.size() != expected.size()) {
      throw SchemaError("report JSON: aggregates do not match records");
    }
    for (std::size_t k = 0; k < expected.size(); ++k) {
      const double d = std::abs(given[k].value("mean_psnr_db", 0.0) - expected[k].mean_psnr_db) +
                       std::abs(given[k].value("mean_ssim", 0.0) - expected[k].mean_ssim);
      if (d > 1e-9 || given[k].value("count", std::size_t{0}) != expected[k].count) {
        throw SchemaError("report JSON: aggregates do not match records");
      }
    }
  }
  return report;
}

TimingResult time_pipeline(int width, int height, const IspParams& p, int repeats, int threads) {
  if (repeats < 3) throw ParamError("timing needs at least 3 repeats");
  if (width <= 0 || height <= 0 || width % 2 != 0 || height % 2 != 0) {
    throw DimensionError("timing image size must be even and positive");
  }
  ImageU8 img(height, width, 3);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::uint64_t noise = mix64(static_cast<std::uint64_t>(y) * width + x);
      img.at(y, x, 0) = static_cast<std::uint8_t>((x * 255 / width + (noise & 7)) & 0xFF);
      img.at(y, x, 1) = static_cast<std::uint8_t>((y * 255 / height + ((noise >> 8) & 7)) & 0xFF);
      img.at(y, x, 2) = static_cast<std::uint8_t>(((x + y) * 127 / (width + height) + ((noise >> 16) & 7)) & 0xFF);
    }
  }
  const RgbImage rgb = RgbImage::from_u8(std::move(img));
  ReverseOptions opts;
  opts.output_bit_depth = p.bit_depth;
  opts.threads = threads;
  run_reverse(rgb, p, opts);  // warm-up
  TimingResult result;
  for (int r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    const ReverseResult out = run_reverse(rgb, p, opts);
    result.milliseconds.push_back(
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  }
  std::vector<double> sorted = result.milliseconds;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  result.median_ms = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  result.ms_per_megapixel = result.median_ms / (static_cast<double>(width) * height / 1e6);
  return result;
}

}  // namespace rawkit
