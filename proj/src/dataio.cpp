#include "rawkit/dataio.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "json.hpp"

namespace rawkit {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Crops

namespace {

void check_crop(int crop, int height, int width) {
  if (crop <= 0 || crop % 2 != 0) throw DimensionError("crop size must be positive and even");
  if (crop > height || crop > width) {
    throw DimensionError("crop " + std::to_string(crop) + " larger than image " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
}

template <typename T>
Image<T> copy_region(const Image<T>& src, int y0, int x0, int h, int w) {
  Image<T> out(h, w, src.channels());
  for (int y = 0; y < h; ++y) {
    std::copy_n(src.row(y0 + y) + static_cast<std::size_t>(x0) * src.channels(),
                static_cast<std::size_t>(w) * src.channels(), out.row(y));
  }
  return out;
}

}  // namespace

std::vector<RgbCrop> extract_crops(const RgbImage& full, int crop) {
  check_crop(crop, full.height(), full.width());
  std::vector<RgbCrop> out;
  for (int y = 0; y + crop <= full.height(); y += crop) {
    for (int x = 0; x + crop <= full.width(); x += crop) {
      RgbImage tile = full.is_stored() ? RgbImage::from_u8(copy_region(full.u8(), y, x, crop, crop))
                                       : RgbImage::from_real(copy_region(full.real(), y, x, crop, crop));
      out.push_back({std::move(tile), x, y});
    }
  }
  return out;
}

std::vector<RawCrop> extract_crops(const RawImage& full, int crop) {
  check_crop(crop, full.mosaic_height(), full.mosaic_width());
  const int half = crop / 2;
  std::vector<RawCrop> out;
  for (int i = 0; i + half <= full.packed_height(); i += half) {
    for (int j = 0; j + half <= full.packed_width(); j += half) {
      RawImage tile = RawImage::create(copy_region(full.data(), i, j, half, half), full.levels(),
                                       full.pattern_of_origin());
      out.push_back({std::move(tile), 2 * j, 2 * i});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string_view to_string(SceneKind k) {
  switch (k) {
    case SceneKind::gradient: return "gradient";
    case SceneKind::color_checker: return "color_checker";
    case SceneKind::radial_vignette: return "radial_vignette";
    case SceneKind::noise_field: return "noise_field";
    case SceneKind::mixed: return "mixed";
  }
  return "?";
}

SceneKind parse_scene_kind(std::string_view name) {
  for (auto k : {SceneKind::gradient, SceneKind::color_checker, SceneKind::radial_vignette, SceneKind::noise_field,
                 SceneKind::mixed}) {
    if (to_string(k) == name) return k;
  }
  throw ParamError("unknown scene kind '" + std::string(name) + "'");
}

namespace {

using Rgb = std::array<double, 3>;

// Linear reflectances of a 24-patch chart, row-major 6 x 4, relative to white = 1.
constexpr std::array<Rgb, 24> kChart = {{
    {0.17, 0.09, 0.06}, {0.55, 0.32, 0.23}, {0.12, 0.20, 0.33}, {0.10, 0.15, 0.06}, {0.25, 0.22, 0.43},
    {0.13, 0.51, 0.41}, {0.68, 0.20, 0.03}, {0.07, 0.11, 0.39}, {0.53, 0.08, 0.12}, {0.10, 0.04, 0.14},
    {0.34, 0.50, 0.05}, {0.74, 0.37, 0.02}, {0.03, 0.05, 0.28}, {0.06, 0.29, 0.07}, {0.43, 0.03, 0.04},
    {0.81, 0.59, 0.01}, {0.50, 0.08, 0.29}, {0.02, 0.23, 0.37}, {0.90, 0.90, 0.88}, {0.59, 0.59, 0.59},
    {0.36, 0.36, 0.36}, {0.19, 0.19, 0.19}, {0.09, 0.09, 0.09}, {0.03, 0.03, 0.03},
}};

struct Wave {
  double fy, fx, phase, amp;
};

class SmoothField {
 public:
  SmoothField(std::mt19937_64& rng, int waves) {
    std::uniform_real_distribution<double> freq(0.5, 4.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> amp(0.3, 1.0);
    for (int c = 0; c < 3; ++c) {
      for (int k = 0; k < waves; ++k) waves_[c].push_back({freq(rng), freq(rng), phase(rng), amp(rng)});
    }
  }
  // Value in [0, 1] at normalized coordinates.
  double at(int c, double v, double u) const {
    double acc = 0.0;
    double norm = 0.0;
    for (const auto& w : waves_[c]) {
      acc += w.amp * std::sin(2.0 * std::numbers::pi * (w.fy * v + w.fx * u) + w.phase);
      norm += w.amp;
    }
    return 0.5 + 0.5 * acc / norm;
  }

 private:
  std::array<std::vector<Wave>, 3> waves_;
};

// Linear scene in [0, 1] per channel before the `peak` scale.
ImageF build_scene(const SceneSpec& spec) {
  const int h = spec.height;
  const int w = spec.width;
  ImageF scene(h, w, 3);
  std::mt19937_64 rng(mix64(spec.seed));
  const double floor = 0.04;
  auto put = [&](int y, int x, const Rgb& v) {
    for (int c = 0; c < 3; ++c) scene.at(y, x, c) = floor + (1.0 - floor) * std::clamp(v[c], 0.0, 1.0);
  };
  auto chart_at = [&](int y, int x, int y0, int x0, int ph, int pw) {
    const int row = std::min(3, (y - y0) * 4 / ph);
    const int col = std::min(5, (x - x0) * 6 / pw);
    return kChart[row * 6 + col];
  };

  switch (spec.kind) {
    case SceneKind::gradient:
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double u = w > 1 ? static_cast<double>(x) / (w - 1) : 0.0;
          const double v = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
          put(y, x, {u, 0.5 * (u + v), 0.3 + 0.7 * v * u});
        }
      }
      break;
    case SceneKind::color_checker:
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) put(y, x, chart_at(y, x, 0, 0, h, w));
      }
      break;
    case SceneKind::radial_vignette:
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) put(y, x, {0.62, 0.64, 0.60});
      }
      break;
    case SceneKind::noise_field: {
      const SmoothField field(rng, 4);
      std::uniform_real_distribution<double> jitter(-0.04, 0.04);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double v = static_cast<double>(y) / h;
          const double u = static_cast<double>(x) / w;
          put(y, x, {field.at(0, v, u) + jitter(rng), field.at(1, v, u) + jitter(rng), field.at(2, v, u) + jitter(rng)});
        }
      }
      break;
    }
    case SceneKind::mixed: {
      const SmoothField field(rng, 3);
      std::uniform_real_distribution<double> jitter(-0.03, 0.03);
      const int cy0 = h / 8;
      const int cx0 = w / 8;
      const int ch = h / 2;
      const int cw = w / 2;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double v = static_cast<double>(y) / h;
          const double u = static_cast<double>(x) / w;
          Rgb px;
          if (y >= cy0 && y < cy0 + ch && x >= cx0 && x < cx0 + cw) {
            px = chart_at(y, x, cy0, cx0, ch, cw);
          } else if (y >= h - h / 6) {
            px = {u, 1.0 - u, 0.5 + 0.5 * std::sin(6.0 * u)};
          } else {
            px = {field.at(0, v, u), field.at(1, v, u), field.at(2, v, u)};
          }
          for (auto& c : px) c += jitter(rng);
          put(y, x, px);
        }
      }
      break;
    }
  }
  return scene;
}

}  // namespace

ScenePair generate_scene(const SceneSpec& spec, const IspParams& p) {
  validate_params(p);
  if (spec.width <= 0 || spec.height <= 0 || spec.width % 2 != 0 || spec.height % 2 != 0) {
    throw DimensionError("scene size must be even and positive");
  }
  const ImageF scene = build_scene(spec);
  const bool vignette = spec.vignette || spec.kind == SceneKind::radial_vignette;
  const RadiusField radius(spec.height / 2, spec.width / 2, {});
  const double black = p.black_level;
  const double range = p.white_level - p.black_level;
  const int max_value = (1 << p.bit_depth) - 1;

  // Scene colors are display-linear; the sensor sees them through the inverse color matrix.
  Mat3 to_camera = inverse(p.ccm);
  for (int c = 0; c < 3; ++c) {
    for (int k = 0; k < 3; ++k) to_camera[c][k] /= p.wb_gains[c];
  }
  ImageU16 packed(spec.height / 2, spec.width / 2, 4);
  for (int i = 0; i < packed.height(); ++i) {
    for (int j = 0; j < packed.width(); ++j) {
      const double falloff = vignette ? 1.0 / shading_gain(p.shading, radius.r2(i, j)) : 1.0;
      for (int ch = 0; ch < 4; ++ch) {
        const auto [dy, dx] = channel_site(BayerPattern::rggb, ch);
        const double* s = &scene.at(2 * i + dy, 2 * j + dx, 0);
        const auto& row = to_camera[channel_color(ch)];
        const double camera = std::max(0.0, row[0] * s[0] + row[1] * s[1] + row[2] * s[2]);
        const double v = spec.peak * camera * falloff;
        const double dn = std::round(black + v * range);
        packed.at(i, j, ch) = static_cast<std::uint16_t>(std::clamp(dn, 0.0, static_cast<double>(max_value)));
      }
    }
  }
  RawImage raw = RawImage::create(std::move(packed), p.levels());
  ForwardResult fwd = run_forward(raw, p);

  if (spec.noise_sigma_dn > 0.0) {
    std::mt19937_64 rng(mix64(spec.seed ^ 0x5eedf00dULL));
    std::normal_distribution<double> noise(0.0, spec.noise_sigma_dn);
    ImageU16 noisy = raw.data();
    for (auto& v : noisy.data()) {
      v = static_cast<std::uint16_t>(std::clamp(std::round(v + noise(rng)), 0.0, static_cast<double>(max_value)));
    }
    raw = RawImage::create(std::move(noisy), p.levels());
  }
  return {std::move(raw), std::move(fwd.rgb), std::move(fwd.mask)};
}

IspParams random_params(std::uint64_t seed, SensorLevels levels) {
  validate_levels(levels);
  std::mt19937_64 rng(mix64(seed ^ 0xa5a5a5a5ULL));
  std::uniform_real_distribution<double> gain(1.3, 2.4);
  std::uniform_real_distribution<double> crosstalk(-0.35, -0.02);
  std::gamma_distribution<double> dirichlet(1.0, 1.0);
  std::uniform_real_distribution<double> a1(0.1, 0.45);
  std::uniform_real_distribution<double> a2(0.0, 0.15);

  IspParams p = IspParams::identity(levels);
  p.wb_gains = {gain(rng), 1.0, gain(rng)};
  for (int r = 0; r < 3; ++r) {
    double off_sum = 0.0;
    for (int c = 0; c < 3; ++c) {
      if (c == r) continue;
      p.ccm[r][c] = crosstalk(rng);
      off_sum += p.ccm[r][c];
    }
    p.ccm[r][r] = 1.0 - off_sum;
  }
  double total = 0.0;
  for (auto& w : p.tone_weights) {
    w = dirichlet(rng);
    total += w;
  }
  for (auto& w : p.tone_weights) w /= total;
  p.shading = {1.0, a1(rng), a2(rng)};
  return p;
}

// ---------------------------------------------------------------------------
// Manifests

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test1: return "test1";
    case Split::test2: return "test2";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  for (auto split : {Split::train, Split::val, Split::test1, Split::test2}) {
    if (to_string(split) == s) return split;
  }
  throw SchemaError("unknown split tag '" + std::string(s) + "'");
}

FrameGeometry ManifestEntry::frame() const {
  FrameGeometry g;
  if (frame_offset) {
    g.offset_x = (*frame_offset)[0];
    g.offset_y = (*frame_offset)[1];
  }
  if (frame_size) {
    g.frame_width = (*frame_size)[0];
    g.frame_height = (*frame_size)[1];
  }
  return g;
}

namespace {

void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed, std::string_view where) {
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (auto a : allowed) known = known || a == key;
    if (!known) throw SchemaError("unknown field '" + key + "' in " + std::string(where));
  }
}

const json& require(const json& obj, const char* key, std::string_view where) {
  if (!obj.contains(key)) throw SchemaError("missing required field '" + std::string(key) + "' in " + std::string(where));
  return obj.at(key);
}

std::string require_string(const json& v, std::string_view what) {
  if (!v.is_string()) throw SchemaError(std::string(what) + " must be a string");
  return v.get<std::string>();
}

int require_int(const json& v, std::string_view what) {
  if (!v.is_number_integer()) throw SchemaError(std::string(what) + " must be an integer");
  return v.get<int>();
}

double require_number(const json& v, std::string_view what) {
  if (!v.is_number()) throw SchemaError(std::string(what) + " must be a number");
  return v.get<double>();
}

std::string relative_path(const json& v, std::string_view what) {
  std::string s = require_string(v, what);
  if (s.empty()) throw SchemaError(std::string(what) + " must not be empty");
  if (fs::path(s).is_absolute()) throw SchemaError(std::string(what) + " must be relative to the manifest root: " + s);
  return s;
}

std::array<int, 2> int_pair(const json& v, std::string_view what) {
  if (!v.is_array() || v.size() != 2) throw SchemaError(std::string(what) + " must be a [x, y] pair");
  std::array<int, 2> out{require_int(v[0], what), require_int(v[1], what)};
  if (out[0] < 0 || out[1] < 0) throw SchemaError(std::string(what) + " must be nonnegative");
  return out;
}

}  // namespace

DatasetManifest parse_manifest(std::string_view text, const fs::path& root) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw SchemaError("manifest must be a JSON object");
  reject_unknown(doc, {"schema", "root", "levels", "aligned", "entries"}, "manifest");
  if (require_string(require(doc, "schema", "manifest"), "schema") != kManifestSchema) {
    throw SchemaError("manifest schema must be '" + std::string(kManifestSchema) + "'");
  }
  DatasetManifest m;
  m.root = root;
  if (doc.contains("root")) m.root = (root / relative_path(doc["root"], "root")).lexically_normal();
  if (doc.contains("levels")) {
    const json& lv = doc["levels"];
    if (!lv.is_object()) throw SchemaError("levels must be an object");
    reject_unknown(lv, {"bit_depth", "black_level", "white_level"}, "levels");
    m.levels.bit_depth = require_int(require(lv, "bit_depth", "levels"), "bit_depth");
    m.levels.black_level = require_int(require(lv, "black_level", "levels"), "black_level");
    m.levels.white_level = require_int(require(lv, "white_level", "levels"), "white_level");
    try {
      validate_levels(m.levels);
    } catch (const ParamError& e) {
      throw SchemaError(std::string("levels: ") + e.what());
    }
  }
  if (doc.contains("aligned")) {
    if (!doc["aligned"].is_boolean()) throw SchemaError("aligned must be a boolean");
    m.aligned = doc["aligned"].get<bool>();
  }
  const json& entries = require(doc, "entries", "manifest");
  if (!entries.is_array()) throw SchemaError("entries must be an array");
  std::set<std::string> ids;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const json& e = entries[k];
    const std::string where = "entries[" + std::to_string(k) + "]";
    if (!e.is_object()) throw SchemaError(where + " must be an object");
    reject_unknown(e, {"id", "rgb_path", "raw_path", "split", "frame_offset", "frame_size", "pattern"}, where);
    ManifestEntry entry;
    if (e.contains("rgb_path")) entry.rgb_path = relative_path(e["rgb_path"], where + ".rgb_path");
    if (e.contains("raw_path")) entry.raw_path = relative_path(e["raw_path"], where + ".raw_path");
    if (!entry.rgb_path && !entry.raw_path) throw SchemaError(where + " needs rgb_path or raw_path");
    entry.split = parse_split(require_string(require(e, "split", where), where + ".split"));
    if (e.contains("id")) {
      entry.id = require_string(e["id"], where + ".id");
    } else {
      entry.id = fs::path(entry.rgb_path ? *entry.rgb_path : *entry.raw_path).stem().string();
    }
    if (entry.id.empty()) throw SchemaError(where + ".id must not be empty");
    if (!ids.insert(entry.id).second) throw SchemaError("duplicate entry id '" + entry.id + "'");
    if (e.contains("frame_offset")) entry.frame_offset = int_pair(e["frame_offset"], where + ".frame_offset");
    if (e.contains("frame_size")) entry.frame_size = int_pair(e["frame_size"], where + ".frame_size");
    if (e.contains("pattern")) {
      try {
        entry.pattern = parse_pattern(require_string(e["pattern"], where + ".pattern"));
      } catch (const ParamError& err) {
        throw SchemaError(where + ": " + err.what());
      }
    }
    m.entries.push_back(std::move(entry));
  }
  return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json doc;
  doc["schema"] = kManifestSchema;
  doc["levels"] = {{"bit_depth", m.levels.bit_depth},
                   {"black_level", m.levels.black_level},
                   {"white_level", m.levels.white_level}};
  doc["aligned"] = m.aligned;
  json entries = json::array();
  for (const auto& e : m.entries) {
    json j;
    j["id"] = e.id;
    if (e.rgb_path) j["rgb_path"] = *e.rgb_path;
    if (e.raw_path) j["raw_path"] = *e.raw_path;
    j["split"] = to_string(e.split);
    if (e.frame_offset) j["frame_offset"] = *e.frame_offset;
    if (e.frame_size) j["frame_size"] = *e.frame_size;
    j["pattern"] = to_string(e.pattern);
    entries.push_back(std::move(j));
  }
  doc["entries"] = std::move(entries);
  return doc.dump(2) + "\n";
}

DatasetManifest load_manifest(const fs::path& path) {
  const fs::path dir = fs::absolute(path).parent_path();
  return parse_manifest(read_text(path), dir.lexically_normal());
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
  const fs::path dir = fs::absolute(path).parent_path().lexically_normal();
  json doc = json::parse(manifest_to_json(m));
  const fs::path root = m.root.empty() ? dir : fs::absolute(m.root).lexically_normal();
  const fs::path rel = root.lexically_relative(dir);
  if (!rel.empty() && rel != ".") doc["root"] = rel.generic_string();
  write_text(path, doc.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Params

IspParams parse_params(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("params are not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw SchemaError("params must be a JSON object");
  reject_unknown(doc,
                 {"schema", "black_level", "white_level", "bit_depth", "wb_gains", "ccm", "tone_weights", "gamma",
                  "shading"},
                 "params");
  if (require_string(require(doc, "schema", "params"), "schema") != kParamsSchema) {
    throw SchemaError("params schema must be '" + std::string(kParamsSchema) + "'");
  }
  IspParams p;
  p.black_level = require_int(require(doc, "black_level", "params"), "black_level");
  p.white_level = require_int(require(doc, "white_level", "params"), "white_level");
  p.bit_depth = require_int(require(doc, "bit_depth", "params"), "bit_depth");
  auto numbers = [&](const char* key, std::size_t n) {
    const json& v = require(doc, key, "params");
    if (!v.is_array() || (n != 0 && v.size() != n)) {
      throw SchemaError(std::string(key) + " must be an array of " + std::to_string(n) + " numbers");
    }
    std::vector<double> out;
    for (const auto& x : v) out.push_back(require_number(x, key));
    return out;
  };
  const auto gains = numbers("wb_gains", 3);
  std::copy(gains.begin(), gains.end(), p.wb_gains.begin());
  const json& ccm = require(doc, "ccm", "params");
  if (!ccm.is_array() || ccm.size() != 3) throw SchemaError("ccm must be a 3x3 array");
  for (int r = 0; r < 3; ++r) {
    if (!ccm[r].is_array() || ccm[r].size() != 3) throw SchemaError("ccm must be a 3x3 array");
    for (int c = 0; c < 3; ++c) p.ccm[r][c] = require_number(ccm[r][c], "ccm");
  }
  p.tone_weights = numbers("tone_weights", 0);
  const json& gamma = require(doc, "gamma", "params");
  if (!gamma.is_object()) throw SchemaError("gamma must be an object");
  reject_unknown(gamma, {"kind", "exponent"}, "gamma");
  const std::string kind = require_string(require(gamma, "kind", "gamma"), "gamma.kind");
  if (kind == "srgb") {
    p.gamma = {GammaCurve::Kind::srgb, 2.2};
    if (gamma.contains("exponent")) throw SchemaError("gamma.exponent only applies to kind 'power'");
  } else if (kind == "power") {
    p.gamma = {GammaCurve::Kind::power, require_number(require(gamma, "exponent", "gamma"), "gamma.exponent")};
  } else {
    throw SchemaError("gamma.kind must be 'srgb' or 'power'");
  }
  const auto shading = numbers("shading", 3);
  std::copy(shading.begin(), shading.end(), p.shading.begin());
  validate_params(p);
  return p;
}

std::string params_to_json(const IspParams& p) {
  json doc;
  doc["schema"] = kParamsSchema;
  doc["black_level"] = p.black_level;
  doc["white_level"] = p.white_level;
  doc["bit_depth"] = p.bit_depth;
  doc["wb_gains"] = p.wb_gains;
  doc["ccm"] = p.ccm;
  doc["tone_weights"] = p.tone_weights;
  if (p.gamma.kind == GammaCurve::Kind::srgb) {
    doc["gamma"] = {{"kind", "srgb"}};
  } else {
    doc["gamma"] = {{"kind", "power"}, {"exponent", p.gamma.exponent}};
  }
  doc["shading"] = p.shading;
  return doc.dump(2) + "\n";
}

IspParams load_params(const fs::path& path) { return parse_params(read_text(path)); }

void save_params(const fs::path& path, const IspParams& p) { write_text(path, params_to_json(p)); }

}  // namespace rawkit
