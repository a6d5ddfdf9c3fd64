#include "rawkit/cli.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "rawkit/bench.hpp"
#include "rawkit/dataio.hpp"
#include "rawkit/fit.hpp"
#include "rawkit/reverse.hpp"

namespace rawkit {

namespace {

using nlohmann::ordered_json;

// Problems with the invocation or its configuration files; maps to exit status 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct Globals {
  int threads = 0;
  std::uint64_t seed = 0;
  bool quiet = false;
};

class Log {
 public:
  Log(std::ostream& out, std::ostream& err, const bool& quiet) : out_(out), err_(err), quiet_(quiet) {}

  void event(const std::string& name, ordered_json fields = ordered_json::object()) {
    if (quiet_) return;
    ordered_json j;
    j["event"] = name;
    for (auto& [k, v] : fields.items()) j[k] = v;
    out_ << j.dump() << "\n";
  }
  void text(const std::string& s) {
    if (!quiet_) out_ << s;
  }
  void error(const std::string& s) { err_ << "rawkit: error: " << s << "\n"; }
  void warning(const std::string& s) {
    if (!quiet_) err_ << "rawkit: warning: " << s << "\n";
  }

 private:
  std::ostream& out_;
  std::ostream& err_;
  const bool& quiet_;
};

IspParams load_params_or_usage(const std::string& path) {
  try {
    return load_params(path);
  } catch (const Error& e) {
    throw UsageError("params " + path + ": " + e.what());
  }
}

DatasetManifest load_manifest_or_usage(const std::string& path) {
  try {
    return load_manifest(path);
  } catch (const Error& e) {
    throw UsageError("manifest " + path + ": " + e.what());
  }
}

SensorLevels default_levels(int bit_depth) { return {bit_depth, 0, (1 << bit_depth) - 1}; }

// --- pack -------------------------------------------------------------------

struct PackArgs {
  std::string input;
  std::string pattern = "rggb";
  int crop = kTrack1Crop;
  int bit_depth = 10;
  std::optional<int> black_level;
  std::optional<int> white_level;
  std::string out;
};

ImageU16 read_mosaic(const fs::path& path) {
  if (path.extension() == ".npy") return read_mosaic_npy(path);
  return read_gray_png(path);
}

int cmd_pack(const PackArgs& a, Log& log) {
  if (a.crop <= 0 || a.crop % 2 != 0) throw UsageError("--crop must be a positive even number");
  if (!fs::is_directory(a.input)) throw UsageError("input directory not found: " + a.input);
  const BayerPattern pattern = parse_pattern(a.pattern);
  SensorLevels levels = default_levels(a.bit_depth);
  if (a.black_level) levels.black_level = *a.black_level;
  if (a.white_level) levels.white_level = *a.white_level;
  try {
    validate_levels(levels);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(a.input)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".npy" || ext == ".png")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) log.warning("no .npy or .png mosaics in " + a.input);

  const fs::path out_dir(a.out);
  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.levels = levels;
  std::size_t written = 0;
  for (const auto& file : files) {
    const ImageU16 mosaic = read_mosaic(file);
    const RawImage raw = pack_bayer(mosaic, pattern, levels);
    const auto crops = extract_crops(raw, a.crop);
    if (crops.empty()) log.warning(file.filename().string() + " is smaller than one crop");
    for (std::size_t k = 0; k < crops.size(); ++k) {
      ManifestEntry e;
      e.id = file.stem().string() + "_" + std::to_string(k);
      e.raw_path = "raw/" + e.id + ".npy";
      e.split = Split::train;
      e.frame_offset = std::array<int, 2>{crops[k].x, crops[k].y};
      e.frame_size = std::array<int, 2>{mosaic.width(), mosaic.height()};
      e.pattern = pattern;
      write_array(out_dir / *e.raw_path, crops[k].image.data());
      manifest.entries.push_back(e);
      ++written;
    }
    log.event("packed", {{"file", file.filename().string()}, {"crops", crops.size()}});
  }
  save_manifest(out_dir / "manifest.json", manifest);
  log.event("done", {{"files", written}, {"manifest", (out_dir / "manifest.json").string()}});
  return kExitOk;
}

// --- unprocess --------------------------------------------------------------

struct UnprocessArgs {
  std::string rgb;
  std::string manifest;
  std::string params;
  std::string out;
  bool ensemble = false;
  bool dither = false;
  std::string clip = "clamp";
};

int cmd_unprocess(const UnprocessArgs& a, const Globals& g, Log& log) {
  const IspParams p = load_params_or_usage(a.params);
  ReverseOptions opts;
  opts.output_bit_depth = p.bit_depth;
  opts.clip_policy = a.clip == "mark" ? ClipPolicy::mark : ClipPolicy::clamp;
  opts.dither = a.dither;
  opts.seed = g.seed;
  opts.threads = g.threads;

  ReverseFn reverse;
  if (a.ensemble) {
    reverse = [&](const RgbImage& rgb, const ReverseOptions& o) {
      EnsembleResult r = self_ensemble(rgb, p, o);
      if (!r.notice.empty()) log.warning(r.notice);
      return ReverseResult{std::move(r.raw), std::move(r.mask)};
    };
  }
  DatasetManifest manifest;
  if (!a.manifest.empty()) {
    manifest = load_manifest_or_usage(a.manifest);
  } else {
    const fs::path rgb_path = fs::absolute(a.rgb);
    manifest.root = rgb_path.parent_path();
    ManifestEntry e;
    e.id = rgb_path.stem().string();
    e.rgb_path = rgb_path.filename().string();
    e.split = Split::test1;
    manifest.entries.push_back(e);
  }
  const BatchSummary summary = unprocess_batch(manifest, p, opts, a.out, reverse, [&](const BatchRecord& r) {
    log.text(r.to_json_line() + "\n");
    if (!r.ok) log.error(r.id + ": " + r.error);
  });
  log.event("done", {{"succeeded", summary.succeeded()},
                     {"failed", summary.failed()},
                     {"milliseconds", summary.total_milliseconds},
                     {"ensemble", a.ensemble}});
  return summary.failed() == 0 ? kExitOk : kExitFailure;
}

// --- process / render ---------------------------------------------------------

struct ProcessArgs {
  std::string raw;
  std::string params;
  std::string out;
};

int cmd_process(const ProcessArgs& a, const Globals& g, Log& log) {
  const IspParams p = load_params_or_usage(a.params);
  const RawImage raw = load_raw(a.raw, p.levels());
  ForwardOptions opts;
  opts.threads = g.threads;
  const ForwardResult result = run_forward(raw, p, opts);
  write_rgb_png(a.out, result.rgb);
  log.event("done", {{"output", a.out},
                     {"height", result.rgb.height()},
                     {"width", result.rgb.width()},
                     {"clipped_fraction", result.mask.fraction()}});
  return kExitOk;
}

struct RenderArgs {
  std::string raw;
  std::string out;
  std::string params;
  int bit_depth = 10;
};

int cmd_render(const RenderArgs& a, Log& log) {
  const SensorLevels levels = a.params.empty() ? default_levels(a.bit_depth) : load_params_or_usage(a.params).levels();
  const RawImage raw = load_raw(a.raw, levels);
  const RgbImage rgb = render_quicklook(raw);
  write_rgb_png(a.out, rgb);
  log.event("done", {{"output", a.out}, {"height", rgb.height()}, {"width", rgb.width()}});
  return kExitOk;
}

// --- fit ----------------------------------------------------------------------

struct FitArgs {
  std::string manifest;
  std::string out;
  std::string report;
  std::string loss = "l2";
  double tau = 0.98;
  std::string gamma = "srgb";
  int max_iterations = FitConfig{}.max_iterations;
};

int cmd_fit(const FitArgs& a, Log& log) {
  FitConfig config;
  try {
    config.loss = parse_loss(a.loss);
  } catch (const ParamError& e) {
    throw UsageError(e.what());
  }
  if (!(a.tau > 0.0 && a.tau <= 1.0)) throw UsageError("--tau must lie in (0, 1]");
  config.tau = a.tau;
  config.max_iterations = a.max_iterations;
  if (a.gamma == "srgb") {
    config.gamma = {GammaCurve::Kind::srgb, 2.2};
  } else {
    try {
      std::size_t used = 0;
      const double e = std::stod(a.gamma, &used);
      if (used != a.gamma.size() || !(e > 0.0)) throw std::invalid_argument(a.gamma);
      config.gamma = {GammaCurve::Kind::power, e};
    } catch (const std::exception&) {
      throw UsageError("--gamma must be 'srgb' or a positive exponent");
    }
  }
  const DatasetManifest manifest = load_manifest_or_usage(a.manifest);
  if (!manifest.aligned) {
    throw UsageError("manifest is marked misaligned; pixel-wise fitting requires aligned RGB/RAW pairs");
  }
  PairBatch batch;
  for (const auto& e : manifest.entries) {
    if (!e.rgb_path || !e.raw_path) continue;
    if (e.split != Split::train && e.split != Split::val) continue;
    PairSample s{read_rgb_png(manifest.resolve(*e.rgb_path)), load_raw(manifest.resolve(*e.raw_path), manifest.levels),
                 std::nullopt};
    if (e.frame_offset || e.frame_size) s.frame = e.frame();
    batch.pairs.push_back(std::move(s));
  }
  if (batch.pairs.empty()) throw UsageError("manifest has no train/val entries with both rgb_path and raw_path");
  log.event("fit_start", {{"pairs", batch.pairs.size()}, {"loss", config.loss.to_string()}, {"tau", config.tau}});
  const FitReport report = fit_full(batch, config);
  save_params(a.out, report.params);
  fs::path report_path = a.report;
  if (report_path.empty()) {
    report_path = fs::path(a.out);
    report_path.replace_extension(".report.json");
  }
  write_text(report_path, report.to_json() + "\n");
  log.event("fit_done", {{"params", a.out},
                         {"report", report_path.string()},
                         {"linear_color_rmse", report.linear_color_rmse},
                         {"tone_residual", report.tone_residual},
                         {"shading_rmse", report.shading_rmse ? ordered_json(*report.shading_rmse) : ordered_json()},
                         {"rgb_rmse", report.rgb_rmse},
                         {"iterations", report.iterations},
                         {"excluded_fraction", report.excluded_fraction}});
  return kExitOk;
}

// --- score --------------------------------------------------------------------

struct ScoreArgs {
  std::string pred;
  std::string manifest;
  std::string report;
  std::string format = "csv";
  std::string run = "rawkit";
};

int cmd_score(const ScoreArgs& a, const Globals& g, Log& log) {
  const ReportFormat format = parse_report_format(a.format);
  const DatasetManifest manifest = load_manifest_or_usage(a.manifest);
  ScoreOptions opts;
  opts.run = a.run;
  opts.threads = g.threads;
  const ScoreReport report = score_run(a.pred, manifest, opts);
  write_text(a.report, emit_report(report, format));
  for (const auto& r : report.records) {
    if (!r.ok) log.error(r.id + ": " + r.error);
  }
  ScoreReport summary;
  for (const auto& r : report.records) {
    if (r.ok) summary.records.push_back(r);
  }
  const std::string table = emit_report(summary, ReportFormat::markdown);
  log.text(table.substr(0, table.find("\n\n") == std::string::npos ? table.size() : table.find("\n\n") + 1));
  log.event("done", {{"report", a.report}, {"scored", report.records.size() - report.failures()},
                     {"failed", report.failures()}});
  return report.failures() == 0 ? kExitOk : kExitFailure;
}

// --- synth --------------------------------------------------------------------

struct SynthArgs {
  std::string kind = "mixed";
  int size = 256;
  std::string params;
  int count = 8;
  double noise = 0.0;
  std::string out;
};

int cmd_synth(const SynthArgs& a, const Globals& g, Log& log) {
  const SceneKind kind = parse_scene_kind(a.kind);
  if (a.size < 16 || a.size % 2 != 0) throw UsageError("--size must be an even number >= 16");
  if (a.count < 1) throw UsageError("--count must be positive");
  if (!(a.noise >= 0.0)) throw UsageError("--noise must be nonnegative");
  const IspParams p = a.params.empty() ? random_params(g.seed) : load_params_or_usage(a.params);
  const fs::path out_dir(a.out);
  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.levels = p.levels();
  const int held_out = (a.count + 3) / 4;
  for (int k = 0; k < a.count; ++k) {
    SceneSpec spec;
    spec.kind = kind;
    spec.width = spec.height = a.size;
    spec.seed = mix64(g.seed ^ mix64(static_cast<std::uint64_t>(k) + 1));
    spec.noise_sigma_dn = a.noise;
    const ScenePair scene = generate_scene(spec, p);
    ManifestEntry e;
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04d", k);
    e.id = id;
    e.rgb_path = "rgb/" + e.id + ".png";
    e.raw_path = "raw/" + e.id + ".npy";
    e.split = k >= a.count - held_out ? Split::test1 : Split::train;
    e.frame_offset = std::array<int, 2>{0, 0};
    e.frame_size = std::array<int, 2>{a.size, a.size};
    write_rgb_png(out_dir / *e.rgb_path, scene.rgb);
    write_array(out_dir / *e.raw_path, scene.raw.data());
    manifest.entries.push_back(e);
    log.event("scene", {{"id", e.id}, {"split", std::string(to_string(e.split))}, {"clipped", scene.mask.fraction()}});
  }
  save_manifest(out_dir / "manifest.json", manifest);
  save_params(out_dir / "params_true.json", p);
  log.event("done", {{"scenes", a.count}, {"manifest", (out_dir / "manifest.json").string()}});
  return kExitOk;
}

// --- bench --------------------------------------------------------------------

struct BenchArgs {
  std::string size = "4032x3024";
  int repeats = 5;
  std::string params;
};

int cmd_bench(const BenchArgs& a, const Globals& g, Log& log) {
  int w = 0;
  int h = 0;
  char sep = 0;
  std::istringstream ss(a.size);
  if (!(ss >> w >> sep >> h) || (sep != 'x' && sep != 'X') || !ss.eof() || w <= 0 || h <= 0 || w % 2 || h % 2) {
    throw UsageError("--size must look like WIDTHxHEIGHT with even positive dimensions");
  }
  if (a.repeats < 3) throw UsageError("--repeats must be at least 3");
  const IspParams p = a.params.empty() ? random_params(g.seed) : load_params_or_usage(a.params);
  const TimingResult t = time_pipeline(w, h, p, a.repeats, g.threads);
  log.event("bench", {{"width", w},
                      {"height", h},
                      {"threads", g.threads},
                      {"repeats", a.repeats},
                      {"milliseconds", t.milliseconds},
                      {"median_ms", t.median_ms},
                      {"ms_per_megapixel", t.ms_per_megapixel}});
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Globals g;
  Log log(out, err, g.quiet);
  CLI::App app{"rawkit: invertible camera ISP toolkit", "rawkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", "rawkit 0.1.0");
  app.add_option("--threads", g.threads, "Worker threads (0 = one per core)")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", g.seed, "Seed for synthetic data and dithering");
  app.add_flag("--quiet", g.quiet, "Only print errors");

  const std::vector<std::string> patterns = {"rggb", "bggr", "grbg", "gbrg"};

  PackArgs pack;
  auto* pack_cmd = app.add_subcommand("pack", "Pack Bayer mosaics into cropped 4-channel NPY files");
  pack_cmd->add_option("--input", pack.input, "Directory of mosaic PNG/NPY files")->required();
  pack_cmd->add_option("--pattern", pack.pattern, "Bayer layout of the inputs")->check(CLI::IsMember(patterns));
  pack_cmd->add_option("--crop", pack.crop, "Crop size in mosaic pixels")->check(CLI::PositiveNumber);
  pack_cmd->add_option("--bit-depth", pack.bit_depth, "Sensor bit depth")->check(CLI::IsMember({10, 12, 14}));
  pack_cmd->add_option("--black-level", pack.black_level, "Black level in DN (default 0)");
  pack_cmd->add_option("--white-level", pack.white_level, "White level in DN (default full scale)");
  pack_cmd->add_option("--out", pack.out, "Output directory")->required();

  UnprocessArgs unprocess;
  auto* unprocess_cmd = app.add_subcommand("unprocess", "Reconstruct RAW from RGB");
  auto* rgb_opt = unprocess_cmd->add_option("--rgb", unprocess.rgb, "Single RGB PNG")->check(CLI::ExistingFile);
  auto* manifest_opt =
      unprocess_cmd->add_option("--manifest", unprocess.manifest, "Dataset manifest")->check(CLI::ExistingFile);
  rgb_opt->excludes(manifest_opt);
  unprocess_cmd->add_option("--params", unprocess.params, "Params JSON")->required()->check(CLI::ExistingFile);
  unprocess_cmd->add_option("--out", unprocess.out, "Output directory")->required();
  unprocess_cmd->add_flag("--ensemble", unprocess.ensemble, "Fuse the 8 flipped/rotated reconstructions");
  unprocess_cmd->add_flag("--dither", unprocess.dither, "Dither before quantizing (uses --seed)");
  unprocess_cmd->add_option("--clip", unprocess.clip, "Saturated pixels: clamp to white or mark only")
      ->check(CLI::IsMember({"clamp", "mark"}));

  ProcessArgs process;
  auto* process_cmd = app.add_subcommand("process", "Render a packed RAW through the forward pipeline");
  process_cmd->add_option("--raw", process.raw, "Packed RAW NPY")->required()->check(CLI::ExistingFile);
  process_cmd->add_option("--params", process.params, "Params JSON")->required()->check(CLI::ExistingFile);
  process_cmd->add_option("--out", process.out, "Output PNG")->required();

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "Estimate pipeline parameters from aligned RGB/RAW pairs");
  fit_cmd->add_option("--manifest", fit.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--out", fit.out, "Output params JSON")->required();
  fit_cmd->add_option("--report", fit.report, "Fit report JSON (default: next to --out)");
  fit_cmd->add_option("--loss", fit.loss, "Tone loss: l1, l2 or soft:DELTA");
  fit_cmd->add_option("--tau", fit.tau, "Overexposure threshold");
  fit_cmd->add_option("--gamma", fit.gamma, "Gamma curve: srgb or a power exponent");
  fit_cmd->add_option("--max-iterations", fit.max_iterations, "Joint refinement steps")->check(CLI::PositiveNumber);

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "Score predicted RAWs against a manifest");
  score_cmd->add_option("--pred", score.pred, "Directory of <id>.npy predictions")->required();
  score_cmd->add_option("--manifest", score.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--report", score.report, "Report path")->required();
  score_cmd->add_option("--format", score.format, "Report format")->check(CLI::IsMember({"csv", "markdown", "json"}));
  score_cmd->add_option("--run", score.run, "Run name shown in the report");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic RGB/RAW pairs and a manifest");
  synth_cmd->add_option("--kind", synth.kind, "Scene kind")
      ->check(CLI::IsMember({"gradient", "color_checker", "radial_vignette", "noise_field", "mixed"}));
  synth_cmd->add_option("--size", synth.size, "Square scene size in pixels");
  synth_cmd->add_option("--params", synth.params, "Params JSON (default: random from --seed)")
      ->check(CLI::ExistingFile);
  synth_cmd->add_option("--count", synth.count, "Number of scenes");
  synth_cmd->add_option("--noise", synth.noise, "Gaussian RAW noise sigma in DN");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  RenderArgs render;
  auto* render_cmd = app.add_subcommand("render", "Quick-look preview of a packed RAW");
  render_cmd->add_option("--raw", render.raw, "Packed RAW NPY")->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--out", render.out, "Output PNG")->required();
  render_cmd->add_option("--params", render.params, "Params JSON supplying sensor levels")->check(CLI::ExistingFile);
  render_cmd->add_option("--bit-depth", render.bit_depth, "Bit depth when no params are given")
      ->check(CLI::IsMember({10, 12, 14}));

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time the reverse pipeline");
  bench_cmd->add_option("--size", bench.size, "Image size WIDTHxHEIGHT");
  bench_cmd->add_option("--repeats", bench.repeats, "Timed repeats (>= 3)");
  bench_cmd->add_option("--params", bench.params, "Params JSON (default: random from --seed)")
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
    if (*unprocess_cmd && unprocess.rgb.empty() && unprocess.manifest.empty()) {
      throw CLI::RequiredError("unprocess needs --rgb or --manifest");
    }
    if (*bench_cmd && bench.repeats < 3) throw CLI::ValidationError("--repeats", "must be at least 3");
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*pack_cmd) return cmd_pack(pack, log);
    if (*unprocess_cmd) return cmd_unprocess(unprocess, g, log);
    if (*process_cmd) return cmd_process(process, g, log);
    if (*fit_cmd) return cmd_fit(fit, log);
    if (*score_cmd) return cmd_score(score, g, log);
    if (*synth_cmd) return cmd_synth(synth, g, log);
    if (*render_cmd) return cmd_render(render, log);
    if (*bench_cmd) return cmd_bench(bench, g, log);
  } catch (const DataError& e) {
    log.error(e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    log.error(e.what());
    return kExitUsage;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv = {"rawkit"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace rawkit
