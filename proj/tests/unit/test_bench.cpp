#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "rawkit/bench.hpp"
#include "rawkit/fit.hpp"

using namespace rawkit;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("rawkit_test_bench_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

ImageF with_noise(const ImageF& img, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, sigma);
  ImageF out = img;
  for (auto& v : out.storage()) v = std::clamp(v + g(rng), 0.0, 1.0);
  return out;
}

// Dataset of `count` synthetic scenes: RAW truth on disk plus the RGB renderings.
DatasetManifest write_dataset(const fs::path& root, const IspParams& p, int count, Split split = Split::test1) {
  DatasetManifest m;
  m.root = root;
  m.levels = p.levels();
  for (int k = 0; k < count; ++k) {
    SceneSpec spec;
    spec.width = spec.height = 64;
    spec.seed = 50 + k;
    const ScenePair s = generate_scene(spec, p);
    ManifestEntry e;
    e.id = "s" + std::to_string(k);
    e.split = split;
    e.raw_path = e.id + "_raw.npy";
    e.rgb_path = e.id + ".png";
    write_array(root / *e.raw_path, s.raw.data());
    write_rgb_png(root / *e.rgb_path, s.rgb);
    m.entries.push_back(e);
  }
  return m;
}

}  // namespace

TEST_CASE("psnr examples") {
  const ImageF a(8, 8, 3, 0.25);
  CHECK(psnr(a, a) == 100.0);
  CHECK(psnr(ImageF(4, 4, 1, 0.0), ImageF(4, 4, 1, 1.0)) == doctest::Approx(0.0));
  CHECK(psnr(ImageF(4, 4, 1, 0.0), ImageF(4, 4, 1, 0.1)) == doctest::Approx(20.0));
  CHECK_THROWS_AS(psnr(ImageF(4, 4, 1), ImageF(4, 5, 1)), DimensionError);

  ImageF b = a;
  b.at(0, 0, 0) = 1.0;
  ClipMask m(8, 8);
  m.set(0, 0);
  CHECK(psnr(b, a, &m) == 100.0);
  CHECK(psnr(b, a) < 100.0);
}

TEST_CASE("ssim examples") {
  std::mt19937_64 rng(1);
  const ImageF a = oracle::random_unit(rng, 32, 32, 3);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  const ImageF noisy = with_noise(a, 0.05, rng);
  CHECK(ssim(noisy, a) < 1.0);
  CHECK(1.0 - ssim(noisy, a) > 0.0);

  ImageF shifted = a;
  for (auto& v : shifted.storage()) v = std::min(1.0, v + 0.1);
  CHECK(ssim(shifted, a) == doctest::Approx(oracle::ssim(shifted, a)).epsilon(1e-4));
  CHECK(ssim(ImageF(16, 16, 1, 0.5), ImageF(16, 16, 1, 0.5)) == doctest::Approx(1.0));
}

TEST_CASE("metrics agree with the direct oracles") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> s(0.0, 0.2);
  for (int trial = 0; trial < 50; ++trial) {
    const ImageF gt = oracle::random_unit(rng, 64, 64, trial % 2 ? 3 : 4);
    const ImageF pred = with_noise(gt, s(rng), rng);
    CHECK(std::abs(psnr(pred, gt) - oracle::psnr(pred, gt)) <= 1e-9);
    CHECK(std::abs(ssim(pred, gt) - oracle::ssim(pred, gt)) <= 1e-4);
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(3);
  const ImageF gt = oracle::random_unit(rng, 40, 40, 3);
  const ImageF x = with_noise(gt, 0.05, rng);
  CHECK(psnr(x, gt) == psnr(gt, x));
  CHECK(ssim(x, gt) == doctest::Approx(ssim(gt, x)).epsilon(1e-12));

  double last_p = 101.0, last_s = 2.0;
  for (double sigma : {0.0, 0.01, 0.03, 0.1, 0.3}) {
    std::mt19937_64 r(7);
    const ImageF y = with_noise(gt, sigma, r);
    const double p = psnr(y, gt), q = ssim(y, gt);
    CHECK(p < last_p);
    CHECK(q < last_s);
    last_p = p;
    last_s = q;
  }

  for (Dihedral t : kAllDihedral) {
    CAPTURE(to_string(t));
    const ImageF tx = oracle::dihedral(x, t), tg = oracle::dihedral(gt, t);
    CHECK(psnr(tx, tg) == doctest::Approx(psnr(x, gt)).epsilon(1e-12));
    CHECK(ssim(tx, tg) == doctest::Approx(ssim(x, gt)).epsilon(1e-9));
  }
}

TEST_CASE("self-ensemble") {
  const IspParams p = random_params(4);
  std::mt19937_64 rng(4);
  const RgbImage rgb = RgbImage::from_u8(oracle::random_u8(rng, 32, 32, 3));
  const ReverseResult single = run_reverse(rgb, p);

  SUBCASE("identity only is plain reverse") {
    const std::array<Dihedral, 1> only{Dihedral::identity};
    const EnsembleResult e = self_ensemble(rgb, p, {}, only);
    CHECK(e.raw == single.raw);
    CHECK(e.mask == single.mask);
    CHECK(e.notice.empty());
  }
  SUBCASE("all eight views stay within one level") {
    const EnsembleResult e = self_ensemble(rgb, p);
    CHECK(e.transforms.size() == 8);
    for (std::size_t k = 0; k < e.raw.data().size(); ++k) {
      CHECK(std::abs(e.raw.data().storage()[k] - single.raw.data().storage()[k]) <= 1);
    }
  }
  SUBCASE("non-square keeps the flips") {
    const RgbImage wide = RgbImage::from_u8(oracle::random_u8(rng, 24, 40, 3));
    const EnsembleResult e = self_ensemble(wide, p);
    CHECK(e.transforms.size() == 4);
    CHECK_FALSE(e.notice.empty());
    CHECK(e.raw.packed_height() == 12);
    CHECK(e.raw.packed_width() == 20);
  }
  SUBCASE("no transforms") {
    CHECK_THROWS_AS(self_ensemble(rgb, p, {}, std::span<const Dihedral>{}), ParamError);
  }
}

TEST_CASE("score_run") {
  const IspParams p = random_params(5);
  const fs::path root = scratch_dir("score");
  const DatasetManifest m = write_dataset(root, p, 10);
  const fs::path pred = root / "pred";
  fs::create_directories(pred);

  SUBCASE("perfect predictions") {
    for (const auto& e : m.entries) fs::copy_file(root / *e.raw_path, pred / (e.id + ".npy"));
    const ScoreReport r = score_run(pred, m);
    REQUIRE(r.records.size() == 10);
    CHECK(r.failures() == 0);
    for (const auto& rec : r.records) {
      CHECK(rec.ok);
      CHECK(rec.psnr_db == 100.0);
      CHECK(rec.ssim == doctest::Approx(1.0));
      CHECK(rec.masked_psnr_db == 100.0);
      CHECK(rec.milliseconds >= 0.0);
    }
  }
  SUBCASE("reverse predictions with one missing") {
    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (std::size_t k = 0; k < m.entries.size(); ++k) {
      const auto& e = m.entries[k];
      if (k == 3) continue;
      const RawImage gt = load_raw(root / *e.raw_path, m.levels);
      const RawImage out = run_reverse(read_rgb_png(root / *e.rgb_path), p).raw;
      write_array(pred / (e.id + ".npy"), out.data());
      psnr_sum += oracle::psnr(normalized_raw(out.data(), m.levels), normalized_raw(gt.data(), m.levels));
      ssim_sum += oracle::ssim(normalized_raw(out.data(), m.levels), normalized_raw(gt.data(), m.levels));
    }
    const ScoreReport r = score_run(pred, m, {"rev", 0.98, 3});
    CHECK(r.failures() == 1);
    const auto failed = std::find_if(r.records.begin(), r.records.end(), [](const auto& x) { return !x.ok; });
    REQUIRE(failed != r.records.end());
    CHECK(failed->id == "s3");
    CHECK(failed->error.find("missing") != std::string::npos);
    const auto agg = r.aggregates();
    REQUIRE(agg.size() == 1);
    CHECK(agg[0].run == "rev");
    CHECK(agg[0].count == 9);
    CHECK(agg[0].mean_psnr_db == doctest::Approx(psnr_sum / 9).epsilon(1e-9));
    CHECK(agg[0].mean_ssim == doctest::Approx(ssim_sum / 9).epsilon(1e-4));
    for (const auto& rec : r.records) {
      if (rec.ok) CHECK(rec.masked_psnr_db >= rec.psnr_db - 1e-9);
    }
  }
  SUBCASE("wrong shape") {
    for (const auto& e : m.entries) write_array(pred / (e.id + ".npy"), ImageU16(4, 4, 4, 100));
    const ScoreReport r = score_run(pred, m);
    CHECK(r.failures() == 10);
    CHECK(r.records[0].error.find("shape") != std::string::npos);
  }
  fs::remove_all(root);
}

TEST_CASE("report formats") {
  ScoreReport r;
  for (const char* run : {"a", "b"}) {
    for (Split s : {Split::test1, Split::test2}) {
      for (int k = 0; k < 3; ++k) {
        ScoreRecord rec;
        rec.run = run;
        rec.split = s;
        rec.id = "img" + std::to_string(k);
        rec.psnr_db = 40.0 + k + 0.123456789;
        rec.ssim = 0.9 + 0.01 * k;
        rec.masked_psnr_db = 41.0 + k;
        rec.milliseconds = 1.5 * k;
        r.records.push_back(rec);
      }
    }
  }
  r.records[4].ok = false;
  r.records[4].error = "missing prediction, \"x\"";
  r.records[4].psnr_db = r.records[4].ssim = r.records[4].masked_psnr_db = 0.0;

  CHECK(load_report_csv(emit_report(r, ReportFormat::csv)) == r);
  CHECK(load_report_json(emit_report(r, ReportFormat::json)) == r);

  const auto agg = r.aggregates();
  REQUIRE(agg.size() == 4);
  CHECK(agg[1].run == "a");
  CHECK(agg[1].split == Split::test2);
  CHECK(agg[1].count == 2);
  CHECK(agg[0].mean_psnr_db == doctest::Approx(41.123456789));

  const std::string md = emit_report(r, ReportFormat::markdown);
  CHECK(md.find("| a | test1 |") != std::string::npos);
  CHECK(md.find("41.12") != std::string::npos);

  const std::string empty = emit_report({}, ReportFormat::csv);
  CHECK(std::count(empty.begin(), empty.end(), '\n') == 1);
  CHECK(load_report_csv(empty).records.empty());
  CHECK(parse_report_format("md") == ReportFormat::markdown);
  CHECK_THROWS_AS(parse_report_format("xml"), ParamError);
  CHECK_THROWS_AS(load_report_csv("nope\n1,2\n"), SchemaError);
}

TEST_CASE("time_pipeline") {
  const IspParams p = random_params(6);
  CHECK_THROWS_AS(time_pipeline(64, 64, p, 1), ParamError);
  const TimingResult t = time_pipeline(64, 48, p, 3);
  REQUIRE(t.milliseconds.size() == 3);
  for (double ms : t.milliseconds) CHECK(ms > 0.0);
  std::vector<double> sorted = t.milliseconds;
  std::sort(sorted.begin(), sorted.end());
  CHECK(t.median_ms == sorted[1]);
  CHECK(t.ms_per_megapixel == doctest::Approx(t.median_ms / (64 * 48 / 1e6)));
}
