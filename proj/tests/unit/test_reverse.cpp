#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "rawkit/bench.hpp"
#include "rawkit/dataio.hpp"
#include "rawkit/forward.hpp"
#include "rawkit/reverse.hpp"

using namespace rawkit;
namespace fs = std::filesystem;

namespace {

IspParams levels_64() { return IspParams::identity({10, 64, 1023}); }

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("rawkit_test_reverse_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

ScenePair scene(std::uint64_t seed, const IspParams& p, int size = 96) {
  SceneSpec spec;
  spec.width = spec.height = size;
  spec.seed = seed;
  return generate_scene(spec, p);
}

}  // namespace

TEST_CASE("mosaic_rggb sampling") {
  ImageF rgb(2, 2, 3);
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 2; ++x) {
      for (int c = 0; c < 3; ++c) rgb.at(y, x, c) = 0.1 * (1 + c) + 0.01 * (2 * y + x);
    }
  }
  const ImageF p = mosaic_rggb(rgb);
  CHECK(p.at(0, 0, kR) == rgb.at(0, 0, 0));
  CHECK(p.at(0, 0, kG1) == rgb.at(0, 1, 1));
  CHECK(p.at(0, 0, kG2) == rgb.at(1, 0, 1));
  CHECK(p.at(0, 0, kB) == rgb.at(1, 1, 2));

  ImageF c(6, 4, 3, 0.3);
  const ImageF mc = mosaic_rggb(c);
  for (double v : mc.storage()) CHECK(v == 0.3);
  CHECK_THROWS_AS(mosaic_rggb(ImageF(3, 4, 3)), DimensionError);
  CHECK_THROWS_AS(mosaic_rggb(ImageF(4, 5, 3)), DimensionError);
}

TEST_CASE("mosaic inverts demosaic for random packed images") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = std::uniform_int_distribution<int>(1, 10)(rng);
    const int w = std::uniform_int_distribution<int>(1, 10)(rng);
    const ImageF x = oracle::random_unit(rng, h, w, 4);
    CHECK(mosaic_rggb(demosaic_bilinear(x)) == x);
  }
}

TEST_CASE("quantize_raw") {
  const IspParams p = levels_64();
  ImageF v(1, 1, 4);
  v.at(0, 0, 0) = 0.0;
  v.at(0, 0, 1) = 1.0;
  v.at(0, 0, 2) = 0.5;
  v.at(0, 0, 3) = 2.0;
  const RawImage r = quantize_raw(v, p);
  CHECK(r.data().at(0, 0, 0) == 64);
  CHECK(r.data().at(0, 0, 1) == 1023);
  CHECK(r.data().at(0, 0, 2) == 544);
  CHECK(r.data().at(0, 0, 3) == 1023);  // clamped to the 10-bit range
  v.at(0, 0, 0) = -1.0;
  CHECK(quantize_raw(v, p).data().at(0, 0, 0) == 0);

  ReverseOptions opts;
  opts.output_bit_depth = 12;
  CHECK_THROWS_AS(quantize_raw(v, p, opts), ParamError);
}

TEST_CASE("dither stays within half a DN and is seeded") {
  const IspParams p = levels_64();
  std::mt19937_64 rng(3);
  const ImageF v = oracle::random_unit(rng, 16, 16, 4, 0.05, 0.95);
  ReverseOptions opts;
  const RawImage plain = quantize_raw(v, p, opts);
  opts.dither = true;
  opts.seed = 42;
  const RawImage a = quantize_raw(v, p, opts);
  const RawImage b = quantize_raw(v, p, opts);
  CHECK(a == b);
  int differ = 0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    const double exact = 64 + v.storage()[k] * 959;
    CHECK(std::abs(a.data().storage()[k] - exact) <= 1.0);
    differ += a.data().storage()[k] != plain.data().storage()[k];
  }
  CHECK(differ > 0);
  opts.seed = 43;
  CHECK_FALSE(quantize_raw(v, p, opts) == a);
}

TEST_CASE("run_reverse trivial inputs") {
  const IspParams p = levels_64();
  SUBCASE("zeros") {
    const ReverseResult r = run_reverse(RgbImage::from_u8(ImageU8(6, 8, 3, 0)), p);
    CHECK(r.raw.packed_height() == 3);
    CHECK(r.raw.packed_width() == 4);
    for (auto v : r.raw.data().storage()) CHECK(v == 64);
    CHECK(r.mask.count() == 0);
  }
  SUBCASE("saturated") {
    const ReverseResult r = run_reverse(RgbImage::from_u8(ImageU8(6, 8, 3, 255)), p);
    for (auto v : r.raw.data().storage()) CHECK(v >= 1023 * (1 - 1e-9));
    CHECK(r.mask.height() == 6);
    CHECK(r.mask.count() == 48);
  }
  SUBCASE("odd size") { CHECK_THROWS_AS(run_reverse(RgbImage::from_u8(ImageU8(5, 8, 3)), p), DimensionError); }
}

TEST_CASE("clip policies differ only on saturated pixels") {
  IspParams p = random_params(3);
  std::mt19937_64 rng(4);
  const RgbImage rgb = RgbImage::from_u8(oracle::random_u8(rng, 32, 32, 3));
  ReverseOptions opts;
  const ReverseResult clamp = run_reverse(rgb, p, opts);
  opts.clip_policy = ClipPolicy::mark;
  const ReverseResult mark = run_reverse(rgb, p, opts);
  CHECK(clamp.mask == mark.mask);
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 16; ++j) {
      for (int c = 0; c < 4; ++c) {
        const auto [dy, dx] = channel_site(BayerPattern::rggb, c);
        if (clamp.mask.at(2 * i + dy, 2 * j + dx)) {
          CHECK(clamp.raw.data().at(i, j, c) == 1023);
        } else {
          CHECK(clamp.raw.data().at(i, j, c) == mark.raw.data().at(i, j, c));
        }
      }
    }
  }
}

TEST_CASE("fused reverse equals the stage composition and ignores thread count") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const IspParams p = random_params(seed);
    std::mt19937_64 rng(seed);
    const RgbImage rgb = RgbImage::from_u8(oracle::random_u8(rng, 40, 58, 3));
    ReverseOptions opts;
    opts.frame = {8, 4, 120, 80};
    const ReverseResult ref = reverse_by_stages(rgb, p, opts);
    for (int threads : {1, 2, 5, 0}) {
      opts.threads = threads;
      const ReverseResult r = run_reverse(rgb, p, opts);
      CHECK(r.raw == ref.raw);
      CHECK(r.mask == ref.mask);
    }
  }
}

TEST_CASE("reverse after forward recovers the RAW") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const IspParams p = random_params(100 + seed);
    const ScenePair s = scene(seed, p);
    const ReverseResult r = run_reverse(s.rgb, p);
    CHECK(r.raw.packed_height() == s.raw.packed_height());
    ClipMask mask = s.mask;
    mask.merge(r.mask);
    const double db = psnr(normalized_raw(r.raw.data(), p.levels()), normalized_raw(s.raw.data(), p.levels()), &mask);
    CHECK(db >= 50.0);
  }
}

TEST_CASE("forward after reverse reproduces the RGB") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const IspParams p = random_params(200 + seed);
    const ScenePair s = scene(seed, p);
    const ReverseResult r = run_reverse(s.rgb, p);
    const ForwardResult f = run_forward(r.raw, p);
    // Clipping anywhere in the bilinear support disturbs the re-demosaiced pixel.
    const ClipMask clipped = oracle::dilate3({&s.mask, &r.mask, &f.mask});
    std::size_t ok = 0, total = 0;
    for (int y = 0; y < s.rgb.height(); ++y) {
      for (int x = 0; x < s.rgb.width(); ++x) {
        if (clipped.at(y, x)) continue;
        ++total;
        bool close = true;
        for (int c = 0; c < 3; ++c) close &= std::abs(f.rgb.u8().at(y, x, c) - s.rgb.u8().at(y, x, c)) <= 2;
        ok += close;
      }
    }
    REQUIRE(total > 0);
    CHECK(static_cast<double>(ok) / total >= 0.999);
  }
}

TEST_CASE("reverse is equivariant when the CFA travels with the image") {
  for (std::uint64_t seed : {7u, 8u}) {
    const IspParams p = random_params(seed);
    std::mt19937_64 rng(seed);
    for (auto [h, w] : {std::pair{24, 24}, std::pair{20, 28}}) {
      const RgbImage rgb = RgbImage::from_u8(oracle::random_u8(rng, h, w, 3));
      const ImageU16 base = unpack_mosaic(run_reverse(rgb, p).raw.data(), BayerPattern::rggb);
      for (Dihedral t : kAllDihedral) {
        CAPTURE(to_string(t));
        ReverseOptions opts;
        opts.cfa = transform_pattern(BayerPattern::rggb, t);
        opts.frame = transform_frame({}, t, h, w);
        const RgbImage trgb = RgbImage::from_u8(oracle::dihedral(rgb.u8(), t));
        const ImageU16 got = unpack_mosaic(run_reverse(trgb, p, opts).raw.data(), opts.cfa);
        CHECK(got == oracle::dihedral(base, t));
      }
    }
  }
}

TEST_CASE("packed law holds literally for transforms that fix the CFA") {
  const IspParams p = random_params(9);
  std::mt19937_64 rng(9);
  const RgbImage rgb = RgbImage::from_u8(oracle::random_u8(rng, 24, 24, 3));
  int fixing = 0;
  for (Dihedral t : kAllDihedral) {
    if (transform_pattern(BayerPattern::rggb, t) != BayerPattern::rggb) continue;
    CAPTURE(to_string(t));
    ++fixing;
    const RgbImage trgb = RgbImage::from_u8(oracle::dihedral(rgb.u8(), t));
    CHECK(run_reverse(trgb, p).raw.data() == dihedral_transform_packed(run_reverse(rgb, p).raw, t).data());
  }
  CHECK(fixing == 2);  // identity and transpose
}

TEST_CASE("unprocess_batch") {
  const IspParams p = random_params(1);
  const fs::path root = scratch_dir("batch");
  DatasetManifest m;
  m.root = root;
  m.levels = p.levels();

  SUBCASE("empty manifest") {
    const BatchSummary s = unprocess_batch(m, p, {}, root / "out");
    CHECK(s.records.empty());
    CHECK(s.failed() == 0);
  }

  SUBCASE("four crops and one bad path") {
    std::mt19937_64 rng(2);
    for (int k = 0; k < 4; ++k) {
      const std::string name = "img" + std::to_string(k) + ".png";
      write_rgb_png(root / name, RgbImage::from_u8(oracle::random_u8(rng, 504, 504, 3)));
      ManifestEntry e;
      e.id = "img" + std::to_string(k);
      e.rgb_path = name;
      m.entries.push_back(e);
    }
    BatchSummary s = unprocess_batch(m, p, {}, root / "out");
    CHECK(s.succeeded() == 4);
    for (const auto& rec : s.records) {
      const ImageU16 a = read_array(rec.output);
      CHECK(a.height() == 252);
      CHECK(a.width() == 252);
      CHECK(a.channels() == 4);
      CHECK(rec.to_json_line().find("\"status\"") != std::string::npos);
    }
    m.entries[2].rgb_path = "missing.png";
    s = unprocess_batch(m, p, {}, root / "out2");
    CHECK(s.succeeded() == 3);
    CHECK(s.failed() == 1);
    CHECK_FALSE(s.records[2].ok);
    CHECK_FALSE(s.records[2].error.empty());
  }
  fs::remove_all(root);
}
