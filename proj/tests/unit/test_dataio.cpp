#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

#include "oracles.hpp"
#include "rawkit/bench.hpp"
#include "rawkit/dataio.hpp"
#include "rawkit/reverse.hpp"

using namespace rawkit;
using nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("rawkit_test_dataio_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// 2x2 PNGs written by Pillow: 8-bit grayscale and opaque RGBA.
constexpr unsigned char kGrayPng[] = {
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52, 0x00, 0x00,
    0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x08, 0x00, 0x00, 0x00, 0x00, 0x57, 0xdd, 0x52, 0xf8, 0x00, 0x00, 0x00,
    0x0e, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xe4, 0x62, 0x60, 0x62, 0x60, 0x00, 0x00, 0x00, 0x44, 0x00,
    0x0e, 0x10, 0xcb, 0x4c, 0x88, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82};
constexpr unsigned char kRgbaPng[] = {
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52, 0x00, 0x00,
    0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x08, 0x06, 0x00, 0x00, 0x00, 0x72, 0xb6, 0x0d, 0x24, 0x00, 0x00, 0x00,
    0x14, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xe4, 0x12, 0x91, 0xfb, 0xcf, 0xc0, 0xc0, 0xc0, 0xc0, 0xc4,
    0x00, 0x05, 0x00, 0x11, 0xd4, 0x01, 0x3f, 0xb3, 0xb0, 0x24, 0x1d, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e,
    0x44, 0xae, 0x42, 0x60, 0x82};

template <std::size_t N>
void write_bytes(const fs::path& path, const unsigned char (&bytes)[N]) {
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes), N);
}

std::string header_of(const std::string& bytes) {
  const std::size_t len = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
  return bytes.substr(10, len);
}

}  // namespace

TEST_CASE("NPY header matches numpy byte for byte") {
  std::vector<std::uint16_t> data(24);
  for (int i = 0; i < 24; ++i) data[i] = static_cast<std::uint16_t>(i);
  const std::vector<std::size_t> shape{2, 3, 4};
  const std::string bytes = encode_npy(shape, data);
  // np.save(f, np.arange(24, dtype='<u2').reshape(2, 3, 4))
  const std::string numpy_header =
      "{'descr': '<u2', 'fortran_order': False, 'shape': (2, 3, 4), }" + std::string(55, ' ') + "\n";
  CHECK(bytes.substr(0, 6) == "\x93NUMPY");
  CHECK(bytes[6] == '\x01');
  CHECK(bytes[7] == '\x00');
  CHECK(header_of(bytes) == numpy_header);
  CHECK(bytes.size() == 128 + 48);
  CHECK((10 + numpy_header.size()) % 64 == 0);
  CHECK(static_cast<unsigned char>(bytes[128 + 2]) == 1);  // element 1, little-endian
  CHECK(static_cast<unsigned char>(bytes[128 + 3]) == 0);

  const std::vector<std::size_t> big{252, 252, 4};
  std::vector<std::uint16_t> zeros(252 * 252 * 4);
  const std::string b2 = encode_npy(big, zeros);
  CHECK(header_of(b2) == "{'descr': '<u2', 'fortran_order': False, 'shape': (252, 252, 4), }" +
                             std::string(51, ' ') + "\n");
}

TEST_CASE("NPY round trip for random shapes") {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> dim(1, 256);
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = trial < 200 ? dim(rng) : dim(rng) % 24 + 1;
    const int w = trial < 200 ? dim(rng) % 32 + 1 : dim(rng) % 24 + 1;
    const ImageU16 img = oracle::random_u16(rng, h, w, 4, 65535);
    const std::vector<std::size_t> shape{static_cast<std::size_t>(h), static_cast<std::size_t>(w), 4};
    const NpyArray back = decode_npy(encode_npy(shape, img.storage()));
    CHECK(back.shape == shape);
    if (back.data != img.storage()) FAIL("payload differs for shape " << h << "x" << w);
  }
}

TEST_CASE("NPY decoder names the bad field") {
  std::vector<std::uint16_t> data(8, 7);
  const std::vector<std::size_t> shape{1, 2, 4};
  const std::string good = encode_npy(shape, data);
  CHECK_NOTHROW(decode_npy(good));

  std::string bad = good;
  bad.replace(0, 6, "NOTNPY");
  CHECK_THROWS_WITH_AS(decode_npy(bad), doctest::Contains("magic"), FormatError);

  bad = good;
  bad[6] = '\x03';
  CHECK_THROWS_WITH_AS(decode_npy(bad), doctest::Contains("version"), FormatError);

  bad = good;
  bad.replace(bad.find("<u2"), 3, "<f4");
  CHECK_THROWS_WITH_AS(decode_npy(bad), doctest::Contains("dtype"), FormatError);

  bad = good;
  bad.replace(bad.find("False"), 5, "True ");
  CHECK_THROWS_WITH_AS(decode_npy(bad), doctest::Contains("fortran_order"), FormatError);

  bad = good;
  bad.resize(bad.size() - 2);
  CHECK_THROWS_AS(decode_npy(bad), FormatError);
}

TEST_CASE("packed array files") {
  const fs::path dir = scratch_dir("arrays");
  std::mt19937_64 rng(5);
  const ImageU16 img = oracle::random_u16(rng, 252, 252, 4, 1023);
  write_array(dir / "a.npy", img);
  CHECK(read_array(dir / "a.npy") == img);
  CHECK(load_raw(dir / "a.npy", {10, 64, 1023}).data() == img);

  ImageU16 hot = img;
  hot.at(3, 3, 1) = 1024;
  write_array(dir / "hot.npy", hot);
  CHECK_THROWS_AS(load_raw(dir / "hot.npy", {10, 64, 1023}), DataError);

  const std::vector<std::size_t> flat{4, 4};
  write_npy(dir / "flat.npy", flat, std::vector<std::uint16_t>(16));
  CHECK_THROWS_AS(read_array(dir / "flat.npy"), FormatError);
  CHECK(read_mosaic_npy(dir / "flat.npy").height() == 4);
  fs::remove_all(dir);
}

TEST_CASE("PNG codecs") {
  const fs::path dir = scratch_dir("png");
  std::mt19937_64 rng(6);
  const RgbImage rgb = RgbImage::from_u8(oracle::random_u8(rng, 37, 50, 3));
  write_rgb_png(dir / "a.png", rgb);
  CHECK(read_rgb_png(dir / "a.png") == rgb);

  const ImageU16 mosaic = oracle::random_u16(rng, 8, 10, 1, 4095);
  write_gray_png16(dir / "m.png", mosaic);
  CHECK(read_gray_png(dir / "m.png") == mosaic);
  CHECK_THROWS_AS(read_rgb_png(dir / "m.png"), FormatError);
  CHECK_THROWS_AS(read_rgb_png(dir / "missing.png"), Error);

  write_bytes(dir / "gray.png", kGrayPng);
  CHECK_THROWS_WITH_AS(read_rgb_png(dir / "gray.png"), doctest::Contains("grayscale"), FormatError);
  CHECK(read_gray_png(dir / "gray.png").at(1, 1) == 10);
  write_bytes(dir / "rgba.png", kRgbaPng);
  CHECK_THROWS_WITH_AS(read_rgb_png(dir / "rgba.png"), doctest::Contains("alpha"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("crops") {
  SUBCASE("1008 x 1008") {
    const auto crops = extract_crops(RgbImage::from_u8(ImageU8(1008, 1008, 3)), kTrack1Crop);
    REQUIRE(crops.size() == 4);
    const std::vector<std::pair<int, int>> expect{{0, 0}, {504, 0}, {0, 504}, {504, 504}};
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(crops[k].x == expect[k].first);
      CHECK(crops[k].y == expect[k].second);
      CHECK(crops[k].image.height() == 504);
    }
  }
  SUBCASE("bottom margin dropped") {
    CHECK(extract_crops(RgbImage::from_u8(ImageU8(1000, 1008, 3)), 504).size() == 2);
  }
  SUBCASE("too large") { CHECK_THROWS(extract_crops(RgbImage::from_u8(ImageU8(500, 500, 3)), 504)); }
  SUBCASE("odd crop") { CHECK_THROWS(extract_crops(RgbImage::from_u8(ImageU8(100, 100, 3)), 33)); }

  SUBCASE("tiles are disjoint and miss only the margins") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      const int h = 2 * std::uniform_int_distribution<int>(20, 90)(rng);
      const int w = 2 * std::uniform_int_distribution<int>(20, 90)(rng);
      const int crop = 2 * std::uniform_int_distribution<int>(5, 20)(rng);
      ImageU16 packed(h / 2, w / 2, 4);
      for (int i = 0; i < h / 2; ++i) {
        for (int j = 0; j < w / 2; ++j) {
          for (int c = 0; c < 4; ++c) packed.at(i, j, c) = static_cast<std::uint16_t>((i * 131 + j * 7 + c) % 1024);
        }
      }
      const RawImage raw = RawImage::create(packed, {});
      const auto crops = extract_crops(raw, crop);
      std::vector<int> cover(static_cast<std::size_t>(h) * w, 0);
      for (const auto& c : crops) {
        CHECK(c.image.packed_height() == crop / 2);
        for (int i = 0; i < crop / 2; ++i) {
          for (int j = 0; j < crop / 2; ++j) {
            CHECK(c.image.data().at(i, j, 3) == packed.at(c.y / 2 + i, c.x / 2 + j, 3));
          }
        }
        for (int y = c.y; y < c.y + crop; ++y) {
          for (int x = c.x; x < c.x + crop; ++x) ++cover[static_cast<std::size_t>(y) * w + x];
        }
      }
      const int ch = h / crop * crop;
      const int cw = w / crop * crop;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const int expect = (y < ch && x < cw) ? 1 : 0;
          if (cover[static_cast<std::size_t>(y) * w + x] != expect) FAIL("coverage wrong at " << y << "," << x);
        }
      }
      CHECK(h - ch < crop);
      CHECK(w - cw < crop);
    }
  }
}

TEST_CASE("scene generator") {
  const IspParams id = IspParams::identity({10, 64, 1023});
  SceneSpec spec;
  spec.width = 64;
  spec.height = 48;
  spec.vignette = false;

  SUBCASE("gradient rows are monotone") {
    spec.kind = SceneKind::gradient;
    const ScenePair s = generate_scene(spec, id);
    const ImageU8& rgb = s.rgb.u8();
    for (int y = 0; y < rgb.height(); ++y) {
      for (int x = 1; x < rgb.width(); ++x) {
        int prev = 0, cur = 0;
        for (int c = 0; c < 3; ++c) {
          prev += rgb.at(y, x - 1, c);
          cur += rgb.at(y, x, c);
        }
        CHECK(cur >= prev);
      }
    }
  }
  SUBCASE("same seed, same pair") {
    spec.kind = SceneKind::mixed;
    spec.seed = 77;
    const IspParams p = random_params(4);
    const ScenePair a = generate_scene(spec, p);
    const ScenePair b = generate_scene(spec, p);
    CHECK(a.raw == b.raw);
    CHECK(a.rgb == b.rgb);
    spec.seed = 78;
    CHECK_FALSE(generate_scene(spec, p).raw == a.raw);
  }
  SUBCASE("checker has 24 patches") {
    spec.kind = SceneKind::color_checker;
    spec.width = 120;
    spec.height = 80;
    const ScenePair s = generate_scene(spec, id);
    std::set<std::array<int, 4>> centers;
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 6; ++c) {
        const int i = (r * 20 + 10) / 2;
        const int j = (c * 20 + 10) / 2;
        std::array<int, 4> v{};
        for (int ch = 0; ch < 4; ++ch) v[ch] = s.raw.data().at(i, j, ch);
        // Constant inside the patch.
        for (int di = -3; di <= 3; ++di) {
          for (int dj = -3; dj <= 3; ++dj) {
            for (int ch = 0; ch < 4; ++ch) CHECK(s.raw.data().at(i + di, j + dj, ch) == v[ch]);
          }
        }
        centers.insert(v);
      }
    }
    CHECK(centers.size() == 24);
  }
  SUBCASE("odd size") {
    spec.width = 63;
    CHECK_THROWS_AS(generate_scene(spec, id), DimensionError);
  }
}

TEST_CASE("generated pairs agree with the reverse pipeline") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const IspParams p = random_params(seed + 40);
    SceneSpec spec;
    spec.width = spec.height = 128;
    spec.seed = seed;
    const ScenePair s = generate_scene(spec, p);
    const ReverseResult r = run_reverse(s.rgb, p);
    ClipMask mask = s.mask;
    mask.merge(r.mask);
    CHECK(psnr(normalized_raw(r.raw.data(), p.levels()), normalized_raw(s.raw.data(), p.levels()), &mask) >= 50.0);
  }
}

TEST_CASE("random params are valid and seeded") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const IspParams p = random_params(seed);
    CHECK_NOTHROW(validate_params(p));
    CHECK(p.wb_gains[1] == 1.0);
    CHECK(p == random_params(seed));
  }
  CHECK_FALSE(random_params(1) == random_params(2));
}

TEST_CASE("params JSON round trip") {
  const IspParams p = random_params(12);
  CHECK(parse_params(params_to_json(p)) == p);
  json doc = json::parse(params_to_json(p));
  CHECK(doc["schema"] == "rawkit-params-v1");
  doc["tone_weights"] = {0.5, 0.6, 0.0, 0.0};
  CHECK_THROWS_AS(parse_params(doc.dump()), ParamError);
  doc = json::parse(params_to_json(p));
  doc["extra"] = 1;
  CHECK_THROWS_AS(parse_params(doc.dump()), SchemaError);
  CHECK_THROWS_AS(parse_params("{not json"), SchemaError);
}

TEST_CASE("manifest load and save") {
  const fs::path dir = scratch_dir("manifest");
  const std::string minimal =
      R"({"schema": "rawkit-manifest-v1", "entries": [{"rgb_path": "rgb/a.png", "split": "train"}]})";
  const DatasetManifest m = parse_manifest(minimal, dir);
  REQUIRE(m.entries.size() == 1);
  CHECK(m.entries[0].id == "a");
  CHECK(m.resolve(*m.entries[0].rgb_path) == dir / "rgb/a.png");

  const std::string bad_split =
      R"({"schema": "rawkit-manifest-v1", "entries": [{"rgb_path": "a.png", "split": "test3"}]})";
  CHECK_THROWS_AS(parse_manifest(bad_split, dir), SchemaError);

  DatasetManifest full;
  full.root = dir / "data";
  full.levels = {12, 200, 4000};
  full.aligned = false;
  for (int k = 0; k < 3; ++k) {
    ManifestEntry e;
    e.id = "e" + std::to_string(k);
    e.rgb_path = "rgb/" + e.id + ".png";
    if (k != 1) e.raw_path = "raw/" + e.id + ".npy";
    e.split = k == 2 ? Split::test2 : Split::val;
    if (k == 0) {
      e.frame_offset = std::array<int, 2>{504, 0};
      e.frame_size = std::array<int, 2>{1008, 1008};
    }
    e.pattern = k == 1 ? BayerPattern::gbrg : BayerPattern::rggb;
    full.entries.push_back(e);
  }
  save_manifest(dir / "m.json", full);
  CHECK(load_manifest(dir / "m.json") == full);
  fs::remove_all(dir);
}

TEST_CASE("manifest loader rejects single-rule mutations") {
  const json valid = json::parse(R"({
    "schema": "rawkit-manifest-v1",
    "levels": {"bit_depth": 10, "black_level": 64, "white_level": 1023},
    "aligned": true,
    "entries": [
      {"id": "a", "rgb_path": "rgb/a.png", "raw_path": "raw/a.npy", "split": "train",
       "frame_offset": [0, 0], "frame_size": [512, 512], "pattern": "rggb"},
      {"id": "b", "rgb_path": "rgb/b.png", "split": "test1"}
    ]})");
  CHECK_NOTHROW(parse_manifest(valid.dump(), "/data"));

  using Mutation = void (*)(json&, int);
  const std::vector<Mutation> mutations = {
      [](json& d, int) { d.erase("schema"); },
      [](json& d, int) { d["schema"] = "rawkit-manifest-v2"; },
      [](json& d, int) { d.erase("entries"); },
      [](json& d, int) { d["entries"] = "none"; },
      [](json& d, int k) { d["unknown_" + std::to_string(k)] = k; },
      [](json& d, int k) { d["entries"][k % 2]["extra"] = true; },
      [](json& d, int k) { d["entries"][k % 2].erase("split"); },
      [](json& d, int k) {
        const char* tags[] = {"test3", "TRAIN", "", "validation", "test"};
        d["entries"][k % 2]["split"] = tags[k % 5];
      },
      [](json& d, int k) { d["entries"][k % 2]["rgb_path"] = "/abs/" + std::to_string(k) + ".png"; },
      [](json& d, int) { d["entries"][0]["raw_path"] = "/raw/a.npy"; },
      [](json& d, int k) { d["entries"][0]["frame_offset"] = {-(k + 1), 0}; },
      [](json& d, int k) { d["entries"][0]["frame_offset"] = {0, -(k + 1)}; },
      [](json& d, int) { d["entries"][0]["frame_size"] = {512}; },
      [](json& d, int) { d["entries"][0]["pattern"] = "xyz"; },
      [](json& d, int) { d["entries"][1]["id"] = "a"; },
      [](json& d, int) { d["entries"][1].erase("rgb_path"); },
      [](json& d, int) { d["levels"]["bit_depth"] = 11; },
      [](json& d, int) { d["levels"]["black_level"] = 2000; },
      [](json& d, int) { d["levels"]["gamma"] = 2; },
      [](json& d, int) { d["aligned"] = "yes"; },
      [](json& d, int k) { d["entries"][k % 2]["split"] = k; },
  };
  for (int k = 0; k < 100; ++k) {
    json doc = valid;
    mutations[k % mutations.size()](doc, k);
    CAPTURE(doc.dump());
    CHECK_THROWS_AS(parse_manifest(doc.dump(), "/data"), SchemaError);
  }
  CHECK_THROWS_AS(parse_manifest("[1, 2]", "/data"), SchemaError);
  CHECK_THROWS_AS(parse_manifest("{", "/data"), SchemaError);
}
