#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "oracles.hpp"
#include "rawkit/bench.hpp"
#include "rawkit/cli.hpp"
#include "rawkit/dataio.hpp"
#include "rawkit/forward.hpp"

using namespace rawkit;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("rawkit_test_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<nlohmann::json> events(const std::string& out) {
  std::vector<nlohmann::json> ev;
  std::istringstream in(out);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line[0] == '{') ev.push_back(nlohmann::json::parse(line));
  }
  return ev;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  const fs::path d = scratch_dir("usage");
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"pack", "--input", d.string(), "--out", (d / "o").string(), "--pattern", "xyz"}).code == kExitUsage);
  CHECK(cli({"pack", "--input", d.string(), "--out", (d / "o").string(), "--crop", "15"}).code == kExitUsage);
  CHECK(cli({"pack", "--input", (d / "nope").string(), "--out", (d / "o").string()}).code == kExitUsage);
  CHECK(cli({"bench", "--repeats", "1", "--size", "64x64"}).code == kExitUsage);
  CHECK(cli({"bench", "--size", "64by64"}).code == kExitUsage);

  std::ofstream(d / "bad.json") << "{\"schema\": \"rawkit-params-v1\", \"bit_depth\": ";
  std::ofstream(d / "img.png") << "not a png";
  const Run bad = cli({"unprocess", "--rgb", (d / "img.png").string(), "--params", (d / "bad.json").string(), "--out",
                       (d / "o").string()});
  CHECK(bad.code == kExitUsage);
  CHECK(bad.err.find("params") != std::string::npos);

  save_params(d / "p.json", random_params(1));
  CHECK(cli({"unprocess", "--rgb", (d / "missing.png").string(), "--params", (d / "p.json").string(), "--out",
             (d / "o").string()})
            .code == kExitUsage);
  CHECK(cli({"unprocess", "--params", (d / "p.json").string(), "--out", (d / "o").string()}).code == kExitUsage);
  CHECK(cli({"fit", "--manifest", (d / "p.json").string(), "--out", (d / "f.json").string()}).code == kExitUsage);
  fs::remove_all(d);
}

TEST_CASE("pack") {
  const fs::path d = scratch_dir("pack");
  const fs::path in = d / "in";
  fs::create_directories(in);

  SUBCASE("empty input directory") {
    const Run r = cli({"pack", "--input", in.string(), "--out", (d / "out").string()});
    CHECK(r.code == kExitOk);
    CHECK(load_manifest(d / "out" / "manifest.json").entries.empty());
  }
  SUBCASE("one 1008 mosaic gives four crops") {
    std::mt19937_64 rng(1);
    write_gray_png16(in / "shot.png", oracle::random_u16(rng, 1008, 1008, 1, 1023));
    const Run r = cli({"pack", "--input", in.string(), "--out", (d / "out").string(), "--quiet"});
    CHECK(r.code == kExitOk);
    CHECK(r.out.empty());
    const DatasetManifest m = load_manifest(d / "out" / "manifest.json");
    REQUIRE(m.entries.size() == 4);
    for (const auto& e : m.entries) {
      const ImageU16 a = read_array(m.resolve(*e.raw_path));
      CHECK(a.height() == 252);
      CHECK(a.width() == 252);
      CHECK(a.channels() == 4);
    }
  }
  fs::remove_all(d);
}

TEST_CASE("synth, fit, unprocess, score") {
  const fs::path d = scratch_dir("flow");
  const std::string data = (d / "data").string();
  Run r = cli({"--seed", "3", "synth", "--count", "4", "--size", "96", "--out", data});
  REQUIRE(r.code == kExitOk);
  const DatasetManifest m = load_manifest(d / "data" / "manifest.json");
  REQUIRE(m.entries.size() == 4);
  CHECK(m.entries[3].split == Split::test1);
  CHECK(m.entries[0].split == Split::train);
  CHECK(events(r.out).back()["event"] == "done");

  // Same seed, same bytes.
  REQUIRE(cli({"--seed", "3", "--quiet", "synth", "--count", "4", "--size", "96", "--out", (d / "again").string()}).code ==
          kExitOk);
  CHECK(slurp(d / "data" / "raw" / "scene_0002.npy") == slurp(d / "again" / "raw" / "scene_0002.npy"));
  CHECK(slurp(d / "data" / "params_true.json") == slurp(d / "again" / "params_true.json"));

  r = cli({"fit", "--manifest", (d / "data" / "manifest.json").string(), "--out", (d / "fit.json").string()});
  REQUIRE(r.code == kExitOk);
  CHECK_NOTHROW(load_params(d / "fit.json"));
  CHECK(fs::exists(d / "fit.report.json"));
  CHECK(events(r.out).back()["event"] == "fit_done");

  const fs::path pred = d / "pred";
  r = cli({"unprocess", "--manifest", (d / "data" / "manifest.json").string(), "--params",
           (d / "fit.json").string(), "--out", pred.string()});
  REQUIRE(r.code == kExitOk);
  for (const auto& e : m.entries) CHECK(fs::exists(pred / (e.id + ".npy")));

  r = cli({"score", "--pred", pred.string(), "--manifest", (d / "data" / "manifest.json").string(), "--report",
           (d / "score.csv").string(), "--run", "t"});
  CHECK(r.code == kExitOk);
  const ScoreReport report = load_report_csv(slurp(d / "score.csv"));
  REQUIRE(report.records.size() == 4);
  for (const auto& rec : report.records) CHECK(rec.psnr_db >= 45.0);
  CHECK(r.out.find("| t | train |") != std::string::npos);

  fs::create_directories(d / "empty");
  r = cli({"score", "--pred", (d / "empty").string(), "--manifest", (d / "data" / "manifest.json").string(), "--report",
           (d / "score2.csv").string()});
  CHECK(r.code == kExitFailure);
  CHECK(r.err.find("missing prediction") != std::string::npos);

  r = cli({"unprocess", "--rgb", (d / "data" / "rgb" / "scene_0000.png").string(), "--params",
           (d / "data" / "params_true.json").string(), "--out", (d / "single").string(), "--ensemble"});
  CHECK(r.code == kExitOk);
  CHECK(fs::exists(d / "single" / "scene_0000.npy"));
  fs::remove_all(d);
}

TEST_CASE("process and render") {
  const fs::path d = scratch_dir("process");
  const IspParams p = random_params(12);
  save_params(d / "p.json", p);
  SceneSpec spec;
  spec.width = spec.height = 64;
  const ScenePair s = generate_scene(spec, p);
  write_array(d / "raw.npy", s.raw.data());

  Run r = cli({"process", "--raw", (d / "raw.npy").string(), "--params", (d / "p.json").string(), "--out",
               (d / "out.png").string()});
  REQUIRE(r.code == kExitOk);
  const RgbImage back = read_rgb_png(d / "out.png");
  const ImageU8& a = back.u8();
  const ImageU8& b = s.rgb.u8();
  REQUIRE(a.same_shape(b));
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(std::abs(a.storage()[k] - b.storage()[k]) <= 2);

  write_array(d / "flat.npy", ImageU16(8, 8, 4, 1023));
  r = cli({"render", "--raw", (d / "flat.npy").string(), "--out", (d / "flat.png").string()});
  REQUIRE(r.code == kExitOk);
  const ImageU8 flat = read_rgb_png(d / "flat.png").u8();
  CHECK(flat.height() == 8);
  for (std::size_t k = 1; k < flat.size(); ++k) CHECK(flat.storage()[k] == flat.storage()[0]);

  r = cli({"process", "--raw", (d / "p.json").string(), "--params", (d / "p.json").string(), "--out",
           (d / "x.png").string()});
  CHECK(r.code != kExitOk);
  fs::remove_all(d);
}

TEST_CASE("bench") {
  const Run r = cli({"--threads", "1", "bench", "--size", "64x48", "--repeats", "3"});
  REQUIRE(r.code == kExitOk);
  const auto ev = events(r.out);
  REQUIRE(ev.size() == 1);
  CHECK(ev[0]["milliseconds"].size() == 3);
  CHECK(ev[0]["width"] == 64);
}
