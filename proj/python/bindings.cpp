#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "rawkit/bench.hpp"
#include "rawkit/cli.hpp"
#include "rawkit/dataio.hpp"
#include "rawkit/fit.hpp"
#include "rawkit/forward.hpp"
#include "rawkit/reverse.hpp"

namespace py = pybind11;
using namespace rawkit;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Image<T> to_image(const Array<T>& a, int channels, const char* what) {
  const bool planar = a.ndim() == 2 && channels == 1;
  if (!planar && !(a.ndim() == 3 && a.shape(2) == channels)) {
    throw DimensionError(std::string(what) + " must have shape (h, w, " + std::to_string(channels) + ")");
  }
  Image<T> img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), channels);
  std::copy(a.data(), a.data() + a.size(), img.storage().begin());
  return img;
}

template <typename T>
py::array_t<T> to_array(const Image<T>& img, bool squeeze = false) {
  std::vector<py::ssize_t> shape{img.height(), img.width()};
  if (!squeeze) shape.push_back(img.channels());
  py::array_t<T> out(shape);
  std::copy(img.storage().begin(), img.storage().end(), out.mutable_data());
  return out;
}

py::array_t<bool> mask_array(const ClipMask& m) {
  py::array_t<bool> out({m.height(), m.width()});
  bool* dst = out.mutable_data();
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) *dst++ = m.at(y, x);
  }
  return out;
}

ImageF real_image(const py::array& a) {
  const Array<double> d(a);
  if (d.ndim() == 2) return to_image<double>(d, 1, "image");
  if (d.ndim() != 3) throw DimensionError("image must be 2-D or 3-D");
  return to_image<double>(d, static_cast<int>(d.shape(2)), "image");
}

py::tuple forward(const Array<std::uint16_t>& raw, const std::string& params, int threads) {
  const IspParams p = parse_params(params);
  const RawImage r = RawImage::create(to_image<std::uint16_t>(raw, 4, "raw"), p.levels());
  ForwardOptions opts;
  opts.threads = threads;
  ForwardResult res;
  {
    py::gil_scoped_release release;
    res = run_forward(r, p, opts);
  }
  return py::make_tuple(to_array(res.rgb.u8()), mask_array(res.mask));
}

py::tuple reverse(const Array<std::uint8_t>& rgb, const std::string& params, int threads, bool ensemble, bool dither,
                  std::uint64_t seed, const std::string& clip) {
  const IspParams p = parse_params(params);
  const RgbImage img = RgbImage::from_u8(to_image<std::uint8_t>(rgb, 3, "rgb"));
  ReverseOptions opts;
  opts.output_bit_depth = p.bit_depth;
  opts.threads = threads;
  opts.dither = dither;
  opts.seed = seed;
  if (clip == "mark") {
    opts.clip_policy = ClipPolicy::mark;
  } else if (clip != "clamp") {
    throw ParamError("clip must be 'clamp' or 'mark'");
  }
  RawImage raw;
  ClipMask mask;
  {
    py::gil_scoped_release release;
    if (ensemble) {
      EnsembleResult e = self_ensemble(img, p, opts);
      raw = std::move(e.raw);
      mask = std::move(e.mask);
    } else {
      ReverseResult r = run_reverse(img, p, opts);
      raw = std::move(r.raw);
      mask = std::move(r.mask);
    }
  }
  return py::make_tuple(to_array(raw.data()), mask_array(mask));
}

std::string fit(const std::vector<Array<std::uint8_t>>& rgbs, const std::vector<Array<std::uint16_t>>& raws,
                const std::string& levels_params, bool full_frame, const std::string& loss, double tau,
                int max_iterations) {
  if (rgbs.size() != raws.size()) throw DataError("rgb and raw lists differ in length");
  const SensorLevels levels = parse_params(levels_params).levels();
  PairBatch batch;
  for (std::size_t k = 0; k < rgbs.size(); ++k) {
    PairSample s{RgbImage::from_u8(to_image<std::uint8_t>(rgbs[k], 3, "rgb")),
                 RawImage::create(to_image<std::uint16_t>(raws[k], 4, "raw"), levels), std::nullopt};
    if (full_frame) s.frame = FrameGeometry{};
    batch.pairs.push_back(std::move(s));
  }
  FitConfig config;
  config.loss = parse_loss(loss);
  config.tau = tau;
  config.max_iterations = max_iterations;
  py::gil_scoped_release release;
  return fit_full(batch, config).to_json();
}

py::tuple synth(const std::string& params, int size, std::uint64_t seed, const std::string& kind, double noise) {
  SceneSpec spec;
  spec.kind = parse_scene_kind(kind);
  spec.width = spec.height = size;
  spec.seed = seed;
  spec.noise_sigma_dn = noise;
  const ScenePair s = generate_scene(spec, parse_params(params));
  return py::make_tuple(to_array(s.raw.data()), to_array(s.rgb.u8()), mask_array(s.mask));
}

}  // namespace

PYBIND11_MODULE(_rawkit, m) {
  m.doc() = "Invertible camera ISP: forward rendering, RAW reconstruction, fitting and scoring";

  py::register_exception<Error>(m, "Error", PyExc_ValueError);

  m.def("forward", &forward, py::arg("raw"), py::arg("params"), py::arg("threads") = 1,
        "Render a packed (h, w, 4) uint16 RAW to (2h, 2w, 3) uint8 RGB. Returns (rgb, clip_mask).");
  m.def("reverse", &reverse, py::arg("rgb"), py::arg("params"), py::arg("threads") = 1, py::arg("ensemble") = false,
        py::arg("dither") = false, py::arg("seed") = 0, py::arg("clip") = "clamp",
        "Reconstruct a packed RAW from (h, w, 3) uint8 RGB. Returns (raw, clip_mask).");
  m.def("fit", &fit, py::arg("rgbs"), py::arg("raws"), py::arg("levels_params"), py::arg("full_frame") = true,
        py::arg("loss") = "l2", py::arg("tau") = 0.98, py::arg("max_iterations") = 100,
        "Fit pipeline parameters to aligned pairs. Returns the fit report as JSON.");
  m.def("synth", &synth, py::arg("params"), py::arg("size"), py::arg("seed") = 0, py::arg("kind") = "mixed",
        py::arg("noise") = 0.0, "Synthetic scene. Returns (raw, rgb, clip_mask).");
  m.def(
      "random_params", [](std::uint64_t seed) { return params_to_json(random_params(seed)); }, py::arg("seed"));
  m.def(
      "check_params", [](const std::string& params) { return params_to_json(parse_params(params)); },
      py::arg("params"), "Validate and normalize a params JSON document.");

  m.def(
      "psnr", [](const py::array& pred, const py::array& gt) { return psnr(real_image(pred), real_image(gt)); },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "ssim", [](const py::array& pred, const py::array& gt) { return ssim(real_image(pred), real_image(gt)); },
      py::arg("pred"), py::arg("gt"));

  m.def(
      "pack",
      [](const Array<std::uint16_t>& mosaic, const std::string& pattern) {
        return to_array(pack_mosaic(to_image<std::uint16_t>(mosaic, 1, "mosaic"), parse_pattern(pattern)));
      },
      py::arg("mosaic"), py::arg("pattern") = "rggb");
  m.def(
      "unpack",
      [](const Array<std::uint16_t>& packed, const std::string& pattern) {
        return to_array(unpack_mosaic(to_image<std::uint16_t>(packed, 4, "packed"), parse_pattern(pattern)), true);
      },
      py::arg("packed"), py::arg("pattern") = "rggb");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a rawkit command. Returns (exit_code, stdout, stderr).");
}
