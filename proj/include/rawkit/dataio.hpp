#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rawkit/forward.hpp"
#include "rawkit/model.hpp"

namespace rawkit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// NPY v1.0, little-endian unsigned 16-bit, C order.

struct NpyArray {
  std::vector<std::size_t> shape;
  std::vector<std::uint16_t> data;
};

std::string encode_npy(std::span<const std::size_t> shape, std::span<const std::uint16_t> data);
NpyArray decode_npy(std::string_view bytes);  // throws FormatError naming the offending field
void write_npy(const fs::path& path, std::span<const std::size_t> shape, std::span<const std::uint16_t> data);
NpyArray read_npy(const fs::path& path);

/// (h/2, w/2, 4) packed arrays.
void write_array(const fs::path& path, const ImageU16& packed);
ImageU16 read_array(const fs::path& path);
/// Reads a packed array and validates it against the sensor levels.
RawImage load_raw(const fs::path& path, SensorLevels levels);
/// 2-D single-channel mosaics.
ImageU16 read_mosaic_npy(const fs::path& path);

// ---------------------------------------------------------------------------
// PNG

/// 8-bit RGB only; grayscale, palette, alpha and 16-bit files are rejected with FormatError.
RgbImage read_rgb_png(const fs::path& path);
void write_rgb_png(const fs::path& path, const RgbImage& rgb);
/// 8- or 16-bit grayscale (Bayer mosaics stored as images).
ImageU16 read_gray_png(const fs::path& path);
void write_gray_png16(const fs::path& path, const ImageU16& mosaic);

// ---------------------------------------------------------------------------
// Crops

struct RgbCrop {
  RgbImage image;
  int x = 0;
  int y = 0;
};

struct RawCrop {
  RawImage image;
  int x = 0;  // RGB-domain offset
  int y = 0;
};

inline constexpr int kTrack1Crop = 504;
inline constexpr int kTrack2Crop = 496;

/// Non-overlapping row-major crop x crop tiles; right/bottom remainders are dropped.
std::vector<RgbCrop> extract_crops(const RgbImage& full, int crop);
/// `crop` is in RGB-domain pixels; each packed tile is crop/2 on a side.
std::vector<RawCrop> extract_crops(const RawImage& full, int crop);

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class SceneKind { gradient, color_checker, radial_vignette, noise_field, mixed };

std::string_view to_string(SceneKind k);
SceneKind parse_scene_kind(std::string_view name);

struct SceneSpec {
  SceneKind kind = SceneKind::mixed;
  int width = 256;
  int height = 256;
  std::uint64_t seed = 0;
  /// Peak display-linear scene value; below 1 so rendered pixels stay clear of saturation.
  double peak = 0.85;
  /// Optical falloff baked into the RAW (radial_vignette always applies the params' shading).
  bool vignette = true;
  /// Gaussian read noise in DN added to the RAW after the RGB is rendered.
  double noise_sigma_dn = 0.0;
};

struct ScenePair {
  RawImage raw;
  RgbImage rgb;
  ClipMask mask;  // forward-pipeline clipping, (h, w)
};

/// Builds a display-linear scene, maps it to camera space through the inverse color matrix and
/// white balance, mosaics it into a RAW (with 1/shading falloff), then renders RGB with run_forward.
ScenePair generate_scene(const SceneSpec& spec, const IspParams& p);

/// Draws camera-like parameters: G gain 1, R/B gains in [1.3, 2.4], a unit-row-sum CCM with
/// moderate crosstalk, Dirichlet tone weights, sRGB gamma and mild vignetting (a0 = 1).
IspParams random_params(std::uint64_t seed, SensorLevels levels = {10, 64, 1023});

/// 64-bit mixing hash (splitmix64 finalizer); used for seed derivation and dithering.
std::uint64_t mix64(std::uint64_t x);

// ---------------------------------------------------------------------------
// Manifests ("rawkit-manifest-v1") and params ("rawkit-params-v1")

enum class Split { train, val, test1, test2 };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);  // throws SchemaError

struct ManifestEntry {
  std::string id;
  std::optional<std::string> rgb_path;
  std::optional<std::string> raw_path;
  Split split = Split::train;
  std::optional<std::array<int, 2>> frame_offset;  // x, y
  std::optional<std::array<int, 2>> frame_size;    // width, height
  BayerPattern pattern = BayerPattern::rggb;

  FrameGeometry frame() const;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  fs::path root;  // entry paths are relative to this directory
  SensorLevels levels{10, 0, 1023};
  bool aligned = true;
  std::vector<ManifestEntry> entries;

  fs::path resolve(const std::string& rel) const { return root / rel; }
  bool operator==(const DatasetManifest&) const = default;
};

inline constexpr std::string_view kManifestSchema = "rawkit-manifest-v1";
inline constexpr std::string_view kParamsSchema = "rawkit-params-v1";

/// `root` is where relative paths resolve; the document's optional "root" is joined onto it.
DatasetManifest parse_manifest(std::string_view text, const fs::path& root);
std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest load_manifest(const fs::path& path);
/// Writes the manifest; its root is recorded relative to the file's directory.
void save_manifest(const fs::path& path, const DatasetManifest& m);

IspParams parse_params(std::string_view text);  // validates; throws SchemaError / ParamError
std::string params_to_json(const IspParams& p);
IspParams load_params(const fs::path& path);
void save_params(const fs::path& path, const IspParams& p);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, std::string_view text);

}  // namespace rawkit
