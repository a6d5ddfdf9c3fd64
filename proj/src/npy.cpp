#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

#include "rawkit/dataio.hpp"

namespace rawkit {

namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr std::size_t kMagicLen = 6;
constexpr std::size_t kAlign = 64;
// numpy reserves room to grow the leading axis in place.
constexpr std::size_t kGrowthAxisDigits = 21;

std::string shape_repr(std::span<const std::size_t> shape) {
  std::string s = "(";
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k > 0) s += ", ";
    s += std::to_string(shape[k]);
  }
  if (shape.size() == 1) s += ",";
  return s + ")";
}

std::size_t element_count(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

std::string encode_npy(std::span<const std::size_t> shape, std::span<const std::uint16_t> data) {
  if (element_count(shape) != data.size()) throw DimensionError("NPY shape does not match data size");
  std::string header = "{'descr': '<u2', 'fortran_order': False, 'shape': " + shape_repr(shape) + ", }";
  if (!shape.empty()) {
    const std::size_t digits = std::to_string(shape[0]).size();
    if (digits < kGrowthAxisDigits) header.append(kGrowthAxisDigits - digits, ' ');
  }
  const std::size_t hlen = header.size() + 1;
  const std::size_t padlen = kAlign - ((kMagicLen + 2 + 2 + hlen) % kAlign);
  header.append(padlen, ' ');
  header.push_back('\n');
  if (header.size() > 0xFFFF) throw FormatError("NPY header too large for version 1.0");

  std::string out;
  out.reserve(kMagicLen + 4 + header.size() + data.size() * 2);
  out.append(kMagic, kMagicLen);
  out.push_back('\x01');
  out.push_back('\x00');
  out.push_back(static_cast<char>(header.size() & 0xFF));
  out.push_back(static_cast<char>((header.size() >> 8) & 0xFF));
  out += header;
  for (std::uint16_t v : data) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>(v >> 8));
  }
  return out;
}

NpyArray decode_npy(std::string_view bytes) {
  if (bytes.size() < kMagicLen + 4 || bytes.substr(0, kMagicLen) != std::string_view(kMagic, kMagicLen)) {
    throw FormatError("NPY magic: not an NPY file");
  }
  const auto major = static_cast<unsigned char>(bytes[6]);
  const auto minor = static_cast<unsigned char>(bytes[7]);
  if (major != 1 || minor != 0) {
    throw FormatError("NPY version: expected 1.0, got " + std::to_string(major) + "." + std::to_string(minor));
  }
  const std::size_t hlen =
      static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
  if (bytes.size() < 10 + hlen) throw FormatError("NPY header: truncated");
  const std::string header(bytes.substr(10, hlen));

  std::smatch m;
  static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  if (!std::regex_search(header, m, descr_re)) throw FormatError("NPY dtype: missing descr");
  if (m[1] != "<u2") throw FormatError("NPY dtype: expected '<u2', got '" + m[1].str() + "'");
  if (!std::regex_search(header, m, order_re)) throw FormatError("NPY fortran_order: missing");
  if (m[1] != "False") throw FormatError("NPY fortran_order: only C order is supported");
  if (!std::regex_search(header, m, shape_re)) throw FormatError("NPY shape: missing");

  NpyArray arr;
  std::stringstream ss(m[1].str());
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(' ');
    if (first == std::string::npos) continue;
    try {
      arr.shape.push_back(static_cast<std::size_t>(std::stoull(item.substr(first))));
    } catch (const std::exception&) {
      throw FormatError("NPY shape: bad dimension '" + item + "'");
    }
  }
  const std::size_t n = element_count(arr.shape);
  const std::string_view payload = bytes.substr(10 + hlen);
  if (payload.size() != n * 2) {
    throw FormatError("NPY data: expected " + std::to_string(n * 2) + " bytes, found " +
                      std::to_string(payload.size()));
  }
  arr.data.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    arr.data[k] = static_cast<std::uint16_t>(static_cast<unsigned char>(payload[2 * k]) |
                                             (static_cast<unsigned char>(payload[2 * k + 1]) << 8));
  }
  return arr;
}

void write_npy(const fs::path& path, std::span<const std::size_t> shape, std::span<const std::uint16_t> data) {
  write_text(path, encode_npy(shape, data));
}

NpyArray read_npy(const fs::path& path) { return decode_npy(read_text(path)); }

void write_array(const fs::path& path, const ImageU16& packed) {
  if (packed.channels() != 4) throw DimensionError("packed arrays must have 4 channels");
  const std::array<std::size_t, 3> shape = {static_cast<std::size_t>(packed.height()),
                                            static_cast<std::size_t>(packed.width()), 4};
  write_npy(path, shape, packed.data());
}

ImageU16 read_array(const fs::path& path) {
  NpyArray arr = read_npy(path);
  if (arr.shape.size() != 3 || arr.shape[2] != 4) {
    throw FormatError("NPY shape: expected (h, w, 4) packed array in " + path.string());
  }
  if (arr.shape[0] == 0 || arr.shape[1] == 0) throw FormatError("NPY shape: empty array in " + path.string());
  ImageU16 img(static_cast<int>(arr.shape[0]), static_cast<int>(arr.shape[1]), 4);
  std::memcpy(img.data().data(), arr.data.data(), arr.data.size() * sizeof(std::uint16_t));
  return img;
}

RawImage load_raw(const fs::path& path, SensorLevels levels) { return RawImage::create(read_array(path), levels); }

ImageU16 read_mosaic_npy(const fs::path& path) {
  NpyArray arr = read_npy(path);
  if (arr.shape.size() != 2) throw FormatError("NPY shape: expected a 2-D mosaic in " + path.string());
  ImageU16 img(static_cast<int>(arr.shape[0]), static_cast<int>(arr.shape[1]), 1);
  std::memcpy(img.data().data(), arr.data.data(), arr.data.size() * sizeof(std::uint16_t));
  return img;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace rawkit
