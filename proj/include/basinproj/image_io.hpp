#pragma once

// PPM (P6) / PNG image I/O and a minimal CSV writer.

#include <png.h>

#include <array>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "basinproj/core.hpp"

namespace basinproj {

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw Error("short write to " + path.string());
}

inline unsigned char quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

inline bool has_extension(const std::filesystem::path& p, std::string_view ext) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return e == ext;
}

class PpmHeaderReader {
 public:
  explicit PpmHeaderReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const unsigned char ch = bytes_[pos_];
      if (ch == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(ch)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  int read_uint(const char* field) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1 << 24) throw ParseError(std::string("PPM: ") + field + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(std::string("PPM: expected ") + field, pos_);
    return static_cast<int>(value);
  }

  /// Exactly one whitespace byte separates maxval from the raster.
  void expect_single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) throw ParseError("PPM: expected whitespace", pos_);
    ++pos_;
  }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parses a binary P6 PPM with maxval 255.
inline ImageBuffer decode_ppm(std::span<const unsigned char> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ParseError("PPM: missing P6 magic", 0);
  detail::PpmHeaderReader reader(bytes.subspan(2));
  const int width = reader.read_uint("width");
  const int height = reader.read_uint("height");
  const int maxval = reader.read_uint("maxval");
  if (width <= 0 || height <= 0) throw ParseError("PPM: zero dimension", 2 + reader.offset());
  if (maxval != 255) throw ParseError("PPM: only maxval 255 is supported", 2 + reader.offset());
  reader.expect_single_space();
  const std::size_t start = 2 + reader.offset();
  const std::size_t need = static_cast<std::size_t>(width) * height * 3;
  if (bytes.size() - start < need) throw ParseError("PPM: truncated raster", bytes.size());
  std::vector<float> data(need);
  for (std::size_t i = 0; i < need; ++i) data[i] = bytes[start + i] / 255.0f;
  return ImageBuffer(height, width, std::move(data));
}

inline std::vector<unsigned char> encode_ppm(const ImageBuffer& img) {
  const std::string header = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(header.size() + img.size());
  for (const float v : img.data()) out.push_back(detail::quantize(v));
  return out;
}

inline ImageBuffer decode_png(std::span<const unsigned char> bytes) {
  static constexpr std::array<unsigned char, 8> kSig{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() < kSig.size() || !std::equal(kSig.begin(), kSig.end(), bytes.begin()))
    throw ParseError("PNG: bad signature", 0);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw ParseError(std::string("PNG: ") + image.message, kSig.size());
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> raster(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, raster.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ParseError("PNG: " + msg, kSig.size());
  }
  std::vector<float> data(raster.size());
  for (std::size_t i = 0; i < raster.size(); ++i) data[i] = raster[i] / 255.0f;
  return ImageBuffer(static_cast<int>(image.height), static_cast<int>(image.width), std::move(data));
}

inline std::vector<unsigned char> encode_png(const ImageBuffer& img) {
  std::vector<unsigned char> raster(img.size());
  for (std::size_t i = 0; i < raster.size(); ++i) raster[i] = detail::quantize(img.data()[i]);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, raster.data(), 0, nullptr))
    throw Error(std::string("PNG encode: ") + image.message);
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, raster.data(), 0, nullptr))
    throw Error(std::string("PNG encode: ") + image.message);
  out.resize(size);
  return out;
}

/// Decodes by content: PNG signature, else P6.
inline ImageBuffer decode_image(std::span<const unsigned char> bytes) {
  if (bytes.size() >= 4 && bytes[0] == 0x89 && bytes[1] == 'P') return decode_png(bytes);
  return decode_ppm(bytes);
}

inline ImageBuffer read_image(const std::filesystem::path& path) { return decode_image(detail::read_bytes(path)); }

/// Format follows the extension: .png, otherwise PPM.
inline void write_image(const ImageBuffer& img, const std::filesystem::path& path) {
  const auto bytes = detail::has_extension(path, ".png") ? encode_png(img) : encode_ppm(img);
  detail::write_bytes(path, bytes.data(), bytes.size());
}

/// Reads a mask from an image file; the weight is the mean of the three channels.
inline MaskBuffer read_mask(const std::filesystem::path& path) {
  const ImageBuffer img = read_image(path);
  std::vector<float> w(img.pixel_count());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const float s = img.data()[3 * i] + img.data()[3 * i + 1] + img.data()[3 * i + 2];
    w[i] = std::clamp(s / 3.0f, 0.0f, 1.0f);
  }
  MaskBuffer m(img.height(), img.width(), std::move(w));
  m.require_foreground();
  return m;
}

inline void write_mask(const MaskBuffer& m, const std::filesystem::path& path) {
  std::vector<float> rgb;
  rgb.reserve(m.size() * 3);
  for (const float v : m.data()) rgb.insert(rgb.end(), {v, v, v});
  write_image(ImageBuffer(m.height(), m.width(), std::move(rgb)), path);
}

/// FNV-1a over the 8-bit quantized raster (what write_image would store).
inline std::uint64_t image_checksum(const ImageBuffer& img) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const float v : img.data()) {
    h ^= detail::quantize(v);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// CSV

/// Shortest round-trip decimal representation, independent of locale.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { append_row(header); }

  template <typename... Cells>
  void row(const Cells&... cells) {
    std::vector<std::string> r{cell(cells)...};
    if (r.size() != columns_) throw ShapeError("CsvWriter: row width != header width");
    append_row(r);
  }
  void row(const std::vector<std::string>& r) {
    if (r.size() != columns_) throw ShapeError("CsvWriter: row width != header width");
    append_row(r);
  }

  const std::string& str() const noexcept { return text_; }
  std::size_t rows() const noexcept { return rows_; }

  void save(const std::filesystem::path& path) const { detail::write_bytes(path, text_.data(), text_.size()); }

  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) { return format_number(v); }
  static std::string cell(float v) { return format_number(static_cast<double>(v)); }
  template <typename I>
    requires std::is_integral_v<I>
  static std::string cell(I v) {
    return std::to_string(v);
  }

 private:
  void append_row(const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) text_ += ',';
      text_ += quote(r[i]);
    }
    text_ += '\n';
    ++rows_;
  }
  static std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (const char ch : s) {
      if (ch == '"') q += '"';
      q += ch;
    }
    return q + '"';
  }

  std::size_t columns_;
  std::size_t rows_ = 0;  // including header
  std::string text_;
};

}  // namespace basinproj
