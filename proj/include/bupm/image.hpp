#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bupm/tensor.hpp"

namespace bupm {

// Raised for unreadable, unsupported, or corrupt image/manifest files.
class DecodeError : public std::runtime_error {
 public:
  DecodeError(const std::string& path, const std::string& reason)
      : std::runtime_error(path + ": " + reason) {}
};

// HWC row-major, values in [0,1]. channels is 1 (gray) or 3 (RGB).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> values;

  static Image create(int height, int width, int channels, double fill = 0.0) {
    if (height < 1 || width < 1 || (channels != 1 && channels != 3)) {
      throw std::invalid_argument("image: extents must be >= 1 and channels 1 or 3");
    }
    Image img;
    img.height = height;
    img.width = width;
    img.channels = channels;
    img.values.assign(static_cast<std::size_t>(height) * width * channels, fill);
    return img;
  }

  double& at(int y, int x, int c) {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

namespace detail {

inline std::uint8_t to_byte(double v) {
  v = std::min(std::max(v, 0.0), 1.0);
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

inline double from_byte(std::uint8_t b) { return b / 255.0; }

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError(path, "cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DecodeError(path, "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DecodeError(path, "write failed");
}

// ---- portable pixmap / graymap (binary variants) ----

inline void skip_pnm_space(const std::vector<std::uint8_t>& b, std::size_t& i,
                           const std::string& path) {
  while (i < b.size()) {
    if (b[i] == '#') {
      while (i < b.size() && b[i] != '\n') ++i;
    } else if (std::isspace(b[i])) {
      ++i;
    } else {
      return;
    }
  }
  throw DecodeError(path, "truncated header");
}

inline int read_pnm_int(const std::vector<std::uint8_t>& b, std::size_t& i,
                        const std::string& path) {
  skip_pnm_space(b, i, path);
  if (i >= b.size() || !std::isdigit(b[i])) throw DecodeError(path, "malformed header integer");
  long v = 0;
  while (i < b.size() && std::isdigit(b[i])) {
    v = v * 10 + (b[i] - '0');
    if (v > 1 << 28) throw DecodeError(path, "header integer out of range");
    ++i;
  }
  return static_cast<int>(v);
}

inline Image decode_pnm(const std::vector<std::uint8_t>& b, const std::string& path) {
  if (b.size() < 2) throw DecodeError(path, "truncated file");
  const int channels = b[1] == '6' ? 3 : 1;
  std::size_t i = 2;
  const int width = read_pnm_int(b, i, path);
  const int height = read_pnm_int(b, i, path);
  const int maxval = read_pnm_int(b, i, path);
  if (width < 1 || height < 1) throw DecodeError(path, "bad extents");
  if (maxval != 255) throw DecodeError(path, "only maxval 255 supported");
  ++i;  // single whitespace byte after maxval
  const std::size_t need = static_cast<std::size_t>(width) * height * channels;
  if (b.size() - i < need) throw DecodeError(path, "truncated pixel data");
  Image img = Image::create(height, width, channels);
  for (std::size_t p = 0; p < need; ++p) img.values[p] = from_byte(b[i + p]);
  return img;
}

inline std::vector<std::uint8_t> encode_pnm(const Image& img) {
  std::string header = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                       std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.values.size());
  for (double v : img.values) out.push_back(to_byte(v));
  return out;
}

// ---- 8-bit gray/RGB non-interlaced subset of the standard raster format ----

inline void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32_be(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void append_png_chunk(std::vector<std::uint8_t>& out, const char type[5],
                             const std::vector<std::uint8_t>& data) {
  put_u32_be(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0, out.data() + type_at, static_cast<uInt>(4 + data.size()));
  put_u32_be(out, static_cast<std::uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

inline Image decode_png(const std::vector<std::uint8_t>& b, const std::string& path) {
  static const std::uint8_t kSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (b.size() < 8 || std::memcmp(b.data(), kSig, 8) != 0) throw DecodeError(path, "bad signature");
  std::size_t i = 8;
  int width = 0, height = 0, channels = 0;
  bool saw_header = false, saw_end = false;
  std::vector<std::uint8_t> compressed;
  while (i + 12 <= b.size()) {
    const std::uint32_t len = get_u32_be(b.data() + i);
    if (i + 12 + len > b.size()) throw DecodeError(path, "truncated chunk");
    const char* type = reinterpret_cast<const char*>(b.data() + i + 4);
    const std::uint8_t* data = b.data() + i + 8;
    const std::uint32_t stored_crc = get_u32_be(data + len);
    const auto crc = crc32(0, b.data() + i + 4, static_cast<uInt>(4 + len));
    if (static_cast<std::uint32_t>(crc) != stored_crc) throw DecodeError(path, "chunk crc mismatch");
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw DecodeError(path, "bad header chunk");
      width = static_cast<int>(get_u32_be(data));
      height = static_cast<int>(get_u32_be(data + 4));
      const int bit_depth = data[8], color_type = data[9];
      const int interlace = data[12];
      if (bit_depth != 8) throw DecodeError(path, "only 8-bit depth supported");
      if (color_type == 0) {
        channels = 1;
      } else if (color_type == 2) {
        channels = 3;
      } else {
        throw DecodeError(path, "only gray and rgb color types supported");
      }
      if (interlace != 0) throw DecodeError(path, "interlaced images not supported");
      if (width < 1 || height < 1) throw DecodeError(path, "bad extents");
      saw_header = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      compressed.insert(compressed.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
      break;
    }
    i += 12 + len;
  }
  if (!saw_header || !saw_end) throw DecodeError(path, "missing required chunk");

  const std::size_t row_bytes = static_cast<std::size_t>(width) * channels;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(height) * (1 + row_bytes));
  {
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw DecodeError(path, "inflate init failed");
    zs.next_in = const_cast<Bytef*>(compressed.data());
    zs.avail_in = static_cast<uInt>(compressed.size());
    zs.next_out = raw.data();
    zs.avail_out = static_cast<uInt>(raw.size());
    const int rc = inflate(&zs, Z_FINISH);
    const bool ok = rc == Z_STREAM_END && zs.avail_out == 0;
    inflateEnd(&zs);
    if (!ok) throw DecodeError(path, "pixel data corrupt or wrong length");
  }

  Image img = Image::create(height, width, channels);
  std::vector<std::uint8_t> prev(row_bytes, 0), cur(row_bytes);
  const int bpp = channels;
  for (int y = 0; y < height; ++y) {
    const std::uint8_t* line = raw.data() + static_cast<std::size_t>(y) * (1 + row_bytes);
    const int filter = line[0];
    const std::uint8_t* src = line + 1;
    for (std::size_t x = 0; x < row_bytes; ++x) {
      const int left = x >= static_cast<std::size_t>(bpp) ? cur[x - bpp] : 0;
      const int up = prev[x];
      const int ul = x >= static_cast<std::size_t>(bpp) ? prev[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += up; break;
        case 3: v += (left + up) / 2; break;
        case 4: v += paeth(left, up, ul); break;
        default: throw DecodeError(path, "unknown scanline filter");
      }
      cur[x] = static_cast<std::uint8_t>(v & 0xff);
    }
    for (std::size_t x = 0; x < row_bytes; ++x) {
      img.values[static_cast<std::size_t>(y) * row_bytes + x] = from_byte(cur[x]);
    }
    std::swap(prev, cur);
  }
  return img;
}

inline std::vector<std::uint8_t> encode_png(const Image& img, const std::string& path) {
  const std::size_t row_bytes = static_cast<std::size_t>(img.width) * img.channels;
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (1 + row_bytes));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    for (std::size_t x = 0; x < row_bytes; ++x) {
      raw.push_back(to_byte(img.values[static_cast<std::size_t>(y) * row_bytes + x]));
    }
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) !=
      Z_OK) {
    throw DecodeError(path, "compression failed");
  }
  compressed.resize(bound);

  std::vector<std::uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<std::uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);                                 // bit depth
  ihdr.push_back(img.channels == 3 ? 2 : 0);         // color type
  ihdr.push_back(0);                                 // compression
  ihdr.push_back(0);                                 // filter method
  ihdr.push_back(0);                                 // no interlace
  append_png_chunk(out, "IHDR", ihdr);
  append_png_chunk(out, "IDAT", compressed);
  append_png_chunk(out, "IEND", {});
  return out;
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

inline Image load_image(const std::string& path) {
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  if (bytes.size() >= 8 && bytes[0] == 137 && bytes[1] == 'P') {
    return detail::decode_png(bytes, path);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return detail::decode_pnm(bytes, path);
  }
  throw DecodeError(path, "unsupported image format");
}

inline void save_image(const Image& img, const std::string& path) {
  if (detail::has_suffix(path, ".png")) {
    detail::write_file(path, detail::encode_png(img, path));
  } else if (detail::has_suffix(path, ".ppm") || detail::has_suffix(path, ".pgm")) {
    if (detail::has_suffix(path, ".ppm") != (img.channels == 3)) {
      throw std::invalid_argument(path + ": extension does not match channel count");
    }
    detail::write_file(path, detail::encode_pnm(img));
  } else {
    throw std::invalid_argument(path + ": unsupported output extension");
  }
}

// Bilinear resampling on pixel centers; the identity size is an exact no-op.
inline Image resize_bilinear(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: extents must be >= 1");
  if (out_h == img.height && out_w == img.width) return img;
  Image out = Image::create(out_h, out_w, img.channels);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = img.at(y0, x0, c) * (1.0 - wx) + img.at(y0, x1, c) * wx;
        const double bot = img.at(y1, x0, c) * (1.0 - wx) + img.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

// Resize for a network whose spatial extents must divide by `factor`.
inline Image resize_for_stride(const Image& img, int out_h, int out_w, int factor) {
  if (out_h % factor != 0 || out_w % factor != 0) {
    throw std::invalid_argument("resize: target extents must be multiples of " +
                                std::to_string(factor));
  }
  return resize_bilinear(img, out_h, out_w);
}

inline Tensor to_tensor(const Image& img) {
  return Tensor::from_data({img.height, img.width, img.channels}, img.values);
}

inline Image gray_to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  Image out = Image::create(img.height, img.width, 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, 0);
    }
  }
  return out;
}

}  // namespace bupm
