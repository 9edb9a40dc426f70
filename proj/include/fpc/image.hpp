// Image loading and saving: binary/ASCII PGM and PPM, plus PNG via libpng.
// Pixels are scaled to [0,1]; color sources collapse to gray with Rec.601
// luma; resizing shares the engine-wide bilinear kernel.
#pragma once

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "fpc/common.hpp"
#include "fpc/tensor.hpp"

namespace fpc {

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;  // [0,1], row-major
};

namespace detail {

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  std::string tail = s.substr(s.size() - suffix.size());
  for (auto& c : tail) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return tail == suffix;
}

inline int next_pnm_token(std::istream& in, const std::string& path) {
  // Skips whitespace and '#' comments.
  for (;;) {
    int c = in.peek();
    if (c == EOF) throw data_error("corrupt netpbm file '" + path + "': unexpected EOF");
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    if (c == '#') {
      std::string junk;
      std::getline(in, junk);
      continue;
    }
    break;
  }
  int v;
  if (!(in >> v)) throw data_error("corrupt netpbm file '" + path + "': bad integer");
  return v;
}

inline GrayImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open image '" + path + "'");
  char p, kind;
  in.get(p);
  in.get(kind);
  if (p != 'P' || (kind != '2' && kind != '3' && kind != '5' && kind != '6'))
    throw data_error("unsupported netpbm magic in '" + path + "'");
  const bool color = kind == '3' || kind == '6';
  const bool binary = kind == '5' || kind == '6';
  const int w = next_pnm_token(in, path);
  const int h = next_pnm_token(in, path);
  const int maxval = next_pnm_token(in, path);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
    throw data_error("corrupt netpbm header in '" + path + "'");
  GrayImage img;
  img.height = h;
  img.width = w;
  img.pixels.resize(static_cast<std::size_t>(h) * w);
  const int samples = color ? 3 : 1;
  const std::int64_t count = static_cast<std::int64_t>(h) * w * samples;
  std::vector<double> raw(static_cast<std::size_t>(count));
  if (binary) {
    in.get();  // single whitespace after maxval
    const int bytes_per = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(static_cast<std::size_t>(count) * bytes_per);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
      throw data_error("corrupt netpbm file '" + path + "': truncated pixel data");
    for (std::int64_t i = 0; i < count; ++i)
      raw[static_cast<std::size_t>(i)] =
          bytes_per == 1 ? buf[static_cast<std::size_t>(i)]
                         : buf[static_cast<std::size_t>(2 * i)] * 256.0 +
                               buf[static_cast<std::size_t>(2 * i + 1)];
  } else {
    for (std::int64_t i = 0; i < count; ++i)
      raw[static_cast<std::size_t>(i)] = next_pnm_token(in, path);
  }
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    double v = color ? 0.299 * raw[3 * i] + 0.587 * raw[3 * i + 1] + 0.114 * raw[3 * i + 2]
                     : raw[i];
    img.pixels[i] = v / maxval;
  }
  return img;
}

inline GrayImage read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw data_error("cannot read PNG '" + path + "': " + png.message);
  png.format = PNG_FORMAT_GRAY;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw data_error("corrupt PNG '" + path + "': " + msg);
  }
  GrayImage img;
  img.height = static_cast<int>(png.height);
  img.width = static_cast<int>(png.width);
  img.pixels.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] / 255.0;
  return img;
}

inline unsigned char to_byte(double v) {
  long b = std::lround(v * 255.0);
  if (b < 0) b = 0;
  if (b > 255) b = 255;
  return static_cast<unsigned char>(b);
}

}  // namespace detail

inline GrayImage read_gray_image(const std::string& path) {
  if (detail::has_suffix(path, ".png")) return detail::read_png(path);
  if (detail::has_suffix(path, ".pgm") || detail::has_suffix(path, ".ppm") ||
      detail::has_suffix(path, ".pnm"))
    return detail::read_pnm(path);
  throw data_error("unsupported image format '" + path + "' (expected .png/.pgm/.ppm)");
}

// [channels, R, R] in [0,1]; target_resolution 0 keeps the native size
// (bit-exact pixel values, no resampling).
template <class T>
Tensor<T> load_image(const std::string& path, int target_resolution, int channels) {
  GrayImage img = read_gray_image(path);
  Tensor<T> native({1, img.height, img.width});
  T* p = native.mut();
  for (std::size_t i = 0; i < img.pixels.size(); ++i) p[i] = static_cast<T>(img.pixels[i]);
  Tensor<T> sized = target_resolution > 0
                        ? bilinear_resize(native, target_resolution, target_resolution)
                        : native;
  if (channels == 1) return sized;
  Tensor<T> out({channels, sized.dim(1), sized.dim(2)});
  const std::int64_t plane = sized.numel();
  for (int c = 0; c < channels; ++c)
    std::copy(sized.data(), sized.data() + plane, out.mut() + c * plane);
  return out;
}

// gray: [H,W] values in [0,1], written as 8-bit.
inline void save_pgm(const std::string& path, const std::vector<double>& gray, int h, int w) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw data_error("cannot write image '" + path + "'");
    out << "P5\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> buf(gray.size());
    for (std::size_t i = 0; i < gray.size(); ++i) buf[i] = detail::to_byte(gray[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw data_error("cannot rename temp image into '" + path + "'");
}

// rgb: H*W*3 bytes.
inline void save_ppm(const std::string& path, const std::vector<unsigned char>& rgb, int h,
                     int w) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw data_error("cannot write image '" + path + "'");
    out << "P6\n" << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()),
              static_cast<std::streamsize>(rgb.size()));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw data_error("cannot rename temp image into '" + path + "'");
}

inline void save_png_gray(const std::string& path, const std::vector<double>& gray, int h,
                          int w) {
  std::vector<unsigned char> buf(gray.size());
  for (std::size_t i = 0; i < gray.size(); ++i) buf[i] = detail::to_byte(gray[i]);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr))
    throw data_error("cannot write PNG '" + path + "': " + std::string(png.message));
}

inline void save_png_rgb(const std::string& path, const std::vector<unsigned char>& rgb, int h,
                         int w) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw data_error("cannot write PNG '" + path + "': " + std::string(png.message));
}

// Extension-dispatched writers: .png or netpbm fallback.
inline void save_gray_image(const std::string& path, const std::vector<double>& gray, int h,
                            int w) {
  if (detail::has_suffix(path, ".png")) return save_png_gray(path, gray, h, w);
  return save_pgm(path, gray, h, w);
}

inline void save_rgb_image(const std::string& path, const std::vector<unsigned char>& rgb,
                           int h, int w) {
  if (detail::has_suffix(path, ".png")) return save_png_rgb(path, rgb, h, w);
  return save_ppm(path, rgb, h, w);
}

}  // namespace fpc
