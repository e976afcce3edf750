#include "garfont/image_io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "garfont/common.hpp"

namespace garfont {

std::vector<uint8_t> image_to_bytes(const GlyphImage& g) {
  std::vector<uint8_t> out(g.pixels.size());
  for (size_t i = 0; i < g.pixels.size(); ++i) {
    double v = g.pixels[i];
    v = v < 0 ? 0 : (v > 1 ? 1 : v);
    out[i] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

GlyphImage image_from_bytes(const std::vector<uint8_t>& bytes, int h, int w) {
  GlyphImage g;
  g.h = h;
  g.w = w;
  g.pixels.resize(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) g.pixels[i] = bytes[i] / 255.0;
  return g;
}

void write_png_gray(const std::string& path, int w, int h,
                    const std::vector<uint8_t>& pixels) {
  if (static_cast<int64_t>(pixels.size()) != int64_t(w) * h)
    throw ValidationError("write_png_gray: pixel buffer size mismatch");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DiagnosticError("cannot open for write: " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DiagnosticError("libpng write failure: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Pin the encoder configuration so identical pixels give identical bytes.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(pixels.data() +
                                             static_cast<size_t>(y) * w));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

std::vector<uint8_t> read_png_gray(const std::string& path, int* w, int* h) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DiagnosticError("cannot open for read: " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DiagnosticError("libpng read failure: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int width = png_get_image_width(png, info);
  const int height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || depth != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw ValidationError("expected 8-bit grayscale PNG: " + path);
  }
  std::vector<uint8_t> pixels(static_cast<size_t>(width) * height);
  for (int y = 0; y < height; ++y)
    png_read_row(png, pixels.data() + static_cast<size_t>(y) * width, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  *w = width;
  *h = height;
  return pixels;
}

void save_glyph_png(const std::string& path, const GlyphImage& g) {
  write_png_gray(path, g.w, g.h, image_to_bytes(g));
}

GlyphImage load_glyph_png(const std::string& path, int char_id, int style_id) {
  int w = 0, h = 0;
  auto bytes = read_png_gray(path, &w, &h);
  GlyphImage g = image_from_bytes(bytes, h, w);
  g.char_id = char_id;
  g.style_id = style_id;
  return g;
}

std::string sha256_hex(const uint8_t* data, size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int dlen = 0;
  EVP_Digest(data, len, digest, &dlen, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(dlen * 2);
  for (unsigned int i = 0; i < dlen; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(const std::string& s) {
  return sha256_hex(reinterpret_cast<const uint8_t*>(s.data()), s.size());
}

std::string sha256_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DiagnosticError("cannot open for hashing: " + path);
  std::string data((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return sha256_hex(data);
}

}  // namespace garfont
