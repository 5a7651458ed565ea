#include "stow/common/mask.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <algorithm>
#include <numeric>

#include "stow/common/errors.hpp"

namespace stow {

std::size_t BinaryMask::area() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

namespace {

void require_same_extent(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError("mask extents differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

}  // namespace

std::size_t intersection_area(const BinaryMask& a, const BinaryMask& b) {
  require_same_extent(a, b);
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) n += (a.bits[i] & b.bits[i]) != 0;
  return n;
}

std::size_t union_area(const BinaryMask& a, const BinaryMask& b) {
  require_same_extent(a, b);
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) n += (a.bits[i] | b.bits[i]) != 0;
  return n;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  const std::size_t u = union_area(a, b);
  if (u == 0) return 0.0;
  return static_cast<double>(intersection_area(a, b)) / static_cast<double>(u);
}

std::vector<std::uint32_t> rle_encode(const BinaryMask& mask) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (std::uint8_t b : mask.bits) {
    const std::uint8_t v = b != 0 ? 1 : 0;
    if (v != current) {
      counts.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
  }
  counts.push_back(run);
  return counts;
}

BinaryMask rle_decode(const std::vector<std::uint32_t>& counts, int height, int width) {
  if (height <= 0 || width <= 0) throw ParseError("RLE decode: non-positive extent");
  const std::size_t total = static_cast<std::size_t>(height) * width;
  const std::size_t sum = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  if (sum != total) {
    throw ParseError("RLE length mismatch: runs sum to " + std::to_string(sum) + ", expected " +
                     std::to_string(total));
  }
  BinaryMask mask(height, width);
  std::size_t pos = 0;
  std::uint8_t value = 0;
  for (std::uint32_t run : counts) {
    std::fill_n(mask.bits.begin() + static_cast<std::ptrdiff_t>(pos), run, value);
    pos += run;
    value ^= 1;
  }
  return mask;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::string& path, const ImageU8& image) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot open for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: cannot allocate write state");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: failed writing " + path);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed header; no timestamps so identical images produce identical files.
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    auto* row = const_cast<png_bytep>(image.rgb.data() + static_cast<std::size_t>(y) * image.width * 3);
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImageU8 read_png(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ParseError("missing image file: " + path);
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw ParseError("not a PNG file: " + path);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("libpng: cannot allocate read state");
  }
  ImageU8 image;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("corrupt PNG: " + path);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  image = ImageU8(static_cast<int>(png_get_image_height(png, info)), static_cast<int>(png_get_image_width(png, info)));
  for (int y = 0; y < image.height; ++y) {
    png_read_row(png, image.rgb.data() + static_cast<std::size_t>(y) * image.width * 3, nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

}  // namespace stow
