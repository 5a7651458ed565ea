#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stow {

// Row-major binary mask; one byte per pixel holding 0 or 1.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

  [[nodiscard]] bool at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool v = true) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  [[nodiscard]] std::size_t area() const;
  [[nodiscard]] bool empty() const { return area() == 0; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

[[nodiscard]] std::size_t intersection_area(const BinaryMask& a, const BinaryMask& b);
[[nodiscard]] std::size_t union_area(const BinaryMask& a, const BinaryMask& b);
[[nodiscard]] double mask_iou(const BinaryMask& a, const BinaryMask& b);

// Uncompressed COCO-style run lengths in row-major order. Runs alternate
// 0/1 starting with the 0-run, which may have length zero.
[[nodiscard]] std::vector<std::uint32_t> rle_encode(const BinaryMask& mask);
// Throws ParseError when the runs do not sum to height * width.
[[nodiscard]] BinaryMask rle_decode(const std::vector<std::uint32_t>& counts, int height, int width);

// 8-bit interleaved RGB image.
struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  ImageU8() = default;
  ImageU8(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, 0) {}

  [[nodiscard]] std::uint8_t& at(int y, int x, int c) {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  [[nodiscard]] std::uint8_t at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  friend bool operator==(const ImageU8&, const ImageU8&) = default;
};

void write_png(const std::string& path, const ImageU8& image);
// Throws ParseError if the file is missing or not a readable PNG.
[[nodiscard]] ImageU8 read_png(const std::string& path);

}  // namespace stow
