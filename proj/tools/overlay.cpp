#include <algorithm>
#include <cmath>
#include <string>

#include "pipeline.hpp"

namespace stow::cli {

namespace {

// 3x5 digit glyphs, one row per entry, most significant bit on the left.
constexpr std::uint8_t kDigits[10][5] = {
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
};

void put(ImageU8& img, int y, int x, std::array<std::uint8_t, 3> c) {
  if (y < 0 || x < 0 || y >= img.height || x >= img.width) return;
  for (int k = 0; k < 3; ++k) img.at(y, x, k) = c[k];
}

void draw_label(ImageU8& img, int id, int cy, int cx) {
  const std::string text = std::to_string(id);
  const int w = static_cast<int>(text.size()) * 4 - 1;
  const int x0 = cx - w / 2, y0 = cy - 2;
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < text.size(); ++i) {
      const auto& glyph = kDigits[text[i] - '0'];
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 3; ++c) {
          if (!((glyph[r] >> (2 - c)) & 1)) continue;
          const int y = y0 + r, x = x0 + static_cast<int>(i) * 4 + c;
          if (pass == 0) {
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) put(img, y + dy, x + dx, {0, 0, 0});
          } else {
            put(img, y, x, {255, 255, 255});
          }
        }
    }
  }
}

}  // namespace

std::array<std::uint8_t, 3> track_color(int id) {
  // Golden-ratio hue walk over a hashed id.
  std::uint32_t h = static_cast<std::uint32_t>(id) * 2654435761u;
  h ^= h >> 16;
  const double hue = std::fmod(static_cast<double>(h % 1000003u) / 1000003.0 + 0.618033988749895 * id, 1.0);
  const double s = 0.85, v = 0.95;
  const double f = hue * 6.0;
  const int sector = static_cast<int>(f) % 6;
  const double frac = f - std::floor(f);
  const double p = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
  double r = v, g = t, b = p;
  switch (sector) {
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    case 5: r = v; g = p; b = q; break;
    default: break;
  }
  auto u8 = [](double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
  return {u8(r), u8(g), u8(b)};
}

ImageU8 render_overlay(const ImageU8& image, const std::vector<TrackPrediction>& tracks, std::size_t frame) {
  ImageU8 out = image;
  struct Label {
    int id, y, x;
  };
  std::vector<Label> labels;
  for (const auto& t : tracks) {
    if (frame >= t.masks.size() || t.masks[frame].empty()) continue;
    const BinaryMask& m = t.masks[frame];
    const auto color = track_color(t.id);
    long sy = 0, sx = 0, n = 0;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        if (!m.at(y, x)) continue;
        const bool edge = y == 0 || x == 0 || y == m.height - 1 || x == m.width - 1 || !m.at(y - 1, x) ||
                          !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
        for (int k = 0; k < 3; ++k)
          out.at(y, x, k) = edge ? color[k] : static_cast<std::uint8_t>((image.at(y, x, k) + color[k] + 1) / 2);
        sy += y;
        sx += x;
        ++n;
      }
    labels.push_back({t.id, static_cast<int>(sy / n), static_cast<int>(sx / n)});
  }
  for (const auto& l : labels) draw_label(out, l.id, l.y, l.x);
  return out;
}

}  // namespace stow::cli
