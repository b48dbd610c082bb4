#include "usage/io/render.hpp"

#include <algorithm>
#include <cmath>

#include "usage/error.hpp"

namespace usage::io {

Rgb viridis(double t) {
  static constexpr double anchors[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  if (!(t > 0.0)) t = 0.0;  // also NaN
  t = std::min(t, 1.0) * 4.0;
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(t), 3);
  const double f = t - static_cast<double>(i);
  Rgb out{};
  for (std::size_t c = 0; c < 3; ++c) {
    out[c] = static_cast<std::uint8_t>(std::lround(anchors[i][c] + f * (anchors[i + 1][c] - anchors[i][c])));
  }
  return out;
}

Rgb label_color(int label) {
  Rgb out{0, 0, 0};
  unsigned v = static_cast<unsigned>(std::max(label, 0));
  for (int shift = 7; v > 0; --shift, v >>= 3) {
    out[0] |= static_cast<std::uint8_t>((v & 1u) << shift);
    out[1] |= static_cast<std::uint8_t>(((v >> 1) & 1u) << shift);
    out[2] |= static_cast<std::uint8_t>(((v >> 2) & 1u) << shift);
  }
  return out;
}

namespace {

template <class Pixel>
void draw_tile(RgbImage& img, std::size_t x0, std::size_t tile, std::size_t h, std::size_t w, Pixel pixel) {
  for (std::size_t y = 0; y < tile; ++y) {
    for (std::size_t x = 0; x < tile; ++x) {
      const Rgb c = pixel(y * h / tile, x * w / tile);
      std::copy(c.begin(), c.end(), img.at(x0 + x, y));
    }
  }
}

void check_map(const seed::SeedLabelMap& m, const char* what) {
  if (m.labels.size() != m.height * m.width || m.height == 0) throw ShapeError(std::string("render_panel: bad ") + what);
}

}  // namespace

RgbImage render_panel(const Tensor& image, const std::vector<Tensor>& heatmaps, std::size_t heat_h,
                      std::size_t heat_w, const seed::SeedLabelMap& seeds, const seed::SeedLabelMap& gt,
                      std::size_t tile) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("render_panel: image must be [3, H, W]");
  if (tile == 0) throw ValueError("render_panel: tile must be positive");
  for (const Tensor& h : heatmaps) {
    if (h.size() != 0 && h.size() != heat_h * heat_w) throw ShapeError("render_panel: heatmap size mismatch");
  }
  check_map(seeds, "seed map");
  check_map(gt, "ground truth");
  const std::size_t tiles = heatmaps.size() + 3;
  RgbImage img(tiles * tile + (tiles - 1) * kPanelGap, tile);
  std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{255});
  std::size_t x0 = 0;
  const std::size_t ih = image.dim(1), iw = image.dim(2);
  draw_tile(img, x0, tile, ih, iw, [&](std::size_t y, std::size_t x) {
    Rgb c{};
    for (std::size_t k = 0; k < 3; ++k) {
      const double v = std::clamp(image.data()[(k * ih + y) * iw + x], 0.0, 1.0);
      c[k] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return c;
  });
  for (const Tensor& h : heatmaps) {
    x0 += tile + kPanelGap;
    if (h.size() == 0) {
      draw_tile(img, x0, tile, 1, 1, [](std::size_t, std::size_t) { return Rgb{40, 40, 40}; });
    } else {
      draw_tile(img, x0, tile, heat_h, heat_w, [&](std::size_t y, std::size_t x) { return viridis(h[y * heat_w + x]); });
    }
  }
  for (const seed::SeedLabelMap* m : {&seeds, &gt}) {
    x0 += tile + kPanelGap;
    draw_tile(img, x0, tile, m->height, m->width,
              [m](std::size_t y, std::size_t x) { return label_color(m->labels[y * m->width + x]); });
  }
  return img;
}

}  // namespace usage::io
