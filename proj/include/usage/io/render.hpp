#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "usage/io/png.hpp"
#include "usage/numerics/tensor.hpp"
#include "usage/seedcore/seedcore.hpp"

namespace usage::io {

using Rgb = std::array<std::uint8_t, 3>;

// Viridis-like ramp through five anchors; t is clamped to [0, 1].
Rgb viridis(double t);

// 0 is black; classes follow the usual segmentation palette.
Rgb label_color(int label);

inline constexpr std::size_t kPanelTile = 256;
inline constexpr std::size_t kPanelGap = 4;

// One row of tiles: input image [3, H, W], one heatmap per class ([h * w]
// values in [0, 1]; an empty tensor draws a blank tile), the seed label map and
// the ground-truth mask. Every tile is nearest-neighbour upsampled to `tile`.
RgbImage render_panel(const Tensor& image, const std::vector<Tensor>& heatmaps, std::size_t heat_h,
                      std::size_t heat_w, const seed::SeedLabelMap& seeds, const seed::SeedLabelMap& gt,
                      std::size_t tile = kPanelTile);

}  // namespace usage::io
