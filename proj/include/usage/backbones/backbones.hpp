#pragma once

// Toy feature extractors mapping a 3x32x32 image to an 8x8xD feature map.
//
//   conv        : 3x3 stride-2 stem (D/2 channels), 3x3 stride-2 conv to D
//                 channels, then depth-2 residual 3x3 blocks x + relu(conv(x)).
//                 Local receptive field.
//   transformer : 4x4 patch embedding plus learned positions, depth pre-norm
//                 blocks (multi-head self-attention, GELU MLP), final norm.
//                 Every token attends to every other.
//
// Drop-path gates each residual branch per forward pass; dropout masks
// activations. Both use inverted scaling.

#include <cstdint>
#include <string>
#include <vector>

#include "usage/numerics/ops.hpp"
#include "usage/numerics/params.hpp"
#include "usage/seedcore/seedcore.hpp"

namespace usage::backbone {

enum class Kind { conv, transformer };

std::string to_string(Kind k);
Kind kind_from_string(const std::string& name);

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kGridSize = 8;

struct BackboneConfig {
  Kind kind = Kind::transformer;
  std::size_t feature_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;       // transformer only
  std::size_t patch_size = 4;  // transformer only
  std::size_t mlp_ratio = 2;   // transformer only

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Parameter count implied by the layer shapes.
std::size_t parameter_count(const BackboneConfig& config);

// Adds the backbone tensors (prefixed "conv." or "vit.") to `params`.
void init_backbone(ParamSet& params, const BackboneConfig& config, std::uint64_t seed);
ParamSet init_backbone(const BackboneConfig& config, std::uint64_t seed);

enum class Mode { train, eval };

// Rates and the random stream for one forward pass. The stream is keyed by
// (seed, step, sample) plus an internal per-site layer counter.
struct AdjustmentRates {
  double drop_path = 0.0;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t sample = 0;
};

// image: [3, 32, 32] in [0, 1]. Returns [64, D] features, location row * 8 + col.
ad::Var forward_features(const ParamVars& params, const Tensor& image, const BackboneConfig& config,
                         const AdjustmentRates& rates, Mode mode);

// Eval-mode forward without gradients.
FeatureMap extract_features(const ParamSet& params, const Tensor& image, const BackboneConfig& config);

// ---- tensor container ------------------------------------------------------
// Little-endian: "USGE", u32 version, then records until end of file: u32
// name length, name bytes, u64 rank, u64 dims, f64 values.

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

void write_container(const std::string& path, const std::vector<NamedTensor>& records);
std::vector<NamedTensor> read_container(const std::string& path);

void save_params(const std::string& path, const ParamSet& params);
ParamSet load_params(const std::string& path);

}  // namespace usage::backbone
