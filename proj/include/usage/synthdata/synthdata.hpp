#pragma once

// Synthetic multi-label scenes: colored disks, triangles and bars on smooth
// noise backgrounds, with pixel masks kept aside for seed evaluation.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "usage/numerics/tensor.hpp"
#include "usage/seedcore/seedcore.hpp"

namespace usage::synth {

// Class ids (1-based): 1 disk, 2 triangle, 3 bar.
inline constexpr std::size_t kShapeKinds = 3;

struct SceneSpec {
  std::size_t num_classes = 3;
  std::size_t image_size = 32;
  std::size_t shapes_min = 1;
  std::size_t shapes_max = 3;
  double scale_min = 0.2;  // shape extent as a fraction of the image side
  double scale_max = 0.5;
  double hue_jitter = 0.06;
  double intensity_jitter = 0.15;
  double texture_amplitude = 0.35;
  bool overlap_allowed = false;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
  // FNV-1a over the canonical JSON form, as 16 hex digits.
  std::string hash() const;
};

struct Sample {
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  Tensor image;                     // [3, 32, 32] in [0, 1]
  Tensor labels;                    // [C] of 0/1
  seed::SeedLabelMap gt_mask;       // 32x32, 0 = background
  seed::SeedLabelMap downsampled;   // 8x8 majority vote
  std::vector<std::string> warnings;
};

Sample generate_sample(std::uint64_t seed, std::uint64_t index, const SceneSpec& spec);

// Majority label per 4x4 block; background wins ties, then the lowest class id.
seed::SeedLabelMap downsample_mask(const seed::SeedLabelMap& mask, std::size_t grid);

enum class Split { train, eval };

std::string to_string(Split s);
Split split_from_string(const std::string& name);

// Eval samples use indices offset by this much, so splits never share a
// (seed, index) pair.
inline constexpr std::uint64_t kEvalIndexOffset = 1ULL << 40;

struct Dataset {
  std::uint64_t seed = 0;
  Split split = Split::train;
  SceneSpec spec;
  std::vector<Sample> samples;

  std::size_t num_classes() const { return spec.num_classes; }
  // Images per class containing it.
  std::vector<std::size_t> class_counts() const;
  nlohmann::ordered_json manifest() const;
};

Dataset generate_dataset(std::uint64_t seed, std::size_t count, const SceneSpec& spec, Split split);
Dataset dataset_from_manifest(const nlohmann::json& manifest);

// Writes manifest.json and samples.bin into `dir` (created if missing, old
// files replaced), plus PNG dumps of the first `png_count` samples.
void save_dataset(const Dataset& data, const std::string& dir, std::size_t png_count = 0);
Dataset load_dataset(const std::string& dir);

}  // namespace usage::synth
