#pragma once

// Seed-area extraction from a trained classifier and the evaluation metrics
// (IoU, false positive rate, false negative rate) used to diagnose over- and
// under-activation.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "usage/numerics/tensor.hpp"

namespace usage {

// Dense features on an h x w grid, stored as [h * w, dim] with location
// index row * w + col.
struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor values;

  FeatureMap() = default;
  FeatureMap(std::size_t height, std::size_t width, Tensor values);

  std::size_t locations() const { return height * width; }
  std::size_t dim() const { return values.dim(1); }
};

}  // namespace usage

namespace usage::seed {

struct SeedArea {
  std::size_t class_id = 0;  // 1-based foreground class
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor raw;   // [h * w] activation values before clamping
  Tensor map;   // [h * w] clamped at zero and scaled to max 1
};

// Per-location labels; 0 is background, c in 1..C a foreground class.
struct SeedLabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;

  friend bool operator==(const SeedLabelMap&, const SeedLabelMap&) = default;
};

// `weights` is [num_classes, dim].
SeedArea compute_seed_area(const FeatureMap& features, const Tensor& weights, std::size_t class_id);

inline constexpr double kDefaultBackgroundThreshold = 0.4;

// Per-location argmax over {threshold as the background score} and the seed
// values of the given classes. Foreground wins ties against background; among
// classes the lowest id wins.
SeedLabelMap seed_label_map(std::span<const SeedArea> seeds, double background_threshold,
                            std::size_t height, std::size_t width);

enum class MetricsMode { conventional, literal };

std::string to_string(MetricsMode mode);
MetricsMode metrics_mode_from_string(const std::string& name);

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// One-vs-rest counts for labels 0..num_classes (index 0 = background).
class ConfusionTable {
 public:
  explicit ConfusionTable(std::size_t num_classes) : counts_(num_classes + 1) {}

  void add(const SeedLabelMap& pred, const SeedLabelMap& gt);
  ConfusionTable& operator+=(const ConfusionTable& other);

  std::size_t num_classes() const { return counts_.size() - 1; }
  const std::vector<ConfusionCounts>& counts() const { return counts_; }

 private:
  std::vector<ConfusionCounts> counts_;
};

struct ClassMetrics {
  std::size_t class_id = 0;
  double iou = 0.0;
  double fpr = 0.0;
  double fnr = 0.0;
};

struct MetricsReport {
  MetricsMode mode = MetricsMode::conventional;
  std::vector<ClassMetrics> per_class;  // foreground classes 1..C
  double background_iou = 0.0;
  double miou = 0.0;      // over background and all foreground classes
  double mean_fpr = 0.0;  // over foreground classes
  double mean_fnr = 0.0;
  std::vector<ConfusionCounts> counts;  // index 0 = background
  std::vector<std::string> flags;       // zero-denominator notes

  nlohmann::ordered_json to_json() const;
  static MetricsReport from_json(const nlohmann::ordered_json& j);
  static std::string csv_header();
  std::string csv_row() const;
};

MetricsReport metrics_from_counts(const ConfusionTable& table, MetricsMode mode);

MetricsReport evaluate_seed_metrics(const SeedLabelMap& pred, const SeedLabelMap& gt,
                                    std::size_t num_classes,
                                    MetricsMode mode = MetricsMode::conventional);

}  // namespace usage::seed
