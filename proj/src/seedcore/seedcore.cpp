#include "usage/seedcore/seedcore.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "usage/error.hpp"
#include "usage/numerics/kernels.hpp"

namespace usage {

FeatureMap::FeatureMap(std::size_t h, std::size_t w, Tensor v) : height(h), width(w), values(std::move(v)) {
  if (values.rank() != 2 || values.dim(0) != h * w) {
    throw ShapeError("FeatureMap: expected [" + std::to_string(h * w) + ", D] values, got " +
                     shape_string(values.shape()));
  }
}

}  // namespace usage

namespace usage::seed {

SeedArea compute_seed_area(const FeatureMap& features, const Tensor& weights, std::size_t class_id) {
  if (weights.rank() != 2) throw ShapeError("compute_seed_area: weights must be [C, D]");
  if (weights.dim(1) != features.dim()) {
    throw ShapeError("compute_seed_area: feature dim " + std::to_string(features.dim()) +
                     " vs weight dim " + std::to_string(weights.dim(1)));
  }
  if (class_id < 1 || class_id > weights.dim(0)) {
    throw ValueError("compute_seed_area: class id " + std::to_string(class_id) + " outside 1.." +
                     std::to_string(weights.dim(0)));
  }
  const std::size_t n = features.locations(), d = features.dim();
  const double* w = weights.data() + (class_id - 1) * d;
  SeedArea seed{class_id, features.height, features.width, Tensor(Shape{n}), Tensor(Shape{n})};
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    seed.raw[i] = kernels::active().dot(d, features.values.data() + i * d, w);
    seed.map[i] = std::max(seed.raw[i], 0.0);
    peak = std::max(peak, seed.map[i]);
  }
  if (peak > 0.0) {
    for (double& v : seed.map.values()) v /= peak;
  }
  return seed;
}

SeedLabelMap seed_label_map(std::span<const SeedArea> seeds, double background_threshold,
                            std::size_t height, std::size_t width) {
  if (!(background_threshold > 0.0 && background_threshold < 1.0)) {
    throw ValueError("seed_label_map: background threshold must lie in (0, 1)");
  }
  const std::size_t n = height * width;
  std::vector<const SeedArea*> order;
  for (const SeedArea& s : seeds) {
    if (s.height != height || s.width != width || s.map.size() != n) {
      throw ShapeError("seed_label_map: seed area for class " + std::to_string(s.class_id) +
                       " does not match the " + std::to_string(height) + "x" + std::to_string(width) + " grid");
    }
    order.push_back(&s);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const SeedArea* a, const SeedArea* b) { return a->class_id < b->class_id; });

  SeedLabelMap out{height, width, std::vector<int>(n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    double best = background_threshold;
    int label = 0;
    for (const SeedArea* s : order) {
      const double v = s->map[i];
      if (v > best || (label == 0 && v == best)) {
        best = v;
        label = static_cast<int>(s->class_id);
      }
    }
    out.labels[i] = label;
  }
  return out;
}

std::string to_string(MetricsMode mode) { return mode == MetricsMode::literal ? "literal" : "conventional"; }

MetricsMode metrics_mode_from_string(const std::string& name) {
  if (name == "conventional") return MetricsMode::conventional;
  if (name == "literal") return MetricsMode::literal;
  throw ValueError("unknown metrics mode '" + name + "' (expected conventional or literal)");
}

void ConfusionTable::add(const SeedLabelMap& pred, const SeedLabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.labels.size() != gt.labels.size()) {
    throw ShapeError("evaluate_seed_metrics: prediction and ground truth differ in shape");
  }
  const int top = static_cast<int>(num_classes());
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const int p = pred.labels[i], g = gt.labels[i];
    if (p < 0 || p > top || g < 0 || g > top) throw ValueError("evaluate_seed_metrics: label out of range");
    for (int k = 0; k <= top; ++k) {
      ConfusionCounts& c = counts_[static_cast<std::size_t>(k)];
      const bool pk = p == k, gk = g == k;
      if (pk && gk) ++c.tp;
      else if (pk) ++c.fp;
      else if (gk) ++c.fn;
      else ++c.tn;
    }
  }
}

ConfusionTable& ConfusionTable::operator+=(const ConfusionTable& other) {
  if (other.counts_.size() != counts_.size()) throw ShapeError("ConfusionTable: class count mismatch");
  for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
  return *this;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport metrics_from_counts(const ConfusionTable& table, MetricsMode mode) {
  MetricsReport r;
  r.mode = mode;
  r.counts = table.counts();
  const std::size_t classes = table.num_classes();
  double iou_sum = 0.0;
  for (std::size_t k = 0; k <= classes; ++k) {
    const ConfusionCounts& c = r.counts[k];
    const std::uint64_t union_ = c.tp + c.fp + c.fn;
    const double iou = union_ == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(union_);
    iou_sum += iou;
    if (k == 0) {
      r.background_iou = iou;
      continue;
    }
    const std::uint64_t fpr_den = c.tp + c.fp;
    const std::uint64_t fnr_den = mode == MetricsMode::conventional ? c.tp + c.fn : c.tp + c.fp + c.fn;
    if (fpr_den == 0) r.flags.push_back("class " + std::to_string(k) + ": fpr denominator is zero");
    if (fnr_den == 0) r.flags.push_back("class " + std::to_string(k) + ": fnr denominator is zero");
    r.per_class.push_back(ClassMetrics{k, iou, ratio(c.fp, fpr_den), ratio(c.fn, fnr_den)});
  }
  r.miou = iou_sum / static_cast<double>(classes + 1);
  if (classes > 0) {
    for (const ClassMetrics& m : r.per_class) {
      r.mean_fpr += m.fpr;
      r.mean_fnr += m.fnr;
    }
    r.mean_fpr /= static_cast<double>(classes);
    r.mean_fnr /= static_cast<double>(classes);
  }
  return r;
}

MetricsReport evaluate_seed_metrics(const SeedLabelMap& pred, const SeedLabelMap& gt, std::size_t num_classes,
                                    MetricsMode mode) {
  ConfusionTable table(num_classes);
  table.add(pred, gt);
  return metrics_from_counts(table, mode);
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = to_string(mode);
  j["miou"] = miou;
  j["mean_fpr"] = mean_fpr;
  j["mean_fnr"] = mean_fnr;
  j["background_iou"] = background_iou;
  j["per_class"] = nlohmann::ordered_json::array();
  for (const ClassMetrics& m : per_class) {
    j["per_class"].push_back({{"class_id", m.class_id}, {"iou", m.iou}, {"fpr", m.fpr}, {"fnr", m.fnr}});
  }
  j["counts"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < counts.size(); ++k) {
    const ConfusionCounts& c = counts[k];
    j["counts"].push_back({{"class_id", k}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}});
  }
  j["flags"] = flags;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::ordered_json& j) {
  MetricsReport r;
  r.mode = metrics_mode_from_string(j.at("mode").get<std::string>());
  r.miou = j.at("miou").get<double>();
  r.mean_fpr = j.at("mean_fpr").get<double>();
  r.mean_fnr = j.at("mean_fnr").get<double>();
  r.background_iou = j.value("background_iou", 0.0);
  for (const auto& m : j.at("per_class")) {
    r.per_class.push_back(ClassMetrics{m.at("class_id").get<std::size_t>(), m.at("iou").get<double>(),
                                       m.at("fpr").get<double>(), m.at("fnr").get<double>()});
  }
  for (const auto& c : j.at("counts")) {
    r.counts.push_back(ConfusionCounts{c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(),
                                       c.at("fn").get<std::uint64_t>(), c.at("tn").get<std::uint64_t>()});
  }
  if (j.contains("flags")) r.flags = j.at("flags").get<std::vector<std::string>>();
  return r;
}

std::string MetricsReport::csv_header() { return "mode,miou,mean_fpr,mean_fnr,background_iou"; }

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << to_string(mode) << ',' << miou << ',' << mean_fpr << ',' << mean_fnr << ',' << background_iou;
  return os.str();
}

}  // namespace usage::seed
