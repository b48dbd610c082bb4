#pragma once

// Training loop for the generation loss plus the weighted teacher-student
// consistency loss, evaluation of seed areas, and multi-variant comparisons.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "usage/backbones/backbones.hpp"
#include "usage/mappings/mappings.hpp"
#include "usage/regularization/regularization.hpp"
#include "usage/seedcore/seedcore.hpp"
#include "usage/synthdata/synthdata.hpp"

namespace usage::train {

enum class OptimizerKind { adam, sgd_momentum };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 3e-3;
  double weight_decay = 1e-4;
  double momentum = 0.9;  // sgd_momentum
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct DataConfig {
  std::uint64_t seed = 1;
  std::size_t train_count = 500;
  std::size_t eval_count = 100;
  synth::SceneSpec spec;
};

struct RunConfig {
  backbone::BackboneConfig backbone;
  mappings::Mapping mapping = mappings::Mapping::usage;
  double tau1 = 1.0;
  double tau2 = 0.1;
  double lambda = 0.25;
  double background_logit = 0.0;
  bool regularization_enabled = true;
  reg::RegForm reg_form = reg::RegForm::renormalized;
  reg::AdjustmentConfig adjustment;
  OptimizerConfig optimizer;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  seed::MetricsMode metrics_mode = seed::MetricsMode::conventional;
  double background_threshold = seed::kDefaultBackgroundThreshold;
  bool evaluate_teacher = false;
  DataConfig data;

  // Throws ConfigError naming the offending dotted key.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Keys absent from `j` keep their defaults; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
};

// Paper-style defaults for a backbone: tau1 = 1 for the transformer and 50
// for the conv network.
RunConfig default_config(backbone::Kind kind);

// ---- optimizers -------------------------------------------------------------

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}
  // AdamW (decoupled weight decay) or SGD with momentum and L2 decay.
  void step(ParamSet& params, const ParamSet& grads);
  std::int64_t steps() const { return t_; }

 private:
  OptimizerConfig config_;
  ParamSet m_, v_;
  std::int64_t t_ = 0;
};

// ---- training ---------------------------------------------------------------

struct Model {
  ParamSet student;
  ParamSet teacher;
};

Model init_model(const RunConfig& config);

// Sample order for one epoch.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t count);

// Keys for the per-forward random streams.
backbone::AdjustmentRates student_rates(const RunConfig& c, const reg::Rates& r, std::uint64_t step, std::uint64_t sample);
backbone::AdjustmentRates teacher_rates(const RunConfig& c, std::uint64_t step, std::uint64_t sample);

struct BatchResult {
  double gen_loss = 0.0;  // batch means
  double reg_loss = 0.0;
  double total_loss = 0.0;
  Tensor scores;  // [B, C] student scores
  Tensor labels;  // [B, C]
  ParamSet grads;  // of the weighted objective
};

// Objective w_gen * L_gen + w_reg * L_reg averaged over the batch. The
// regularization term is evaluated only when w_reg != 0.
BatchResult batch_objective(const RunConfig& config, const Model& model, std::span<const synth::Sample* const> batch,
                            std::uint64_t step, const reg::Rates& student, double w_gen, double w_reg);

struct StepLog {
  std::int64_t step = 0;
  double gen_loss = 0.0;
  double reg_loss = 0.0;
  double total_loss = 0.0;
  double status = 0.0;
  double drop_path = 0.0;
  double dropout = 0.0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double gen_loss = 0.0;
  double reg_loss = 0.0;
  double total_loss = 0.0;
  double status = 0.0;
  double drop_path = 0.0;
  double dropout = 0.0;
};

struct RunResult {
  RunConfig config;
  Model model;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  std::optional<seed::MetricsReport> metrics;
  double seconds = 0.0;
  bool aborted = false;
  std::int64_t abort_step = -1;
  std::string abort_message;
  std::vector<std::string> warnings;

  nlohmann::ordered_json to_json() const;
};

using StepCallback = std::function<void(const StepLog&, const Model&)>;

struct TrainOptions {
  std::optional<std::size_t> max_steps;  // stop early (tests)
  StepCallback on_step;
  const synth::Dataset* eval = nullptr;  // metrics computed when set
};

RunResult train_seed_model(const RunConfig& config, const synth::Dataset& train, const TrainOptions& options = {});
RunResult train_seed_model(const RunConfig& config, Model initial, const synth::Dataset& train,
                           const TrainOptions& options);

// ---- evaluation -------------------------------------------------------------

// Seeds for the present classes of each sample from given features and
// classifier weights, scored against the 8x8 ground truth.
seed::MetricsReport evaluate_features(std::span<const FeatureMap> features, const Tensor& weights,
                                      const synth::Dataset& data, double background_threshold,
                                      seed::MetricsMode mode);
seed::MetricsReport evaluate_model(const ParamSet& params, const synth::Dataset& data, const RunConfig& config);

// Writes run.json, metrics.json (when present), student.bin and teacher.bin.
void save_run(const RunResult& result, const std::string& dir);

// ---- comparisons ------------------------------------------------------------

struct Variant {
  std::string name;
  RunConfig config;
};

// Named presets: cam, mil, mct, usage, usage-noreg, usage-fixed, usage-linear.
Variant make_variant(const std::string& preset, backbone::Kind kind, const RunConfig& base);

struct VariantRow {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<seed::MetricsReport> reports;
  std::vector<std::string> errors;
  double miou_mean = 0.0, miou_min = 0.0, miou_max = 0.0;
  double fpr_mean = 0.0, fpr_min = 0.0, fpr_max = 0.0;
  double fnr_mean = 0.0, fnr_min = 0.0, fnr_max = 0.0;
  double seconds = 0.0;
};

struct Comparison {
  std::vector<VariantRow> rows;

  const VariantRow& row(const std::string& name) const;
  std::string csv() const;
  // Formatted table plus pairwise mIoU deltas.
  std::string text() const;
  nlohmann::ordered_json to_json() const;
};

using RunCallback = std::function<void(const std::string& variant, std::uint64_t seed, const RunResult&)>;

Comparison run_comparison(const std::vector<Variant>& variants, const synth::Dataset& train,
                          const synth::Dataset& eval, const std::vector<std::uint64_t>& seeds,
                          const RunCallback& on_run = {});

}  // namespace usage::train
