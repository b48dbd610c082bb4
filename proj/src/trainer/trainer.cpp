#include "usage/trainer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "usage/error.hpp"
#include "usage/numerics/rng.hpp"

namespace usage::train {

using ad::Var;

// ---- optimizer --------------------------------------------------------------

void Optimizer::step(ParamSet& params, const ParamSet& grads) {
  if (!params.same_structure(grads)) throw ShapeError("optimizer: gradients do not match parameters");
  if (t_ == 0) {
    for (const auto& [name, t] : params) {
      m_.set(name, Tensor(t.shape(), 0.0));
      v_.set(name, Tensor(t.shape(), 0.0));
    }
  }
  ++t_;
  const OptimizerConfig& c = config_;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (c.kind == OptimizerKind::adam) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
        p[i] -= c.lr * (update + c.weight_decay * p[i]);
      } else {
        m[i] = c.momentum * m[i] + g[i] + c.weight_decay * p[i];
        p[i] -= c.lr * m[i];
      }
    }
  }
}

// ---- training ---------------------------------------------------------------

Model init_model(const RunConfig& config) {
  config.validate();
  Model m;
  backbone::init_backbone(m.student, config.backbone, config.seed);
  mappings::init_head(m.student, config.data.spec.num_classes, config.backbone.feature_dim, config.mapping, config.seed);
  m.teacher = m.student;
  return m;
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t count) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng = Rng::keyed({seed, epoch, 0x6f726465ULL});
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

backbone::AdjustmentRates student_rates(const RunConfig& c, const reg::Rates& r, std::uint64_t step,
                                        std::uint64_t sample) {
  return {r.drop_path, r.dropout, stream_key({c.seed, 0x73747564ULL}), step, sample};
}

backbone::AdjustmentRates teacher_rates(const RunConfig& c, std::uint64_t step, std::uint64_t sample) {
  const reg::Rates r = reg::teacher_rates(c.adjustment);
  return {r.drop_path, r.dropout, stream_key({c.seed, 0x74656163ULL}), step, sample};
}

BatchResult batch_objective(const RunConfig& config, const Model& model, std::span<const synth::Sample* const> batch,
                            std::uint64_t step, const reg::Rates& student, double w_gen, double w_reg) {
  if (batch.empty()) throw ValueError("batch_objective: empty batch");
  const std::size_t classes = config.data.spec.num_classes;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const mappings::MappingOptions mopt{config.mapping, config.tau1, config.background_logit};
  BatchResult out;
  out.scores = Tensor(Shape{batch.size(), classes});
  out.labels = Tensor(Shape{batch.size(), classes});
  for (const auto& [name, t] : model.student) out.grads.set(name, Tensor(t.shape(), 0.0));

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const synth::Sample& s = *batch[b];
    ad::Tape tape;
    const ParamVars sv(tape, model.student, true);
    const Var feats = backbone::forward_features(sv, s.image, config.backbone,
                                                 student_rates(config, student, step, s.index), backbone::Mode::train);
    const Var scores = mappings::score(feats, sv, mopt);
    const Var gen = mappings::generation_loss(scores, s.labels);
    Var total = ad::scale(gen, w_gen * inv_b);
    double reg_value = 0.0;
    if (config.regularization_enabled) {
      ad::Tape tt(false);
      const ParamVars tv(tt, model.teacher, false);
      const Var tfeats = backbone::forward_features(tv, s.image, config.backbone, teacher_rates(config, step, s.index),
                                                    backbone::Mode::train);
      const Tensor teacher_alpha =
          mappings::spatial_activation_distribution(tfeats, tv[mappings::kHeadWeights], config.background_logit).value();
      const Var student_alpha =
          mappings::spatial_activation_distribution(feats, sv[mappings::kHeadWeights], config.background_logit);
      const Var r = reg::reg_loss(student_alpha, teacher_alpha, config.tau2, config.reg_form);
      reg_value = r.value().item();
      total = ad::add(total, ad::scale(r, w_reg * inv_b));
    }
    tape.backward(total);
    for (auto& [name, g] : out.grads) {
      const Tensor gs = tape.grad(sv[name]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs[i];
    }
    out.gen_loss += gen.value().item() * inv_b;
    out.reg_loss += reg_value * inv_b;
    out.total_loss += total.value().item();
    for (std::size_t c = 0; c < classes; ++c) {
      out.scores.at(b, c) = scores.value()[c];
      out.labels.at(b, c) = s.labels[c];
    }
  }
  return out;
}

RunResult train_seed_model(const RunConfig& config, const synth::Dataset& train, const TrainOptions& options) {
  return train_seed_model(config, init_model(config), train, options);
}

RunResult train_seed_model(const RunConfig& config, Model initial, const synth::Dataset& train,
                           const TrainOptions& options) {
  config.validate();
  if (train.samples.empty()) throw ValueError("train_seed_model: empty dataset");
  if (train.num_classes() != config.data.spec.num_classes) {
    throw ConfigError("data.spec.num_classes", "does not match the training dataset");
  }
  const auto t0 = std::chrono::steady_clock::now();
  RunResult result;
  result.config = config;
  result.model = std::move(initial);
  Model& model = result.model;

  const std::size_t n = train.samples.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::int64_t total_steps = static_cast<std::int64_t>(per_epoch * config.epochs);
  if (options.max_steps) total_steps = std::min<std::int64_t>(total_steps, static_cast<std::int64_t>(*options.max_steps));

  Optimizer opt(config.optimizer);
  reg::LearningStatus status;
  std::int64_t step = 0;
  const double w_reg = config.regularization_enabled ? config.lambda : 0.0;

  try {
    for (std::size_t epoch = 0; epoch < config.epochs && step < total_steps; ++epoch) {
      const std::vector<std::size_t> order = epoch_order(config.seed, epoch, n);
      EpochLog elog;
      elog.epoch = epoch;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < n && step < total_steps; start += config.batch_size) {
        std::vector<const synth::Sample*> batch;
        for (std::size_t i = start; i < std::min(n, start + config.batch_size); ++i) {
          batch.push_back(&train.samples[order[i]]);
        }
        const reg::Rates rates = config.regularization_enabled
                                     ? reg::schedule_adjustment(config.adjustment, status, step, total_steps)
                                     : reg::teacher_rates(config.adjustment);
        const BatchResult br =
            batch_objective(config, model, batch, static_cast<std::uint64_t>(step), rates, 1.0, w_reg);
        if (!std::isfinite(br.total_loss)) throw NonFiniteError("loss is not finite");
        opt.step(model.student, br.grads);
        reg::ema_update(model.teacher, model.student, config.adjustment.ema_momentum);
        const auto su = reg::update_learning_status(status, br.scores, br.labels, config.adjustment.status_momentum);
        status = su.status;

        const StepLog slog{step, br.gen_loss, br.reg_loss, br.total_loss, status.value, rates.drop_path, rates.dropout};
        result.steps.push_back(slog);
        if (options.on_step) options.on_step(slog, model);
        elog.gen_loss += br.gen_loss;
        elog.reg_loss += br.reg_loss;
        elog.total_loss += br.total_loss;
        elog.drop_path += rates.drop_path;
        elog.dropout += rates.dropout;
        ++batches;
        ++step;
      }
      const double k = 1.0 / static_cast<double>(std::max<std::size_t>(batches, 1));
      elog.gen_loss *= k;
      elog.reg_loss *= k;
      elog.total_loss *= k;
      elog.drop_path *= k;
      elog.dropout *= k;
      elog.status = status.value;
      result.epochs.push_back(elog);
    }
  } catch (const NonFiniteError& e) {
    result.aborted = true;
    result.abort_step = step;
    result.abort_message = e.what();
  }

  if (!result.aborted && options.eval) {
    result.metrics = evaluate_model(config.evaluate_teacher ? model.teacher : model.student, *options.eval, config);
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---- evaluation -------------------------------------------------------------

seed::MetricsReport evaluate_features(std::span<const FeatureMap> features, const Tensor& weights,
                                      const synth::Dataset& data, double background_threshold,
                                      seed::MetricsMode mode) {
  if (features.size() != data.samples.size()) throw ShapeError("evaluate_features: one feature map per sample");
  const std::size_t classes = data.num_classes();
  if (weights.rank() != 2 || weights.dim(0) != classes) throw ShapeError("evaluate_features: weights must be [C, D]");
  seed::ConfusionTable table(classes);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const synth::Sample& s = data.samples[i];
    std::vector<seed::SeedArea> seeds;
    for (std::size_t c = 1; c <= classes; ++c) {
      if (s.labels[c - 1] == 1.0) seeds.push_back(seed::compute_seed_area(features[i], weights, c));
    }
    table.add(seed::seed_label_map(seeds, background_threshold, s.downsampled.height, s.downsampled.width),
              s.downsampled);
  }
  return seed::metrics_from_counts(table, mode);
}

seed::MetricsReport evaluate_model(const ParamSet& params, const synth::Dataset& data, const RunConfig& config) {
  std::vector<FeatureMap> feats;
  feats.reserve(data.samples.size());
  for (const synth::Sample& s : data.samples) feats.push_back(backbone::extract_features(params, s.image, config.backbone));
  return evaluate_features(feats, params.at(mappings::kHeadWeights), data, config.background_threshold,
                           config.metrics_mode);
}

nlohmann::ordered_json RunResult::to_json() const {
  nlohmann::ordered_json j;
  j["config"] = config.to_json();
  j["aborted"] = aborted;
  if (aborted) {
    j["abort_step"] = abort_step;
    j["abort_message"] = abort_message;
  }
  j["seconds"] = seconds;
  j["epochs"] = nlohmann::ordered_json::array();
  for (const EpochLog& e : epochs) {
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"gen_loss", e.gen_loss},
                           {"reg_loss", e.reg_loss},
                           {"total_loss", e.total_loss},
                           {"status", e.status},
                           {"drop_path", e.drop_path},
                           {"dropout", e.dropout}});
  }
  std::vector<double> totals;
  for (const StepLog& s : steps) totals.push_back(s.total_loss);
  j["step_total_loss"] = totals;
  if (metrics) j["metrics"] = metrics->to_json();
  j["warnings"] = warnings;
  return j;
}

void save_run(const RunResult& result, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (const char* f : {"run.json", "metrics.json", "student.bin", "teacher.bin"}) fs::remove(fs::path(dir) / f);
  std::ofstream((fs::path(dir) / "run.json").string()) << result.to_json().dump(2) << "\n";
  if (result.metrics) std::ofstream((fs::path(dir) / "metrics.json").string()) << result.metrics->to_json().dump(2) << "\n";
  backbone::save_params((fs::path(dir) / "student.bin").string(), result.model.student);
  backbone::save_params((fs::path(dir) / "teacher.bin").string(), result.model.teacher);
}

// ---- comparisons ------------------------------------------------------------

Variant make_variant(const std::string& preset, backbone::Kind kind, const RunConfig& base) {
  RunConfig c = base;
  c.backbone.kind = kind;
  c.tau1 = kind == backbone::Kind::conv ? 50.0 : 1.0;
  c.regularization_enabled = false;
  if (preset == "cam") {
    c.mapping = mappings::Mapping::cam_gap;
  } else if (preset == "mil") {
    c.mapping = mappings::Mapping::mil;
  } else if (preset == "mct") {
    c.mapping = mappings::Mapping::mct;
  } else if (preset == "usage-noreg") {
    c.mapping = mappings::Mapping::usage;
  } else if (preset == "usage" || preset == "usage-fixed" || preset == "usage-linear") {
    c.mapping = mappings::Mapping::usage;
    c.regularization_enabled = true;
    c.adjustment.strategy = preset == "usage-fixed"    ? reg::Strategy::fixed
                            : preset == "usage-linear" ? reg::Strategy::linear
                                                       : reg::Strategy::self_adaptive;
  } else {
    throw ConfigError("variants", "unknown variant '" + preset +
                                      "' (expected cam, mil, mct, usage, usage-noreg, usage-fixed or usage-linear)");
  }
  return {preset + "/" + backbone::to_string(kind), c};
}

const VariantRow& Comparison::row(const std::string& name) const {
  for (const VariantRow& r : rows) {
    if (r.name == name) return r;
  }
  throw ValueError("no comparison row named '" + name + "'");
}

namespace {

void summarize(VariantRow& row) {
  if (row.reports.empty()) return;
  auto stats = [&row](auto get, double& mean, double& lo, double& hi) {
    mean = 0.0;
    lo = 1e300;
    hi = -1e300;
    for (const seed::MetricsReport& r : row.reports) {
      const double v = get(r);
      mean += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    mean /= static_cast<double>(row.reports.size());
  };
  stats([](const seed::MetricsReport& r) { return r.miou; }, row.miou_mean, row.miou_min, row.miou_max);
  stats([](const seed::MetricsReport& r) { return r.mean_fpr; }, row.fpr_mean, row.fpr_min, row.fpr_max);
  stats([](const seed::MetricsReport& r) { return r.mean_fnr; }, row.fnr_mean, row.fnr_min, row.fnr_max);
}

}  // namespace

Comparison run_comparison(const std::vector<Variant>& variants, const synth::Dataset& train,
                          const synth::Dataset& eval, const std::vector<std::uint64_t>& seeds,
                          const RunCallback& on_run) {
  if (variants.size() < 2) throw ValueError("run_comparison: need at least two variants");
  if (seeds.empty()) throw ValueError("run_comparison: need at least one seed");
  Comparison out;
  for (const Variant& v : variants) {
    VariantRow row;
    row.name = v.name;
    for (std::uint64_t seed : seeds) {
      RunConfig c = v.config;
      c.seed = seed;
      try {
        TrainOptions opts;
        opts.eval = &eval;
        const RunResult r = train_seed_model(c, train, opts);
        row.seconds += r.seconds;
        if (on_run) on_run(v.name, seed, r);
        if (r.aborted) {
          row.errors.push_back("seed " + std::to_string(seed) + ": aborted at step " + std::to_string(r.abort_step) +
                               ": " + r.abort_message);
          continue;
        }
        row.seeds.push_back(seed);
        row.reports.push_back(*r.metrics);
      } catch (const Error& e) {
        row.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
      }
    }
    summarize(row);
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::string Comparison::csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "variant,runs,miou_mean,miou_min,miou_max,fpr_mean,fpr_min,fpr_max,fnr_mean,fnr_min,fnr_max,seconds\n";
  for (const VariantRow& r : rows) {
    os << r.name << ',' << r.reports.size() << ',' << r.miou_mean << ',' << r.miou_min << ',' << r.miou_max << ','
       << r.fpr_mean << ',' << r.fpr_min << ',' << r.fpr_max << ',' << r.fnr_mean << ',' << r.fnr_min << ','
       << r.fnr_max << ',' << r.seconds << '\n';
  }
  return os.str();
}

std::string Comparison::text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << std::left << std::setw(26) << "variant" << std::right << std::setw(6) << "runs" << std::setw(20) << "mIoU"
     << std::setw(20) << "FPR" << std::setw(20) << "FNR" << '\n';
  auto cell = [](double mean, double lo, double hi) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(1) << 100 * mean << " [" << 100 * lo << ", " << 100 * hi << "]";
    return c.str();
  };
  for (const VariantRow& r : rows) {
    os << std::left << std::setw(26) << r.name << std::right << std::setw(6) << r.reports.size() << std::setw(20)
       << cell(r.miou_mean, r.miou_min, r.miou_max) << std::setw(20) << cell(r.fpr_mean, r.fpr_min, r.fpr_max)
       << std::setw(20) << cell(r.fnr_mean, r.fnr_min, r.fnr_max) << '\n';
    for (const std::string& e : r.errors) os << "  error: " << e << '\n';
  }
  os << "\nmIoU deltas (row minus column, points)\n" << std::setw(26) << "";
  for (const VariantRow& c : rows) os << std::setw(14) << c.name.substr(0, 13);
  os << '\n';
  for (const VariantRow& r : rows) {
    os << std::left << std::setw(26) << r.name << std::right;
    for (const VariantRow& c : rows) os << std::setw(14) << std::showpos << 100 * (r.miou_mean - c.miou_mean) << std::noshowpos;
    os << '\n';
  }
  return os.str();
}

nlohmann::ordered_json Comparison::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const VariantRow& r : rows) {
    nlohmann::ordered_json row;
    row["variant"] = r.name;
    row["seeds"] = r.seeds;
    row["miou"] = {{"mean", r.miou_mean}, {"min", r.miou_min}, {"max", r.miou_max}};
    row["fpr"] = {{"mean", r.fpr_mean}, {"min", r.fpr_min}, {"max", r.fpr_max}};
    row["fnr"] = {{"mean", r.fnr_mean}, {"min", r.fnr_min}, {"max", r.fnr_max}};
    row["per_seed"] = nlohmann::ordered_json::array();
    for (const seed::MetricsReport& rep : r.reports) row["per_seed"].push_back(rep.to_json());
    row["errors"] = r.errors;
    row["seconds"] = r.seconds;
    j.push_back(row);
  }
  return j;
}

}  // namespace usage::train
