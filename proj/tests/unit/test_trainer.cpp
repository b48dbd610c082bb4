#include <cmath>

#include "doctest.h"
#include "usage/error.hpp"
#include "usage/trainer/trainer.hpp"
#include "../support/baseline_oracle.hpp"

using namespace usage;
using namespace usage::train;

namespace {

RunConfig small_config(backbone::Kind kind) {
  RunConfig c = default_config(kind);
  c.backbone.feature_dim = 16;
  c.backbone.depth = 2;
  c.backbone.heads = 2;
  c.batch_size = 8;
  c.epochs = 3;
  c.seed = 5;
  c.data.train_count = 40;
  c.data.eval_count = 20;
  return c;
}

const synth::Dataset& small_train() {
  static const synth::Dataset d = generate_dataset(1, 40, synth::SceneSpec{}, synth::Split::train);
  return d;
}

const synth::Dataset& small_eval() {
  static const synth::Dataset d = generate_dataset(1, 20, synth::SceneSpec{}, synth::Split::eval);
  return d;
}

double max_diff(const ParamSet& a, const ParamSet& b) {
  double m = 0.0;
  for (const auto& [name, t] : a) m = std::max(m, max_abs_diff(t, b.at(name)));
  return m;
}

}  // namespace

TEST_CASE("without regularization the trainer is the plain logistic GAP baseline") {
  for (backbone::Kind kind : {backbone::Kind::conv, backbone::Kind::transformer}) {
    RunConfig c = small_config(kind);
    c.mapping = mappings::Mapping::cam_gap;
    c.regularization_enabled = false;
    c.lambda = 0.0;
    c.epochs = 5;
    TrainOptions opts;
    opts.max_steps = 20;
    const RunResult run = train_seed_model(c, small_train(), opts);
    REQUIRE(run.steps.size() == 20);
    const oracle::BaselineTrace ref = oracle::run_baseline(c, small_train(), 20);
    double worst = 0.0;
    for (std::size_t i = 0; i < 20; ++i) worst = std::max(worst, std::abs(ref.losses[i] - run.steps[i].total_loss));
    INFO(backbone::to_string(kind) << " worst loss gap " << worst);
    CHECK(worst <= 1e-12);
    const oracle::ParamGap gap = oracle::param_gap(ref.params, run.model.student, c.backbone.feature_dim);
    CHECK(gap.rest <= 1e-12);
    CHECK(gap.key_bias <= 2.0 * 20 * c.optimizer.lr);
  }
}

TEST_CASE("training loss decreases over five epochs on the default dataset") {
  RunConfig c = default_config(backbone::Kind::conv);
  c.mapping = mappings::Mapping::cam_gap;
  c.regularization_enabled = false;
  c.lambda = 0.0;
  c.epochs = 5;
  const synth::Dataset train = generate_dataset(c.data.seed, c.data.train_count, c.data.spec, synth::Split::train);
  const RunResult r = train_seed_model(c, train);
  REQUIRE(r.epochs.size() == 5);
  for (std::size_t e = 1; e < 5; ++e) CHECK(r.epochs[e].gen_loss < r.epochs[e - 1].gen_loss);
}

TEST_CASE("a zero learning-rate step leaves the parameters in place") {
  RunConfig c = small_config(backbone::Kind::transformer);
  c.optimizer.lr = 0.0;
  const Model init = init_model(c);
  TrainOptions opts;
  opts.max_steps = 1;
  const RunResult r = train_seed_model(c, small_train(), opts);
  CHECK(r.model.student == init.student);
  CHECK(max_diff(r.model.teacher, init.teacher) <= 1e-15);
}

TEST_CASE("total gradient is the generation gradient plus lambda times the regularization gradient") {
  for (backbone::Kind kind : {backbone::Kind::conv, backbone::Kind::transformer}) {
    RunConfig c = small_config(kind);
    Model m = init_model(c);
    // Move the teacher away from the student so the consistency term is active.
    for (auto& [name, t] : m.teacher) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] *= 0.9;
    }
    std::vector<const synth::Sample*> batch;
    for (std::size_t i = 0; i < 4; ++i) batch.push_back(&small_train().samples[i]);
    const reg::Rates rates{0.1, 0.01};
    const double lambda = 0.25;
    const BatchResult total = batch_objective(c, m, batch, 3, rates, 1.0, lambda);
    const BatchResult gen = batch_objective(c, m, batch, 3, rates, 1.0, 0.0);
    const BatchResult regular = batch_objective(c, m, batch, 3, rates, 0.0, 1.0);
    CHECK(regular.reg_loss > 0.0);
    double worst = 0.0;
    for (const auto& [name, g] : total.grads) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double sum = gen.grads.at(name)[i] + lambda * regular.grads.at(name)[i];
        worst = std::max(worst, std::abs(g[i] - sum) / std::max(1.0, std::abs(g[i])));
      }
    }
    CHECK(worst <= 1e-12);
    CHECK(total.total_loss == doctest::Approx(gen.gen_loss + lambda * regular.reg_loss).epsilon(1e-12));
  }
}

TEST_CASE("teacher follows the closed-form EMA of the student trajectory") {
  RunConfig c = small_config(backbone::Kind::conv);
  const double m = c.adjustment.ema_momentum;
  const Model init = init_model(c);
  std::vector<ParamSet> students;
  TrainOptions opts;
  opts.max_steps = 10;
  opts.on_step = [&students](const StepLog&, const Model& model) { students.push_back(model.student); };
  const RunResult r = train_seed_model(c, small_train(), opts);
  REQUIRE(students.size() == 10);
  double worst = 0.0;
  for (const auto& [name, t0] : init.teacher) {
    for (std::size_t i = 0; i < t0.size(); ++i) {
      double expected = std::pow(m, 10) * t0[i];
      for (std::size_t k = 1; k <= 10; ++k) expected += (1 - m) * std::pow(m, 10.0 - k) * students[k - 1].at(name)[i];
      worst = std::max(worst, std::abs(expected - r.model.teacher.at(name)[i]));
    }
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("training and evaluation are reproducible") {
  RunConfig c = small_config(backbone::Kind::transformer);
  TrainOptions opts;
  opts.max_steps = 6;
  opts.eval = &small_eval();
  const RunResult a = train_seed_model(c, small_train(), opts);
  const RunResult b = train_seed_model(c, small_train(), opts);
  CHECK(a.model.student == b.model.student);
  CHECK(a.model.teacher == b.model.teacher);
  for (std::size_t i = 0; i < a.steps.size(); ++i) CHECK(a.steps[i].total_loss == b.steps[i].total_loss);
  REQUIRE(a.metrics);
  CHECK(a.metrics->to_json().dump() == b.metrics->to_json().dump());
  CHECK(evaluate_model(a.model.student, small_eval(), c).to_json().dump() ==
        evaluate_model(a.model.student, small_eval(), c).to_json().dump());
  // A different seed changes the run.
  c.seed = 6;
  CHECK_FALSE(train_seed_model(c, small_train(), opts).model.student == a.model.student);
}

TEST_CASE("planted one-hot features score mIoU 1") {
  const synth::Dataset& data = small_eval();
  std::vector<FeatureMap> feats;
  for (const synth::Sample& s : data.samples) {
    Tensor f(Shape{64, 3}, 0.0);
    for (std::size_t i = 0; i < 64; ++i) {
      if (s.downsampled.labels[i] > 0) f.at(i, static_cast<std::size_t>(s.downsampled.labels[i] - 1)) = 1.0;
    }
    feats.emplace_back(8, 8, f);
  }
  Tensor eye(Shape{3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  for (seed::MetricsMode mode : {seed::MetricsMode::conventional, seed::MetricsMode::literal}) {
    const seed::MetricsReport r = evaluate_features(feats, eye, data, 0.4, mode);
    CHECK(r.miou == 1.0);
    CHECK(r.mean_fpr == 0.0);
    CHECK(r.mean_fnr == 0.0);
  }
}

TEST_CASE("untrained models are near chance") {
  const RunConfig base = default_config(backbone::Kind::transformer);
  const synth::Dataset eval = generate_dataset(base.data.seed, base.data.eval_count, base.data.spec, synth::Split::eval);
  for (backbone::Kind kind : {backbone::Kind::conv, backbone::Kind::transformer}) {
    double mean = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
      RunConfig c = default_config(kind);
      c.seed = s;
      mean += evaluate_model(init_model(c).student, eval, c).miou / 5.0;
    }
    INFO(backbone::to_string(kind) << " random-init mIoU " << mean);
    CHECK(mean < 0.35);
  }
}

TEST_CASE("divergence aborts with the step recorded") {
  RunConfig c = small_config(backbone::Kind::conv);
  c.optimizer.lr = 1e300;
  TrainOptions opts;
  opts.max_steps = 5;
  const RunResult r = train_seed_model(c, small_train(), opts);
  CHECK(r.aborted);
  CHECK(r.abort_step >= 0);
  CHECK(r.abort_step < 5);
  CHECK_FALSE(r.abort_message.empty());
}

TEST_CASE("sgd with momentum and adamw single steps") {
  ParamSet p, g;
  p.set("w", Tensor::vector({1.0, -2.0}));
  g.set("w", Tensor::vector({0.5, 0.25}));
  OptimizerConfig sgd{OptimizerKind::sgd_momentum, 0.1, 0.01, 0.9};
  Optimizer opt(sgd);
  opt.step(p, g);
  CHECK(p.at("w")[0] == doctest::Approx(1.0 - 0.1 * (0.5 + 0.01)).epsilon(1e-15));
  opt.step(p, g);
  const double p1 = 1.0 - 0.1 * 0.51;
  CHECK(p.at("w")[0] == doctest::Approx(p1 - 0.1 * (0.9 * 0.51 + 0.5 + 0.01 * p1)).epsilon(1e-14));

  ParamSet q;
  q.set("w", Tensor::vector({1.0, -2.0}));
  Optimizer adam(OptimizerConfig{});
  adam.step(q, g);
  // First bias-corrected Adam step moves each weight by lr * sign(g), plus decay.
  CHECK(q.at("w")[0] == doctest::Approx(1.0 - 3e-3 * (0.5 / (0.5 + 1e-8) + 1e-4)).epsilon(1e-14));
  CHECK(q.at("w")[1] == doctest::Approx(-2.0 - 3e-3 * (0.25 / (0.25 + 1e-8) - 2e-4)).epsilon(1e-14));
}

TEST_CASE("run config JSON round trip and strict keys") {
  RunConfig c = default_config(backbone::Kind::conv);
  c.lambda = 0.5;
  c.adjustment.strategy = reg::Strategy::linear;
  c.data.spec.hue_jitter = 0.2;
  const RunConfig back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  CHECK(back.to_json().dump() == c.to_json().dump());

  auto key_of = [](const nlohmann::json& j) {
    try {
      RunConfig::from_json(j);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("<none>");
  };
  CHECK(key_of({{"bogus", 1}}) == "bogus");
  CHECK(key_of({{"optimizer", {{"lr", "fast"}}}}) == "optimizer.lr");
  CHECK(key_of({{"backbone", {{"heads", 5}}}}) == "backbone.heads");
  CHECK(key_of({{"adjustment", {{"gamma_s_max", 0.01}}}}) == "adjustment.gamma_s_max");
  CHECK(key_of({{"data", {{"spec", {{"shapes_max", 7}}}}}}) == "data.spec.shapes_max");
  CHECK(key_of({{"mapping", "softmax"}}) == "mapping");
  CHECK(key_of({{"tau1", -1.0}}) == "tau1");
  CHECK(key_of({{"epochs", -3}}) == "epochs");
  CHECK(key_of({{"mapping", "usage"}, {"tau2", 0.1}}) == "<none>");
}

TEST_CASE("variant presets") {
  const RunConfig base = default_config(backbone::Kind::transformer);
  const Variant cam = make_variant("cam", backbone::Kind::conv, base);
  CHECK(cam.name == "cam/conv");
  CHECK(cam.config.mapping == mappings::Mapping::cam_gap);
  CHECK_FALSE(cam.config.regularization_enabled);
  const Variant u = make_variant("usage", backbone::Kind::conv, base);
  CHECK(u.config.tau1 == 50.0);
  CHECK(u.config.regularization_enabled);
  CHECK(make_variant("usage", backbone::Kind::transformer, base).config.tau1 == 1.0);
  CHECK(make_variant("usage-fixed", backbone::Kind::transformer, base).config.adjustment.strategy == reg::Strategy::fixed);
  CHECK_FALSE(make_variant("usage-noreg", backbone::Kind::transformer, base).config.regularization_enabled);
  CHECK_THROWS_AS(make_variant("deeplab", backbone::Kind::conv, base), ConfigError);
}

TEST_CASE("the same variant twice gives identical comparison rows") {
  RunConfig c = small_config(backbone::Kind::conv);
  c.epochs = 1;
  c.backbone.feature_dim = 8;
  const Variant v = make_variant("usage", backbone::Kind::conv, c);
  const Comparison cmp = run_comparison({v, v}, small_train(), small_eval(), {1, 2});
  REQUIRE(cmp.rows.size() == 2);
  CHECK(cmp.rows[0].reports.size() == 2);
  CHECK(cmp.rows[0].miou_mean == cmp.rows[1].miou_mean);
  CHECK(cmp.rows[0].fpr_mean == cmp.rows[1].fpr_mean);
  CHECK(cmp.csv().find("variant,runs,miou_mean") == 0);
  CHECK(cmp.text().find("usage/conv") != std::string::npos);
  CHECK_THROWS_AS(run_comparison({v}, small_train(), small_eval(), {1}), ValueError);
}
