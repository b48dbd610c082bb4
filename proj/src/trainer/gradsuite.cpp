#include "usage/trainer/gradsuite.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "usage/backbones/backbones.hpp"
#include "usage/mappings/mappings.hpp"
#include "usage/numerics/ops.hpp"
#include "usage/numerics/rng.hpp"
#include "usage/regularization/regularization.hpp"

namespace usage::train {

namespace {

constexpr std::size_t kN = 8, kD = 4, kC = 3;

Tensor uniform(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

Tensor projection(std::uint64_t tag, Shape shape) {
  Rng rng(stream_key({0x5eed, tag}));
  return uniform(rng, std::move(shape));
}

ad::FdOptions fd(double tol, std::size_t entries = 0) {
  return {.epsilon = 1e-6, .tolerance = tol, .max_entries_per_input = entries, .seed = 0};
}

SuiteCase mapping_case(std::string name, std::function<ad::Var(ad::Var, ad::Var)> score) {
  const Tensor r = projection(1, Shape{kC});
  return {name,
          ad::DifferentiableFunction(name,
                                     [score, r](ad::Tape&, std::span<const ad::Var> in) {
                                       return ad::sum(ad::mul_const(score(in[0], in[1]), r));
                                     }),
          [](std::uint64_t seed) {
            Rng rng(seed);
            return std::vector<Tensor>{uniform(rng, Shape{kN, kD}), uniform(rng, Shape{kC, kD})};
          },
          fd(1e-4)};
}

SuiteCase backbone_case(backbone::Kind kind) {
  backbone::BackboneConfig c;
  c.kind = kind;
  c.feature_dim = 8;
  c.depth = 2;
  c.heads = 2;
  const std::string name = "backbone_" + backbone::to_string(kind);
  const ParamSet shape = backbone::init_backbone(c, 0);
  std::vector<std::string> names;
  for (const auto& [n, t] : shape) names.push_back(n);
  const Tensor r = projection(2, Shape{backbone::kGridSize * backbone::kGridSize, c.feature_dim});
  Rng irng(stream_key({0x5eed, 6}));
  const Tensor image = uniform(irng, Shape{3, backbone::kImageSize, backbone::kImageSize}, 0.0, 1.0);
  return {name,
          ad::DifferentiableFunction(name,
                                     [c, names, r, image](ad::Tape&, std::span<const ad::Var> in) {
                                       ParamVars vars;
                                       for (std::size_t i = 0; i < names.size(); ++i) vars.bind(names[i], in[i]);
                                       const ad::Var f = backbone::forward_features(vars, image, c, {},
                                                                                    backbone::Mode::eval);
                                       return ad::sum(ad::mul_const(f, r));
                                     }),
          [c](std::uint64_t seed) {
            std::vector<Tensor> inputs;
            for (const auto& [n, t] : backbone::init_backbone(c, seed)) inputs.push_back(t);
            return inputs;
          },
          fd(1e-3, 12)};
}

}  // namespace

std::vector<SuiteCase> gradient_suite() {
  std::vector<SuiteCase> out;
  for (const std::string& name : ad::op_names()) {
    ad::OpCase op = ad::op_case(name);
    out.push_back({"op_" + name, op.function, op.sample_inputs, fd(1e-4)});
  }

  {
    const Tensor r = projection(3, Shape{kN, kC});
    out.push_back({"activation_volume",
                   ad::DifferentiableFunction("activation_volume",
                                              [r](ad::Tape&, std::span<const ad::Var> in) {
                                                return ad::sum(ad::mul_const(mappings::activation_volume(in[0], in[1]), r));
                                              }),
                   [](std::uint64_t seed) {
                     Rng rng(seed);
                     return std::vector<Tensor>{uniform(rng, Shape{kN, kD}), uniform(rng, Shape{kC, kD})};
                   },
                   fd(1e-4)});
  }
  out.push_back(mapping_case("score_gap", [](ad::Var f, ad::Var w) { return mappings::score_gap(f, w); }));
  for (double tau : {0.5, 1.0, 50.0}) {
    std::ostringstream name;
    name << "score_usage_tau" << tau;
    out.push_back(mapping_case(name.str(), [tau](ad::Var f, ad::Var w) { return mappings::score_usage(f, w, 0.0, tau); }));
  }

  {
    const Tensor r = projection(4, Shape{kC});
    out.push_back({"score_mct",
                   ad::DifferentiableFunction("score_mct",
                                              [r](ad::Tape&, std::span<const ad::Var> in) {
                                                const mappings::MctVars mlp{in[2], in[3], in[4], in[5]};
                                                return ad::sum(ad::mul_const(mappings::score_mct(in[0], in[1], mlp), r));
                                              }),
                   [](std::uint64_t seed) {
                     Rng rng(seed);
                     return std::vector<Tensor>{uniform(rng, Shape{kN, kD}), uniform(rng, Shape{kC, kD}),
                                                uniform(rng, Shape{kD, kD}), uniform(rng, Shape{kD}),
                                                uniform(rng, Shape{kD, kD}), uniform(rng, Shape{kD})};
                                              },
                   fd(1e-4)});
  }

  {
    Tensor labels = Tensor::vector({1.0, 0.0, 1.0});
    out.push_back({"generation_loss",
                   ad::DifferentiableFunction("generation_loss",
                                              [labels](ad::Tape&, std::span<const ad::Var> in) {
                                                return mappings::generation_loss(in[0], labels);
                                              }),
                   [](std::uint64_t seed) {
                     Rng rng(seed);
                     return std::vector<Tensor>{uniform(rng, Shape{kC}, -4.0, 4.0)};
                   },
                   fd(1e-4)});
  }

  // Student is a softmax over free logits; the teacher is a fixed distribution.
  for (reg::RegForm form : {reg::RegForm::renormalized, reg::RegForm::literal}) {
    const std::string name = "reg_loss_" + reg::to_string(form);
    Rng trng(stream_key({0x5eed, 5}));
    Tensor teacher = uniform(trng, Shape{kN, kC + 1}, -1.0, 1.0);
    for (std::size_t i = 0; i < kN; ++i) {
      double z = 0.0;
      for (std::size_t c = 0; c <= kC; ++c) z += teacher.at(i, c) = std::exp(teacher.at(i, c));
      for (std::size_t c = 0; c <= kC; ++c) teacher.at(i, c) /= z;
    }
    out.push_back({name,
                   ad::DifferentiableFunction(name,
                                              [teacher, form](ad::Tape&, std::span<const ad::Var> in) {
                                                return reg::reg_loss(ad::softmax_rows(in[0]), teacher, 0.1, form);
                                              }),
                   [](std::uint64_t seed) {
                     Rng rng(seed);
                     return std::vector<Tensor>{uniform(rng, Shape{kN, kC + 1}, -2.0, 2.0)};
                   },
                   fd(1e-4)});
  }

  out.push_back(backbone_case(backbone::Kind::conv));
  out.push_back(backbone_case(backbone::Kind::transformer));
  return out;
}

SuiteResult run_suite_case(const SuiteCase& c, std::size_t trials, std::uint64_t seed) {
  SuiteResult r;
  r.name = c.name;
  r.tolerance = c.options.tolerance;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t s = stream_key({seed, t});
    ad::FdOptions opts = c.options;
    opts.seed = s;
    const ad::FdReport rep = ad::finite_difference_check(c.function, c.sample_inputs(s), opts);
    ++r.trials;
    r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
    if (!rep.passed()) {
      ++r.failed_trials;
      if (r.first_failure.empty()) {
        for (const ad::FdEntry& e : rep.entries) {
          if (!e.failed) continue;
          std::ostringstream msg;
          msg << "trial " << t << " input " << e.input << " index " << e.index << " analytic " << e.analytic
              << " numeric " << e.numeric;
          r.first_failure = msg.str();
          break;
        }
      }
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace usage::train
