#include "usage/mappings/mappings.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "usage/error.hpp"
#include "usage/numerics/rng.hpp"

namespace usage::mappings {

using ad::Var;

std::string to_string(Mapping m) {
  switch (m) {
    case Mapping::cam_gap: return "cam_gap";
    case Mapping::mil: return "mil";
    case Mapping::mct: return "mct";
    case Mapping::usage: return "usage";
  }
  return "unknown";
}

Mapping mapping_from_string(const std::string& name) {
  if (name == "cam_gap" || name == "cam") return Mapping::cam_gap;
  if (name == "mil") return Mapping::mil;
  if (name == "mct") return Mapping::mct;
  if (name == "usage") return Mapping::usage;
  throw ValueError("unknown mapping '" + name + "' (expected cam_gap, mil, mct or usage)");
}

namespace {

void check_dims(Var features, Var weights) {
  if (features.value().rank() != 2 || weights.value().rank() != 2) {
    throw ShapeError("mapping: features must be [N, D] and weights [C, D]");
  }
  if (features.shape()[1] != weights.shape()[1]) {
    throw ShapeError("mapping: feature dim " + std::to_string(features.shape()[1]) + " vs classifier dim " +
                     std::to_string(weights.shape()[1]));
  }
}

Var distribution_from_volume(Var volume, double background_logit) {
  ad::Tape& t = volume.tape();
  const Var bg = t.constant(Tensor(Shape{volume.shape()[0], 1}, background_logit));
  return ad::softmax_rows(ad::concat_cols(volume, bg));
}

// sum_i w[i, c] v[i, c] / sum_i w[i, c]
Var weighted_pool(Var weights, Var values) {
  return ad::div(ad::sum_over_rows(ad::mul(weights, values)), ad::sum_over_rows(weights));
}

Var foreground(Var alpha) { return ad::slice_cols(alpha, 0, alpha.shape()[1] - 1); }

template <class F>
Tensor run(const FeatureMap& features, const ClassifierHead& head, F f) {
  ad::Tape t(false);
  return f(t, t.constant(features.values), t.constant(head.weights)).value();
}

MctVars bind_mlp(ad::Tape& t, const ClassifierHead& head) {
  if (!head.mct_mlp) throw ValueError("score_mct: classifier head has no MLP");
  const MctMlp& m = *head.mct_mlp;
  return MctVars{t.constant(m.w1), t.constant(m.b1), t.constant(m.w2), t.constant(m.b2)};
}

}  // namespace

Var activation_volume(Var features, Var weights) {
  check_dims(features, weights);
  return ad::matmul_nt(features, weights);
}

Var score_gap(Var features, Var weights) { return ad::mean_over_rows(activation_volume(features, weights)); }

Var spatial_activation_distribution(Var features, Var weights, double background_logit) {
  return distribution_from_volume(activation_volume(features, weights), background_logit);
}

Var score_usage(Var features, Var weights, double background_logit, double tau1) {
  if (!(tau1 > 0.0) || !std::isfinite(tau1)) throw ValueError("score_usage: tau1 must be a positive real");
  const Var volume = activation_volume(features, weights);
  const Var alpha = distribution_from_volume(volume, background_logit);
  const Var fg = foreground(alpha);
  if (tau1 == 1.0) return weighted_pool(ad::pow(fg, 1.0), volume);
  // alpha^(1/t) underflows for small t, so pool with exp(log(alpha)/t - m)
  // where m is the per-class max. The shift cancels in the ratio.
  const Var logw = ad::scale(ad::log_floored(fg), 1.0 / tau1);
  const Tensor& lv = logw.value();
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  Tensor shift(Shape{c}, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) shift[k] = std::max(shift[k], lv.at(i, k));
  }
  for (double& v : shift.values()) v = -v;
  return weighted_pool(ad::exp(ad::add_rows(logw, volume.tape().constant(shift))), volume);
}

Var score_mil(Var features, Var weights, double background_logit) {
  const Var volume = activation_volume(features, weights);
  const Var alpha = distribution_from_volume(volume, background_logit);
  return weighted_pool(foreground(alpha), volume);
}

Var mct_pooled_values(Var features, const MctVars& mlp) {
  const Var hidden = ad::gelu(ad::add_rows(ad::matmul(features, mlp.w1), mlp.b1));
  const Var out = ad::add_rows(ad::matmul(hidden, mlp.w2), mlp.b2);
  return ad::mean_over_cols(out);
}

Var score_mct(Var features, Var weights, const MctVars& mlp) {
  const Var beta = ad::relu(activation_volume(features, weights));
  const Var pooled = mct_pooled_values(features, mlp);
  const Var num = ad::sum_over_rows(ad::mul_cols(beta, pooled));
  const Var den = ad::add_scalar(ad::sum_over_rows(beta), kMctEpsilon);
  return ad::div(num, den);
}

Var generation_loss(Var scores, const Tensor& labels) { return ad::bce_with_logits(scores, labels); }

Tensor activation_volume(const FeatureMap& features, const ClassifierHead& head) {
  return run(features, head, [](ad::Tape&, Var a, Var w) { return activation_volume(a, w); });
}

Tensor score_gap(const FeatureMap& features, const ClassifierHead& head) {
  return run(features, head, [](ad::Tape&, Var a, Var w) { return score_gap(a, w); });
}

Tensor spatial_activation_distribution(const FeatureMap& features, const ClassifierHead& head) {
  return run(features, head, [&head](ad::Tape&, Var a, Var w) {
    return spatial_activation_distribution(a, w, head.background_logit);
  });
}

Tensor score_usage(const FeatureMap& features, const ClassifierHead& head, double tau1) {
  return run(features, head,
             [&head, tau1](ad::Tape&, Var a, Var w) { return score_usage(a, w, head.background_logit, tau1); });
}

Tensor score_mil(const FeatureMap& features, const ClassifierHead& head) {
  return run(features, head, [&head](ad::Tape&, Var a, Var w) { return score_mil(a, w, head.background_logit); });
}

Tensor score_mct(const FeatureMap& features, const ClassifierHead& head) {
  return run(features, head, [&head](ad::Tape& t, Var a, Var w) { return score_mct(a, w, bind_mlp(t, head)); });
}

double generation_loss(const Tensor& scores, const Tensor& labels) {
  ad::Tape t(false);
  return generation_loss(t.constant(scores), labels).value().item();
}

void init_head(ParamSet& params, std::size_t num_classes, std::size_t dim, Mapping mapping, std::uint64_t seed) {
  Rng rng = Rng::keyed({seed, 0x68656164ULL});
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  auto uniform = [&rng, bound](Shape s) {
    Tensor t(std::move(s));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
  };
  params.set(kHeadWeights, uniform({num_classes, dim}));
  if (mapping == Mapping::mct) {
    params.set(kMctW1, uniform({dim, dim}));
    params.set(kMctB1, Tensor(Shape{dim}, 0.0));
    params.set(kMctW2, uniform({dim, dim}));
    params.set(kMctB2, Tensor(Shape{dim}, 0.0));
  }
}

ClassifierHead head_from_params(const ParamSet& params, double background_logit) {
  ClassifierHead head{params.at(kHeadWeights), background_logit, std::nullopt};
  if (params.contains(kMctW1)) {
    head.mct_mlp = MctMlp{params.at(kMctW1), params.at(kMctB1), params.at(kMctW2), params.at(kMctB2)};
  }
  return head;
}

MctVars mct_vars(const ParamVars& vars) {
  if (!vars.contains(kMctW1)) throw ValueError("score_mct: classifier head has no MLP");
  return MctVars{vars[kMctW1], vars[kMctB1], vars[kMctW2], vars[kMctB2]};
}

Var score(Var features, const ParamVars& params, const MappingOptions& options) {
  const Var w = params[kHeadWeights];
  switch (options.mapping) {
    case Mapping::cam_gap: return score_gap(features, w);
    case Mapping::mil: return score_usage(features, w, options.background_logit, 1.0);
    case Mapping::mct: return score_mct(features, w, mct_vars(params));
    case Mapping::usage: return score_usage(features, w, options.background_logit, options.tau1);
  }
  throw ValueError("unknown mapping");
}

}  // namespace usage::mappings
