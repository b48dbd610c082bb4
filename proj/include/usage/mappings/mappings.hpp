#pragma once

// Classifier mappings from a dense feature map to per-class logits.
//
// All mappings share the activation volume v[i, c] = sum_d w[c, d] * A[i, d].
//   cam_gap : s[c] = mean_i v[i, c]
//   usage   : s[c] = sum_i a[i, c]^(1/t) v[i, c] / sum_i a[i, c]^(1/t), where
//             a is the per-location softmax over the C class activations and
//             one constant background logit
//   mil     : the usage mapping at t = 1
//   mct     : s[c] = sum_i b[i, c] u[i] / (sum_i b[i, c] + 1e-8), with
//             b = max(v, 0) and u[i] the feature-mean of an MLP applied to A[i]

#include <optional>
#include <string>

#include "usage/numerics/ops.hpp"
#include "usage/numerics/params.hpp"
#include "usage/seedcore/seedcore.hpp"

namespace usage::mappings {

enum class Mapping { cam_gap, mil, mct, usage };

std::string to_string(Mapping m);
Mapping mapping_from_string(const std::string& name);

inline constexpr double kMctEpsilon = 1e-8;

// Two-layer perceptron D -> D (GELU) -> D.
struct MctMlp {
  Tensor w1;  // [D, D], input-major
  Tensor b1;  // [D]
  Tensor w2;  // [D, D]
  Tensor b2;  // [D]
};

struct ClassifierHead {
  Tensor weights;  // [C, D]
  double background_logit = 0.0;
  std::optional<MctMlp> mct_mlp;

  std::size_t num_classes() const { return weights.dim(0); }
  std::size_t dim() const { return weights.dim(1); }
};

// Same MLP placed on a tape.
struct MctVars {
  ad::Var w1, b1, w2, b2;
};

// ---- differentiable forms --------------------------------------------------
// features: [N, D]; weights: [C, D].

ad::Var activation_volume(ad::Var features, ad::Var weights);
ad::Var score_gap(ad::Var features, ad::Var weights);
// [N, C + 1]; background channel last.
ad::Var spatial_activation_distribution(ad::Var features, ad::Var weights, double background_logit);
ad::Var score_usage(ad::Var features, ad::Var weights, double background_logit, double tau1);
// Direct alpha-weighted pooling, without the temperature power.
ad::Var score_mil(ad::Var features, ad::Var weights, double background_logit);
ad::Var mct_pooled_values(ad::Var features, const MctVars& mlp);  // [N]
ad::Var score_mct(ad::Var features, ad::Var weights, const MctVars& mlp);
ad::Var generation_loss(ad::Var scores, const Tensor& labels);

// ---- plain-tensor forms ----------------------------------------------------

Tensor activation_volume(const FeatureMap& features, const ClassifierHead& head);
Tensor score_gap(const FeatureMap& features, const ClassifierHead& head);
Tensor spatial_activation_distribution(const FeatureMap& features, const ClassifierHead& head);
Tensor score_usage(const FeatureMap& features, const ClassifierHead& head, double tau1);
Tensor score_mil(const FeatureMap& features, const ClassifierHead& head);
Tensor score_mct(const FeatureMap& features, const ClassifierHead& head);
double generation_loss(const Tensor& scores, const Tensor& labels);

// Parameter names used when a head lives inside a ParamSet.
inline const std::string kHeadWeights = "head.weights";
inline const std::string kMctW1 = "head.mct.w1";
inline const std::string kMctB1 = "head.mct.b1";
inline const std::string kMctW2 = "head.mct.w2";
inline const std::string kMctB2 = "head.mct.b2";

// Deterministic init: fan-in scaled uniform weights, zero biases. The MLP is
// added only for the mct mapping.
void init_head(ParamSet& params, std::size_t num_classes, std::size_t dim, Mapping mapping, std::uint64_t seed);
ClassifierHead head_from_params(const ParamSet& params, double background_logit);
MctVars mct_vars(const ParamVars& vars);

// Scores for `mapping` given bound parameters.
struct MappingOptions {
  Mapping mapping = Mapping::usage;
  double tau1 = 1.0;
  double background_logit = 0.0;
};
ad::Var score(ad::Var features, const ParamVars& params, const MappingOptions& options);

}  // namespace usage::mappings
