#pragma once

// Plain image-level classification loop: GAP head, per-class logistic loss,
// AdamW. Written against the backbone forward only, as a reference for the
// trainer with regularization off and lambda = 0.

#include <algorithm>
#include <cmath>
#include <vector>

#include "usage/backbones/backbones.hpp"
#include "usage/mappings/mappings.hpp"
#include "usage/numerics/ops.hpp"
#include "usage/trainer/trainer.hpp"

namespace usage::oracle {

struct BaselineTrace {
  std::vector<double> losses;
  ParamSet params;
};

inline BaselineTrace run_baseline(const train::RunConfig& c, const synth::Dataset& data, std::size_t steps) {
  BaselineTrace out;
  ParamSet p = train::init_model(c).student;
  ParamSet m1, m2;
  for (const auto& [name, t] : p) {
    m1.set(name, Tensor(t.shape(), 0.0));
    m2.set(name, Tensor(t.shape(), 0.0));
  }
  const train::OptimizerConfig& o = c.optimizer;
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < steps; ++epoch) {
    const auto order = train::epoch_order(c.seed, epoch, data.samples.size());
    for (std::size_t start = 0; start < order.size() && step < steps; start += c.batch_size) {
      const std::size_t end = std::min(order.size(), start + c.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      ParamSet grads;
      for (const auto& [name, t] : p) grads.set(name, Tensor(t.shape(), 0.0));
      double loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const synth::Sample& s = data.samples[order[i]];
        ad::Tape tape;
        const ParamVars v(tape, p, true);
        const backbone::AdjustmentRates rates =
            train::student_rates(c, reg::Rates{c.adjustment.gamma_t, 0.0}, step, s.index);
        const ad::Var f = backbone::forward_features(v, s.image, c.backbone, rates, backbone::Mode::train);
        const ad::Var score = ad::mean_over_rows(ad::matmul_nt(f, v[mappings::kHeadWeights]));
        // log(1 + e^s) - y s, averaged over classes
        const ad::Var bce =
            ad::mean(ad::sub(ad::log(ad::add_scalar(ad::exp(score), 1.0)), ad::mul_const(score, s.labels)));
        const ad::Var scaled = ad::scale(bce, inv_b);
        tape.backward(scaled);
        loss += scaled.value().item();
        for (auto& [name, g] : grads) {
          const Tensor gi = tape.grad(v[name]);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += gi[k];
        }
      }
      const double t = static_cast<double>(step + 1);
      for (auto& [name, w] : p) {
        Tensor& a = m1.at(name);
        Tensor& b = m2.at(name);
        const Tensor& g = grads.at(name);
        for (std::size_t k = 0; k < w.size(); ++k) {
          a[k] = o.beta1 * a[k] + (1 - o.beta1) * g[k];
          b[k] = o.beta2 * b[k] + (1 - o.beta2) * g[k] * g[k];
          const double mhat = a[k] / (1 - std::pow(o.beta1, t)), vhat = b[k] / (1 - std::pow(o.beta2, t));
          w[k] -= o.lr * (mhat / (std::sqrt(vhat) + o.eps) + o.weight_decay * w[k]);
        }
      }
      out.losses.push_back(loss);
      ++step;
    }
  }
  out.params = std::move(p);
  return out;
}

// Largest parameter gap, with the attention key-bias slice reported apart:
// attention is invariant to it, so its gradient is round-off that Adam
// normalizes up to about lr per step.
struct ParamGap {
  double rest = 0.0;
  double key_bias = 0.0;
};

inline ParamGap param_gap(const ParamSet& a, const ParamSet& b, std::size_t feature_dim) {
  ParamGap g;
  for (const auto& [name, t] : a) {
    const Tensor& u = b.at(name);
    const bool qkv_b = name.find("attn.qkv.b") != std::string::npos;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double diff = std::abs(t[i] - u[i]);
      if (qkv_b && i >= feature_dim && i < 2 * feature_dim) g.key_bias = std::max(g.key_bias, diff);
      else g.rest = std::max(g.rest, diff);
    }
  }
  return g;
}

}  // namespace usage::oracle
