#pragma once

// Teacher-student consistency between spatial activation distributions, EMA
// weight transfer, and the schedules for the student's adjustment rates.

#include <cstdint>
#include <string>
#include <vector>

#include "usage/numerics/ops.hpp"
#include "usage/numerics/params.hpp"

namespace usage::reg {

enum class Strategy { fixed, linear, self_adaptive };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& name);

struct AdjustmentConfig {
  double gamma_t = 0.05;
  double gamma_s_init = 0.05;
  double gamma_s_max = 0.15;
  double delta_s_init = 0.0;
  double delta_s_max = 0.01;
  Strategy strategy = Strategy::self_adaptive;
  double ema_momentum = 0.99;
  double status_momentum = 0.99;

  // Throws ConfigError on the first violated constraint.
  void validate() const;
};

struct LearningStatus {
  double value = 0.5;
  std::int64_t step = 0;
};

// Drop-path and dropout rates for one forward pass.
struct Rates {
  double drop_path = 0.0;
  double dropout = 0.0;

  friend bool operator==(const Rates&, const Rates&) = default;
};

enum class RegForm { renormalized, literal };

std::string to_string(RegForm f);
RegForm reg_form_from_string(const std::string& name);

// Teacher distribution sharpened by 1/tau2 and renormalized over channels,
// computed in log space. teacher: [N, K].
Tensor sharpen(const Tensor& teacher, double tau2);

// student: [N, K] on a tape; teacher is a constant.
ad::Var reg_loss(ad::Var student, const Tensor& teacher, double tau2, RegForm form = RegForm::renormalized);
double reg_loss(const Tensor& student, const Tensor& teacher, double tau2, RegForm form = RegForm::renormalized);

// teacher <- m * teacher + (1 - m) * student
void ema_update(ParamSet& teacher, const ParamSet& student, double momentum);

struct StatusUpdate {
  LearningStatus status;
  bool skipped = false;  // no positive labels in the batch
  double instantaneous = 0.0;
};

// scores and labels are [B, C]. The first update (step 0) starts the average
// at the observed value instead of blending it with the 0.5 prior.
StatusUpdate update_learning_status(const LearningStatus& status, const Tensor& scores, const Tensor& labels,
                                    double momentum);

Rates teacher_rates(const AdjustmentConfig& config);
Rates schedule_adjustment(const AdjustmentConfig& config, const LearningStatus& status, std::int64_t step,
                          std::int64_t total_steps);

}  // namespace usage::reg
