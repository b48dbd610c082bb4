#include "usage/regularization/regularization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "usage/error.hpp"

namespace usage::reg {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::fixed: return "fixed";
    case Strategy::linear: return "linear";
    case Strategy::self_adaptive: return "self_adaptive";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& name) {
  if (name == "fixed") return Strategy::fixed;
  if (name == "linear") return Strategy::linear;
  if (name == "self_adaptive" || name == "self-adaptive") return Strategy::self_adaptive;
  throw ValueError("unknown strategy '" + name + "' (expected fixed, linear or self_adaptive)");
}

std::string to_string(RegForm f) { return f == RegForm::literal ? "literal" : "renormalized"; }

RegForm reg_form_from_string(const std::string& name) {
  if (name == "renormalized") return RegForm::renormalized;
  if (name == "literal") return RegForm::literal;
  throw ValueError("unknown reg form '" + name + "' (expected renormalized or literal)");
}

void AdjustmentConfig::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v < 1.0; };
  if (!in_unit(gamma_t)) throw ConfigError("gamma_t", "must lie in [0, 1)");
  if (!in_unit(gamma_s_init) || gamma_s_init < gamma_t) {
    throw ConfigError("gamma_s_init", "must satisfy gamma_t <= gamma_s_init < 1");
  }
  if (!in_unit(gamma_s_max) || gamma_s_max < gamma_s_init) {
    throw ConfigError("gamma_s_max", "must satisfy gamma_s_init <= gamma_s_max < 1");
  }
  if (!in_unit(delta_s_init)) throw ConfigError("delta_s_init", "must lie in [0, 1)");
  if (!in_unit(delta_s_max) || delta_s_max < delta_s_init) {
    throw ConfigError("delta_s_max", "must satisfy delta_s_init <= delta_s_max < 1");
  }
  if (!(ema_momentum > 0.0 && ema_momentum < 1.0)) throw ConfigError("ema_momentum", "must lie in (0, 1)");
  if (!(status_momentum > 0.0 && status_momentum < 1.0)) throw ConfigError("status_momentum", "must lie in (0, 1)");
}

namespace {

void check_pair(const Shape& student, const Tensor& teacher, double tau2) {
  if (!(tau2 > 0.0) || !std::isfinite(tau2)) throw ValueError("reg_loss: tau2 must be a positive real");
  if (student != teacher.shape() || teacher.rank() != 2) {
    throw ShapeError("reg_loss: student " + shape_string(student) + " vs teacher " + shape_string(teacher.shape()));
  }
}

}  // namespace

Tensor sharpen(const Tensor& teacher, double tau2) {
  const std::size_t n = teacher.dim(0), k = teacher.dim(1);
  Tensor p(teacher.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      p.at(i, c) = std::log(std::max(teacher.at(i, c), ad::kPowFloor)) / tau2;
      top = std::max(top, p.at(i, c));
    }
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      p.at(i, c) = std::exp(p.at(i, c) - top);
      z += p.at(i, c);
    }
    for (std::size_t c = 0; c < k; ++c) p.at(i, c) /= z;
  }
  return p;
}

ad::Var reg_loss(ad::Var student, const Tensor& teacher, double tau2, RegForm form) {
  check_pair(student.shape(), teacher, tau2);
  const double n = static_cast<double>(teacher.dim(0));
  const ad::Var log_s = ad::log_floored(student);
  if (form == RegForm::renormalized) {
    return ad::scale(ad::sum(ad::mul_const(log_s, sharpen(teacher, tau2))), -tau2 / n);
  }
  // -tau2^2 / N * sum t^(1/tau2) * (1/tau2) log s
  Tensor weights(teacher.shape());
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    weights[i] = std::pow(std::max(teacher[i], ad::kPowFloor), 1.0 / tau2);
  }
  return ad::scale(ad::sum(ad::mul_const(log_s, weights)), -tau2 / n);
}

double reg_loss(const Tensor& student, const Tensor& teacher, double tau2, RegForm form) {
  ad::Tape t(false);
  return reg_loss(t.constant(student), teacher, tau2, form).value().item();
}

void ema_update(ParamSet& teacher, const ParamSet& student, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValueError("ema_update: momentum must lie in [0, 1)");
  if (!teacher.same_structure(student)) throw ShapeError("ema_update: teacher and student parameters differ");
  for (auto& [name, t] : teacher) {
    const Tensor& s = student.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = momentum * t[i] + (1.0 - momentum) * s[i];
  }
}

StatusUpdate update_learning_status(const LearningStatus& status, const Tensor& scores, const Tensor& labels,
                                    double momentum) {
  if (scores.rank() != 2 || scores.shape() != labels.shape()) {
    throw ShapeError("update_learning_status: scores " + shape_string(scores.shape()) + " vs labels " +
                     shape_string(labels.shape()));
  }
  const std::size_t b = scores.dim(0), c = scores.dim(1);
  double total = 0.0;
  std::size_t images = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t k = 0; k < c; ++k) {
      if (labels.at(i, k) != 1.0) continue;
      const double s = scores.at(i, k);
      sum += s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
      ++positives;
    }
    if (positives == 0) continue;
    total += sum / static_cast<double>(positives);
    ++images;
  }
  StatusUpdate out{status, images == 0, 0.0};
  if (images == 0) return out;
  out.instantaneous = total / static_cast<double>(images);
  out.status.value = status.step == 0 ? out.instantaneous
                                      : momentum * status.value + (1.0 - momentum) * out.instantaneous;
  ++out.status.step;
  return out;
}

Rates teacher_rates(const AdjustmentConfig& config) { return Rates{config.gamma_t, 0.0}; }

Rates schedule_adjustment(const AdjustmentConfig& config, const LearningStatus& status, std::int64_t step,
                          std::int64_t total_steps) {
  double f = 1.0;
  switch (config.strategy) {
    case Strategy::fixed: f = 1.0; break;
    case Strategy::linear:
      f = total_steps <= 0 ? 1.0 : std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
      break;
    case Strategy::self_adaptive: f = std::clamp((status.value - 0.5) / 0.5, 0.0, 1.0); break;
  }
  return Rates{config.gamma_s_init + (config.gamma_s_max - config.gamma_s_init) * f,
               config.delta_s_init + (config.delta_s_max - config.delta_s_init) * f};
}

}  // namespace usage::reg
