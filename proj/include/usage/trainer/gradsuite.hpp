#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "usage/numerics/gradcheck.hpp"

namespace usage::train {

// One entry of the finite-difference suite: a scalar function, an input
// sampler and the check options it runs under.
struct SuiteCase {
  std::string name;
  ad::DifferentiableFunction function;
  std::function<std::vector<Tensor>(std::uint64_t seed)> sample_inputs;
  ad::FdOptions options;
};

struct SuiteResult {
  std::string name;
  std::size_t trials = 0;
  std::size_t failed_trials = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  double seconds = 0.0;
  std::string first_failure;  // empty when all trials pass

  bool passed() const { return failed_trials == 0; }
};

// Numerics primitives, the score mappings, the losses, and both backbones on
// reduced configs.
std::vector<SuiteCase> gradient_suite();

SuiteResult run_suite_case(const SuiteCase& c, std::size_t trials, std::uint64_t seed);

}  // namespace usage::train
