#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "usage/numerics/tape.hpp"
#include "usage/numerics/tensor.hpp"

namespace usage::ad {

// A forward computation over tensor inputs. Parameters are passed as inputs.
struct DifferentiableFunction {
  using Forward = std::function<Var(Tape&, std::span<const Var>)>;

  DifferentiableFunction(std::string name, Forward forward);

  std::string name;
  Forward forward;
};

struct ValueAndGrad {
  Tensor value;
  std::vector<Tensor> grads;  // one per input, same shapes
};

// Evaluates f and differentiates it. A non-scalar output is differentiated
// as the sum of its entries.
ValueAndGrad value_and_grad(const DifferentiableFunction& f, std::span<const Tensor> inputs);

// Forward only, no tape recording.
Tensor evaluate(const DifferentiableFunction& f, std::span<const Tensor> inputs);

struct FdOptions {
  double epsilon = 1e-6;
  double tolerance = 1e-4;
  // Entries checked per input; 0 checks all of them, otherwise a seeded
  // random subset of this size.
  std::size_t max_entries_per_input = 0;
  std::uint64_t seed = 0;
};

struct FdEntry {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  // A branch of a max/relu/floor flips inside [x - eps, x + eps].
  bool nondifferentiable = false;
  // Discrepancy within the round-off floor. Such entries pass, and leave
  // max_rel_error only when the gradient itself is under the floor.
  bool below_noise = false;
  bool failed = false;
};

struct FdReport {
  std::string name;
  std::vector<FdEntry> entries;
  double max_rel_error = 0.0;  // over differentiable entries with resolvable gradients
  std::size_t failures = 0;
  std::size_t nondifferentiable = 0;

  bool passed() const { return failures == 0; }
};

// |analytic - central| / max(|analytic|, |central|, 1e-8)
double relative_error(double analytic, double numeric);

// Entries whose absolute discrepancy is below this many ulps of |f|, divided
// by epsilon, pass regardless of relative error (round-off floor).
inline constexpr double kRoundoffUlps = 64.0;

// Compares analytic gradients against central differences. Requires a
// scalar-valued f and epsilon in (0, 1e-2].
FdReport finite_difference_check(const DifferentiableFunction& f, std::span<const Tensor> inputs,
                                 const FdOptions& options = {});

// Named single-op functions used by the gradient suite. Each wraps the op as
// sum(op(x) * r) with a fixed random r so the result is scalar.
struct OpCase {
  std::string name;
  DifferentiableFunction function;
  // Draws a random input set away from non-smooth points.
  std::function<std::vector<Tensor>(std::uint64_t seed)> sample_inputs;
};

std::vector<std::string> op_names();
// Throws UnsupportedOpError for names outside op_names().
OpCase op_case(std::string_view name);

}  // namespace usage::ad
