#include "usage/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "usage/error.hpp"
#include "usage/numerics/ops.hpp"
#include "usage/numerics/rng.hpp"

namespace usage::ad {

DifferentiableFunction::DifferentiableFunction(std::string name_, Forward forward_)
    : name(std::move(name_)), forward(std::move(forward_)) {
  if (!forward) throw ValueError("DifferentiableFunction '" + name + "' has no forward");
}

ValueAndGrad value_and_grad(const DifferentiableFunction& f, std::span<const Tensor> inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.input(t));
  const Var out = f.forward(tape, vars);
  ValueAndGrad result{out.value(), {}};
  tape.backward(out);
  result.grads.reserve(vars.size());
  for (const Var& v : vars) result.grads.push_back(tape.grad(v));
  return result;
}

Tensor evaluate(const DifferentiableFunction& f, std::span<const Tensor> inputs) {
  Tape tape(false);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  return f.forward(tape, vars).value();
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

struct Probe {
  double value;
  std::uint64_t signature;
};

Probe probe(const DifferentiableFunction& f, std::span<const Tensor> inputs) {
  Tape tape(false);
  tape.set_track_branches(true);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  const Var out = f.forward(tape, vars);
  return {out.value().item(), tape.branch_signature()};
}

std::vector<std::size_t> pick_entries(std::size_t n, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit == 0 || limit >= n) return idx;
  for (std::size_t i = 0; i < limit; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

FdReport finite_difference_check(const DifferentiableFunction& f, std::span<const Tensor> inputs,
                                 const FdOptions& options) {
  if (inputs.empty()) throw ValueError("finite_difference_check: '" + f.name + "' has no inputs");
  if (!(options.epsilon > 0.0 && options.epsilon <= 1e-2)) {
    throw ValueError("finite_difference_check: epsilon must lie in (0, 1e-2]");
  }

  Tape tape;
  tape.set_track_branches(true);
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.input(t));
  const Var out = f.forward(tape, vars);
  if (out.size() != 1) {
    throw ValueError("finite_difference_check: '" + f.name + "' is not scalar-valued, shape " +
                     shape_string(out.shape()));
  }
  const std::uint64_t base_signature = tape.branch_signature();
  tape.backward(out);

  FdReport report;
  report.name = f.name;
  std::vector<Tensor> work(inputs.begin(), inputs.end());
  Rng rng(options.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    for (std::size_t i : pick_entries(inputs[k].size(), options.max_entries_per_input, rng)) {
      const double x0 = work[k][i];
      work[k][i] = x0 + options.epsilon;
      const Probe plus = probe(f, work);
      work[k][i] = x0 - options.epsilon;
      const Probe minus = probe(f, work);
      work[k][i] = x0;

      FdEntry e;
      e.input = k;
      e.index = i;
      e.analytic = analytic[i];
      e.numeric = (plus.value - minus.value) / (2.0 * options.epsilon);
      e.rel_error = relative_error(e.analytic, e.numeric);
      e.nondifferentiable = plus.signature != minus.signature || plus.signature != base_signature;
      // Central differences cannot resolve anything below the round-off in f.
      const double noise = kRoundoffUlps * std::numeric_limits<double>::epsilon() *
                           std::max({std::abs(plus.value), std::abs(minus.value), 1.0}) / options.epsilon;
      e.below_noise = std::abs(e.analytic - e.numeric) <= noise;
      e.failed = !e.nondifferentiable && !e.below_noise && e.rel_error > options.tolerance;
      if (e.nondifferentiable) {
        ++report.nondifferentiable;
      } else if (!e.below_noise || std::max(std::abs(e.analytic), std::abs(e.numeric)) > noise) {
        report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      }
      if (e.failed) ++report.failures;
      report.entries.push_back(e);
    }
  }
  return report;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Entries with |x| in [lo, hi] and random sign; keeps relu and friends away from kinks.
Tensor signed_away_from_zero(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(lo, hi);
  return t;
}

using Builder = std::function<Var(std::span<const Var>)>;
using Sampler = std::function<std::vector<Tensor>(Rng&)>;

// sum(op(x) * r), r drawn from a stream keyed by the op name and output shape.
DifferentiableFunction projected(const std::string& name, Builder build) {
  return DifferentiableFunction(name, [name, build](Tape& tape, std::span<const Var> in) {
    const Var y = build(in);
    std::uint64_t key = std::hash<std::string>{}(name);
    for (std::size_t d : y.shape()) key = mix64(key ^ d);
    Rng rng(key);
    Tensor r(y.shape());
    for (double& v : r.values()) v = rng.uniform(-1.0, 1.0);
    (void)tape;
    return sum(mul_const(y, r));
  });
}

struct CatalogEntry {
  Builder build;
  Sampler sample;
};

const std::map<std::string, CatalogEntry, std::less<>>& catalog() {
  static const std::map<std::string, CatalogEntry, std::less<>> entries = [] {
    std::map<std::string, CatalogEntry, std::less<>> m;
    auto mat = [](std::size_t r, std::size_t c) {
      return [r, c](Rng& rng) { return std::vector<Tensor>{random_tensor({r, c}, rng, -1.0, 1.0)}; };
    };
    auto two = [](Shape a, Shape b) {
      return [a, b](Rng& rng) {
        return std::vector<Tensor>{random_tensor(a, rng, -1.0, 1.0), random_tensor(b, rng, -1.0, 1.0)};
      };
    };
    m["add"] = {[](auto in) { return add(in[0], in[1]); }, two({3, 4}, {3, 4})};
    m["sub"] = {[](auto in) { return sub(in[0], in[1]); }, two({3, 4}, {3, 4})};
    m["mul"] = {[](auto in) { return mul(in[0], in[1]); }, two({3, 4}, {3, 4})};
    m["div"] = {[](auto in) { return div(in[0], in[1]); },
                [](Rng& rng) {
                  return std::vector<Tensor>{random_tensor({3, 4}, rng, -1.0, 1.0),
                                             random_tensor({3, 4}, rng, 0.5, 2.0)};
                }};
    m["scale"] = {[](auto in) { return scale(in[0], -1.7); }, mat(3, 4)};
    m["matmul"] = {[](auto in) { return matmul(in[0], in[1]); }, two({3, 5}, {5, 4})};
    m["matmul_nt"] = {[](auto in) { return matmul_nt(in[0], in[1]); }, two({3, 5}, {4, 5})};
    m["transpose"] = {[](auto in) { return transpose(in[0]); }, mat(3, 5)};
    m["conv2d"] = {[](auto in) { return conv2d(in[0], in[1], in[2], 2, 1); },
                   [](Rng& rng) {
                     return std::vector<Tensor>{random_tensor({2, 6, 6}, rng, -1.0, 1.0),
                                                random_tensor({3, 2, 3, 3}, rng, -1.0, 1.0),
                                                random_tensor({3}, rng, -1.0, 1.0)};
                   }};
    m["exp"] = {[](auto in) { return exp(in[0]); }, mat(3, 4)};
    m["log"] = {[](auto in) { return log(in[0]); },
                [](Rng& rng) { return std::vector<Tensor>{random_tensor({3, 4}, rng, 0.1, 3.0)}; }};
    m["pow"] = {[](auto in) { return pow(in[0], 0.02); },
                [](Rng& rng) { return std::vector<Tensor>{random_tensor({3, 4}, rng, 0.05, 1.0)}; }};
    m["pow_sharpen"] = {[](auto in) { return pow(in[0], 10.0); },
                        [](Rng& rng) { return std::vector<Tensor>{random_tensor({3, 4}, rng, 0.2, 1.0)}; }};
    m["sigmoid"] = {[](auto in) { return sigmoid(in[0]); }, mat(3, 4)};
    m["relu"] = {[](auto in) { return relu(in[0]); },
                 [](Rng& rng) { return std::vector<Tensor>{signed_away_from_zero({3, 4}, rng, 0.05, 1.0)}; }};
    m["gelu"] = {[](auto in) { return gelu(in[0]); }, mat(3, 4)};
    m["softmax"] = {[](auto in) { return softmax_rows(in[0]); }, mat(4, 5)};
    m["layer_norm"] = {[](auto in) { return layer_norm_rows(in[0], in[1], in[2]); },
                       [](Rng& rng) {
                         return std::vector<Tensor>{random_tensor({3, 6}, rng, -1.0, 1.0),
                                                    random_tensor({6}, rng, 0.5, 1.5),
                                                    random_tensor({6}, rng, -0.5, 0.5)};
                       }};
    m["sum"] = {[](auto in) { return scale(sum(in[0]), 1.0); }, mat(3, 4)};
    m["mean"] = {[](auto in) { return mean(in[0]); }, mat(3, 4)};
    m["max"] = {[](auto in) { return max(in[0]); }, mat(3, 4)};
    m["broadcast_rows"] = {[](auto in) { return broadcast_rows(in[0], 3); },
                           [](Rng& rng) { return std::vector<Tensor>{random_tensor({4}, rng, -1.0, 1.0)}; }};
    m["add_rows"] = {[](auto in) { return add_rows(in[0], in[1]); }, two({3, 4}, {4})};
    m["mul_rows"] = {[](auto in) { return mul_rows(in[0], in[1]); }, two({3, 4}, {4})};
    m["mul_cols"] = {[](auto in) { return mul_cols(in[0], in[1]); }, two({3, 4}, {3})};
    m["concat_cols"] = {[](auto in) { return concat_cols(in[0], in[1]); }, two({3, 2}, {3, 4})};
    m["slice_cols"] = {[](auto in) { return slice_cols(in[0], 1, 2); }, mat(3, 4)};
    m["sum_over_rows"] = {[](auto in) { return sum_over_rows(in[0]); }, mat(3, 4)};
    m["mean_over_rows"] = {[](auto in) { return mean_over_rows(in[0]); }, mat(3, 4)};
    m["mean_over_cols"] = {[](auto in) { return mean_over_cols(in[0]); }, mat(3, 4)};
    m["bce_with_logits"] = {[](auto in) { return bce_with_logits(in[0], Tensor::vector({1, 0, 1, 0})); },
                            [](Rng& rng) { return std::vector<Tensor>{random_tensor({4}, rng, -3.0, 3.0)}; }};
    return m;
  }();
  return entries;
}

}  // namespace

std::vector<std::string> op_names() {
  std::vector<std::string> names;
  for (const auto& [name, entry] : catalog()) names.push_back(name);
  return names;
}

OpCase op_case(std::string_view name) {
  const auto it = catalog().find(name);
  if (it == catalog().end()) throw UnsupportedOpError("unsupported op '" + std::string(name) + "'");
  const CatalogEntry entry = it->second;
  const std::string n(name);
  return OpCase{n, projected(n, entry.build), [sample = entry.sample, n](std::uint64_t seed) {
                  Rng rng(stream_key({std::hash<std::string>{}(n), seed}));
                  return sample(rng);
                }};
}

}  // namespace usage::ad
