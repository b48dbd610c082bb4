// One PASS/FAIL line per acceptance criterion. `--only 1,3` limits the run.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <unistd.h>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../support/baseline_oracle.hpp"
#include "usage/mappings/mappings.hpp"
#include "usage/numerics/gradcheck.hpp"
#include "usage/numerics/rng.hpp"
#include "usage/regularization/regularization.hpp"
#include "usage/seedcore/seedcore.hpp"
#include "usage/trainer/gradsuite.hpp"
#include "usage/trainer/trainer.hpp"

using namespace usage;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances --------------------------------------------------------
constexpr std::size_t kGradTrials = 100;
constexpr double kGradBudgetSeconds = 180.0;
constexpr std::size_t kInstances = 100;
constexpr double kSmoothLimitRel = 1e-6;
constexpr double kSmoothTau = 1e8;
constexpr std::size_t kBaselineSteps = 20;
constexpr double kBaselineTol = 1e-12;
constexpr double kChannelSumTol = 1e-9;
constexpr double kEntropyTol = 1e-9;
constexpr double kTau2 = 0.1;
constexpr std::size_t kMetricPairs = 50;
constexpr double kMinGainPoints = 3.0;
constexpr double kVariantBudgetSeconds = 15 * 60.0;
const std::vector<std::uint64_t> kSeeds{0, 1, 2};

struct Outcome {
  bool pass = true;
  std::vector<std::string> lines;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    lines.push_back(std::string(ok ? "ok    " : "FAIL  ") + what);
  }
  void note(const std::string& what) { lines.push_back("      " + what); }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor uniform(Rng& rng, Shape s, double lo, double hi) {
  Tensor t(std::move(s));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

bool bitwise(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    if (std::memcmp(&x, &y, sizeof(double)) != 0) return false;
  }
  return true;
}

// ---- 1 --------------------------------------------------------------------
Outcome gradient_suite() {
  Outcome o;
  double total = 0.0;
  std::size_t ops = 0;
  for (const train::SuiteCase& c : train::gradient_suite()) {
    const train::SuiteResult r = train::run_suite_case(c, kGradTrials, 1);
    total += r.seconds;
    ++ops;
    o.check(r.passed(), fmt("%-26s %zu/%zu trials pass  max rel err %.2e  tol %.0e", r.name.c_str(),
                            r.trials - r.failed_trials, r.trials, r.max_rel_error, r.tolerance));
    if (!r.passed()) o.note(r.first_failure);
  }
  o.check(total < kGradBudgetSeconds, fmt("%zu ops in %.1f s (budget %.0f s)", ops, total, kGradBudgetSeconds));
  return o;
}

// ---- 2 --------------------------------------------------------------------
Outcome exact_reductions() {
  Outcome o;
  Rng rng(2);
  std::size_t bitwise_ok = 0;
  double worst_rel = 0.0, worst_strict = 0.0, strict_at = 0.0;
  for (std::size_t i = 0; i < kInstances; ++i) {
    const std::size_t n = 4 + rng.below(61), d = 2 + rng.below(15), c = 1 + rng.below(5);
    const double bg = rng.uniform(-2, 2);
    const std::vector<Tensor> in{uniform(rng, Shape{n, d}, -2, 2), uniform(rng, Shape{c, d}, -1, 1)};
    ad::DifferentiableFunction usage1("usage1", [bg](ad::Tape&, std::span<const ad::Var> v) {
      return mappings::score_usage(v[0], v[1], bg, 1.0);
    });
    ad::DifferentiableFunction mil("mil", [bg](ad::Tape&, std::span<const ad::Var> v) {
      return mappings::score_mil(v[0], v[1], bg);
    });
    const ad::ValueAndGrad a = ad::value_and_grad(usage1, in), b = ad::value_and_grad(mil, in);
    if (bitwise(a.value, b.value) && bitwise(a.grads[0], b.grads[0]) && bitwise(a.grads[1], b.grads[1])) ++bitwise_ok;

    const FeatureMap fm(n, 1, in[0]);
    const mappings::ClassifierHead head{in[1], bg, std::nullopt};
    const Tensor gap = mappings::score_gap(fm, head), smooth = mappings::score_usage(fm, head, kSmoothTau);
    const Tensor volume = mappings::activation_volume(fm, head);
    for (std::size_t k = 0; k < c; ++k) {
      // Relative to the scale of the pooled activations; |gap| alone can sit
      // arbitrarily close to zero.
      double scale = 0.0;
      for (std::size_t r = 0; r < n; ++r) scale = std::max(scale, std::abs(volume.at(r, k)));
      const double diff = std::abs(smooth[k] - gap[k]);
      worst_rel = std::max(worst_rel, diff / scale);
      if (diff / std::abs(gap[k]) > worst_strict) {
        worst_strict = diff / std::abs(gap[k]);
        strict_at = gap[k];
      }
    }
  }
  o.check(bitwise_ok == kInstances,
          fmt("tau1 = 1 equals the alpha-weighted pooling path bitwise (values and gradients): %zu/%zu", bitwise_ok,
              kInstances));
  o.check(worst_rel <= kSmoothLimitRel,
          fmt("tau1 = %.0e matches GAP: max gap / activation scale %.2e over %zu instances (tol %.0e)", kSmoothTau,
              worst_rel, kInstances, kSmoothLimitRel));
  o.note(fmt("gap / |GAP score| peaks at %.2e where the GAP score is %.2e", worst_strict, strict_at));

  for (backbone::Kind kind : {backbone::Kind::conv, backbone::Kind::transformer}) {
    train::RunConfig c = train::default_config(kind);
    c.mapping = mappings::Mapping::cam_gap;
    c.regularization_enabled = false;
    c.lambda = 0.0;
    const synth::Dataset data = synth::generate_dataset(c.data.seed, c.data.train_count, c.data.spec, synth::Split::train);
    train::TrainOptions opts;
    opts.max_steps = kBaselineSteps;
    const train::RunResult run = train::train_seed_model(c, data, opts);
    const oracle::BaselineTrace ref = oracle::run_baseline(c, data, kBaselineSteps);
    double worst = 0.0;
    for (std::size_t s = 0; s < kBaselineSteps; ++s) {
      worst = std::max(worst, std::abs(ref.losses[s] - run.steps.at(s).total_loss));
    }
    o.check(run.steps.size() == kBaselineSteps && worst <= kBaselineTol,
            fmt("%s: regularization-off trajectory vs independent baseline loop, %zu steps, max loss gap %.2e (tol %.0e)",
                backbone::to_string(kind).c_str(), kBaselineSteps, worst, kBaselineTol));
    const oracle::ParamGap gap = oracle::param_gap(ref.params, run.model.student, c.backbone.feature_dim);
    o.note(fmt("parameter gap %.2e (attention key-bias slice %.2e)", gap.rest, gap.key_bias));
  }
  return o;
}

// ---- 3 --------------------------------------------------------------------
Tensor random_distribution(Rng& rng, std::size_t n, std::size_t k, double spread) {
  Tensor t(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += t.at(i, c) = std::exp(rng.uniform(-spread, spread));
    for (std::size_t c = 0; c < k; ++c) t.at(i, c) /= z;
  }
  return t;
}

Outcome distribution_properties() {
  Outcome o;
  Rng rng(3);
  double worst_sum = 0.0;
  for (std::size_t i = 0; i < kInstances; ++i) {
    const std::size_t n = 1 + rng.below(64), d = 1 + rng.below(16), c = 1 + rng.below(6);
    const double scale = std::exp(rng.uniform(std::log(0.01), std::log(100.0)));
    const FeatureMap fm(n, 1, uniform(rng, Shape{n, d}, -scale, scale));
    const mappings::ClassifierHead head{uniform(rng, Shape{c, d}, -1, 1), rng.uniform(-5, 5), std::nullopt};
    const Tensor alpha = mappings::spatial_activation_distribution(fm, head);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k <= c; ++k) s += alpha.at(r, k);
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
  }
  o.check(worst_sum <= kChannelSumTol,
          fmt("alpha channel sums: max |sum - 1| = %.2e over %zu instances (tol %.0e)", worst_sum, kInstances,
              kChannelSumTol));

  // Independent sharpening and entropy in plain loops.
  double min_margin = INFINITY, worst_eq = 0.0;
  std::size_t teacher_nonzero = 0;
  for (std::size_t i = 0; i < kInstances; ++i) {
    const std::size_t n = 1 + rng.below(16), k = 2 + rng.below(5);
    const Tensor s = random_distribution(rng, n, k, 2.0), t = random_distribution(rng, n, k, 1.0);
    Tensor p(t.shape());
    double entropy = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += p.at(r, c) = std::pow(t.at(r, c), 1.0 / kTau2);
      for (std::size_t c = 0; c < k; ++c) {
        p.at(r, c) /= z;
        if (p.at(r, c) > 0.0) entropy -= p.at(r, c) * std::log(p.at(r, c));
      }
    }
    const double bound = kTau2 * entropy / static_cast<double>(n);
    min_margin = std::min(min_margin, reg::reg_loss(s, t, kTau2) - bound);
    worst_eq = std::max(worst_eq, std::abs(reg::reg_loss(p, t, kTau2) - bound));

    ad::DifferentiableFunction both("reg", [](ad::Tape&, std::span<const ad::Var> v) {
      return reg::reg_loss(v[0], v[1].value(), kTau2);
    });
    const ad::ValueAndGrad vg = ad::value_and_grad(both, std::vector<Tensor>{s, t});
    for (double g : vg.grads[1].values()) teacher_nonzero += g != 0.0;
  }
  o.check(min_margin >= -kEntropyTol,
          fmt("reg_loss >= tau2 * sharpened-teacher entropy: min margin %.2e over %zu pairs", min_margin, kInstances));
  o.check(worst_eq <= kEntropyTol,
          fmt("equality at student = sharpened teacher: max gap %.2e (tol %.0e)", worst_eq, kEntropyTol));
  o.check(teacher_nonzero == 0, fmt("teacher gradient entries that are not exactly zero: %zu", teacher_nonzero));
  return o;
}

// ---- 4 --------------------------------------------------------------------
double ratio(std::uint64_t a, std::uint64_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

Outcome metric_oracle() {
  Outcome o;
  Rng rng(4);
  std::size_t matched = 0, compared = 0;
  for (std::size_t pair = 0; pair < kMetricPairs; ++pair) {
    const std::size_t h = 1 + rng.below(12), w = 1 + rng.below(12), classes = 1 + rng.below(4);
    // Some classes are left out of one or both maps.
    const int top_pred = static_cast<int>(rng.below(classes + 1)), top_gt = static_cast<int>(rng.below(classes + 1));
    seed::SeedLabelMap pred{h, w, std::vector<int>(h * w)}, gt{h, w, std::vector<int>(h * w)};
    for (std::size_t i = 0; i < h * w; ++i) {
      pred.labels[i] = static_cast<int>(rng.below(static_cast<std::size_t>(top_pred) + 1));
      gt.labels[i] = static_cast<int>(rng.below(static_cast<std::size_t>(top_gt) + 1));
    }
    for (seed::MetricsMode mode : {seed::MetricsMode::conventional, seed::MetricsMode::literal}) {
      const seed::MetricsReport r = seed::evaluate_seed_metrics(pred, gt, classes, mode);
      bool ok = r.per_class.size() == classes;
      double iou_sum = 0.0, fpr_sum = 0.0, fnr_sum = 0.0;
      for (std::size_t k = 0; k <= classes; ++k) {
        std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (std::size_t i = 0; i < h * w; ++i) {
          const bool p = pred.labels[i] == static_cast<int>(k), g = gt.labels[i] == static_cast<int>(k);
          tp += p && g;
          fp += p && !g;
          fn += !p && g;
          tn += !p && !g;
        }
        const double iou = tp + fp + fn == 0 ? 1.0 : ratio(tp, tp + fp + fn);
        iou_sum += iou;
        ok = ok && r.counts.at(k).tp == tp && r.counts.at(k).fp == fp && r.counts.at(k).fn == fn && r.counts.at(k).tn == tn;
        if (k == 0) {
          ok = ok && r.background_iou == iou;
          continue;
        }
        const double fpr = ratio(fp, tp + fp);
        const double fnr = mode == seed::MetricsMode::conventional ? ratio(fn, tp + fn) : ratio(fn, tp + fp + fn);
        fpr_sum += fpr;
        fnr_sum += fnr;
        const seed::ClassMetrics& m = r.per_class[k - 1];
        ok = ok && m.class_id == k && m.iou == iou && m.fpr == fpr && m.fnr == fnr;
      }
      ok = ok && r.miou == iou_sum / static_cast<double>(classes + 1) &&
           r.mean_fpr == fpr_sum / static_cast<double>(classes) && r.mean_fnr == fnr_sum / static_cast<double>(classes);
      matched += ok;
      ++compared;
    }
  }
  o.check(matched == compared,
          fmt("brute-force confusion oracle matches exactly: %zu/%zu (pairs x both modes)", matched, compared));

  const train::RunConfig c = train::default_config(backbone::Kind::transformer);
  const synth::Dataset eval = synth::generate_dataset(c.data.seed, c.data.eval_count, c.data.spec, synth::Split::eval);
  std::vector<FeatureMap> feats;
  const std::size_t classes = eval.num_classes();
  for (const synth::Sample& s : eval.samples) {
    Tensor f(Shape{s.downsampled.labels.size(), classes}, 0.0);
    for (std::size_t i = 0; i < s.downsampled.labels.size(); ++i) {
      if (s.downsampled.labels[i] > 0) f.at(i, static_cast<std::size_t>(s.downsampled.labels[i] - 1)) = 1.0;
    }
    feats.emplace_back(s.downsampled.height, s.downsampled.width, f);
  }
  Tensor eye(Shape{classes, classes}, 0.0);
  for (std::size_t i = 0; i < classes; ++i) eye.at(i, i) = 1.0;
  const seed::MetricsReport planted = train::evaluate_features(feats, eye, eval, c.background_threshold, c.metrics_mode);
  o.check(planted.miou == 1.0, fmt("planted one-hot model on the eval split: mIoU %.6f", planted.miou));
  return o;
}

// ---- 5 and 6 ------------------------------------------------------------------
const train::Comparison& comparison() {
  static const train::Comparison cmp = [] {
    const train::RunConfig base = train::default_config(backbone::Kind::transformer);
    const auto& d = base.data;
    const synth::Dataset train = synth::generate_dataset(d.seed, d.train_count, d.spec, synth::Split::train);
    const synth::Dataset eval = synth::generate_dataset(d.seed, d.eval_count, d.spec, synth::Split::eval);
    std::vector<train::Variant> vs;
    for (backbone::Kind k : {backbone::Kind::conv, backbone::Kind::transformer}) {
      for (const char* p : {"cam", "usage", "usage-noreg", "usage-fixed"}) vs.push_back(train::make_variant(p, k, base));
    }
    return train::run_comparison(vs, train, eval, kSeeds, [](const std::string& v, std::uint64_t s, const train::RunResult& r) {
      if (r.metrics) {
        std::printf("  run %-24s seed %llu  mIoU %.4f  FPR %.4f  FNR %.4f  %.0f s\n", v.c_str(),
                    static_cast<unsigned long long>(s), r.metrics->miou, r.metrics->mean_fpr, r.metrics->mean_fnr,
                    r.seconds);
      } else {
        std::printf("  run %-24s seed %llu  aborted: %s\n", v.c_str(), static_cast<unsigned long long>(s),
                    r.abort_message.c_str());
      }
      std::fflush(stdout);
    });
  }();
  return cmp;
}

std::string row_text(const train::VariantRow& r) {
  return fmt("%-24s mIoU %.4f  FPR %.4f  FNR %.4f  (%zu seeds, %.0f s)", r.name.c_str(), r.miou_mean, r.fpr_mean,
             r.fnr_mean, r.reports.size(), r.seconds);
}

Outcome directional() {
  Outcome o;
  const train::Comparison& cmp = comparison();
  for (const auto& r : cmp.rows) {
    o.note(row_text(r));
    for (const auto& e : r.errors) o.note("  error: " + e);
  }
  const auto& cam_c = cmp.row("cam/conv");
  const auto& cam_t = cmp.row("cam/transformer");
  const auto& use_c = cmp.row("usage/conv");
  const auto& use_t = cmp.row("usage/transformer");
  for (const auto* r : {&cam_c, &cam_t, &use_c, &use_t}) {
    o.check(r->errors.empty() && r->reports.size() == kSeeds.size(), r->name + ": all seeds completed");
    o.check(r->seconds <= kVariantBudgetSeconds, fmt("%s: %.0f s (budget %.0f s)", r->name.c_str(), r->seconds, kVariantBudgetSeconds));
  }
  o.check(cam_t.fpr_mean > cam_c.fpr_mean,
          fmt("(a) transformer CAM FPR %.4f > conv CAM FPR %.4f", cam_t.fpr_mean, cam_c.fpr_mean));
  o.check(cam_c.fnr_mean > cam_t.fnr_mean,
          fmt("(b) conv CAM FNR %.4f > transformer CAM FNR %.4f", cam_c.fnr_mean, cam_t.fnr_mean));
  const double gain_t = 100.0 * (use_t.miou_mean - cam_t.miou_mean), gain_c = 100.0 * (use_c.miou_mean - cam_c.miou_mean);
  o.check(use_t.fpr_mean < cam_t.fpr_mean,
          fmt("(c) transformer USAGE FPR %.4f < CAM FPR %.4f", use_t.fpr_mean, cam_t.fpr_mean));
  o.check(gain_t >= kMinGainPoints, fmt("(c) transformer USAGE mIoU gain %+.2f points (need >= %.0f)", gain_t, kMinGainPoints));
  o.check(use_c.fnr_mean < cam_c.fnr_mean,
          fmt("(d) conv USAGE FNR %.4f < CAM FNR %.4f", use_c.fnr_mean, cam_c.fnr_mean));
  o.check(gain_c >= kMinGainPoints, fmt("(d) conv USAGE mIoU gain %+.2f points (need >= %.0f)", gain_c, kMinGainPoints));
  return o;
}

Outcome ablations() {
  Outcome o;
  const train::Comparison& cmp = comparison();
  for (const char* k : {"conv", "transformer"}) {
    const auto& full = cmp.row(std::string("usage/") + k);
    const auto& noreg = cmp.row(std::string("usage-noreg/") + k);
    const auto& fixed = cmp.row(std::string("usage-fixed/") + k);
    o.note(row_text(noreg));
    o.note(row_text(fixed));
    o.check(noreg.errors.empty() && fixed.errors.empty(), std::string(k) + ": ablation runs completed");
    o.check(full.miou_mean > noreg.miou_mean,
            fmt("%s: regularization mIoU %.4f > without %.4f (%+.2f points)", k, full.miou_mean, noreg.miou_mean,
                100.0 * (full.miou_mean - noreg.miou_mean)));
    o.check(full.miou_mean >= fixed.miou_mean,
            fmt("%s: self-adaptive mIoU %.4f >= fixed %.4f (%+.2f points)", k, full.miou_mean, fixed.miou_mean,
                100.0 * (full.miou_mean - fixed.miou_mean)));
  }
  return o;
}

// ---- 7 --------------------------------------------------------------------
std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome reproducibility() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / ("usage_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string config = std::string(USAGE_CONFIG_DIR) + "/usage_conv.toml";
  std::vector<std::string> metrics;
  for (const char* name : {"a", "b"}) {
    const std::string cmd = std::string("USAGE_DETERMINISTIC=1 '") + USAGE_CLI_PATH + "' train -c '" + config + "' -o '" +
                            (root / name).string() + "' > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    o.check(rc == 0, fmt("train run %s exit status %d", name, rc));
    metrics.push_back(slurp(root / name / "metrics.json"));
  }
  o.check(!metrics[0].empty() && metrics[0] == metrics[1],
          fmt("metrics.json byte-identical across two runs (%zu bytes)", metrics[0].size()));
  fs::remove_all(root);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--only") {
      std::stringstream ss(argv[i + 1]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    }
  }
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"exact reductions", exact_reductions},
      {"distribution and loss properties", distribution_properties},
      {"metric oracle", metric_oracle},
      {"directional reproduction", directional},
      {"ablation directions", ablations},
      {"reproducibility", reproducibility},
  };
  bool all = true;
  std::vector<std::string> summary;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    std::printf("== criterion %d: %s\n", id, criteria[i].first);
    std::fflush(stdout);
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& l : o.lines) std::printf("  %s\n", l.c_str());
    const std::string line = fmt("%s criterion %d: %s (%.0f s)", o.pass ? "PASS" : "FAIL", id, criteria[i].first, secs);
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary.push_back(line);
    all = all && o.pass;
  }
  std::printf("\n== summary\n");
  for (const auto& l : summary) std::printf("%s\n", l.c_str());
  return all ? 0 : 1;
}
