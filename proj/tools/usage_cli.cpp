#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "usage/backbones/backbones.hpp"
#include "usage/error.hpp"
#include "usage/io/render.hpp"
#include "usage/mappings/mappings.hpp"
#include "usage/trainer/config_file.hpp"
#include "usage/trainer/gradsuite.hpp"
#include "usage/trainer/trainer.hpp"

namespace fs = std::filesystem;
using namespace usage;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

bool deterministic_env() {
  const char* v = std::getenv("USAGE_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << text;
}

// Output directories are built under a sibling staging path and swapped in
// at the end, so a directory never mixes files from two invocations. An
// existing directory is only replaced if it is empty or carries our manifest.
class OutputDir {
 public:
  explicit OutputDir(const std::string& path) : final_(path) {
    if (path.empty()) throw ConfigError("out", "an output directory is required");
    if (fs::exists(final_)) {
      if (!fs::is_directory(final_)) throw ConfigError("out", "'" + path + "' exists and is not a directory");
      if (!fs::is_empty(final_) && !fs::exists(final_ / "manifest.json")) {
        throw ConfigError("out", "'" + path + "' is not empty and was not written by this tool");
      }
    }
    staging_ = final_;
    staging_ += ".partial-" + std::to_string(::getpid());
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;
  ~OutputDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  const fs::path& path() const { return staging_; }

  void commit() {
    fs::remove_all(final_);
    if (final_.has_parent_path()) fs::create_directories(final_.parent_path());
    fs::rename(staging_, final_);
    committed_ = true;
  }

 private:
  fs::path final_, staging_;
  bool committed_ = false;
};

ojson manifest(const std::string& subcommand, const train::RunConfig* config, const std::string& config_path,
               const std::vector<std::string>& overrides) {
  ojson m;
  m["tool"] = "usage";
  m["subcommand"] = subcommand;
  m["config_path"] = config_path;
  m["overrides"] = overrides;
  m["deterministic"] = deterministic_env();
  if (config) m["config"] = config->to_json();
  return m;
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
};

void add_config_options(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_path, "TOML or JSON config file");
  sub->add_option("overrides", c.overrides, "key=value overrides applied after the config file");
}

// ---- subcommands ------------------------------------------------------------

int cmd_gen_data(const Common& c, std::size_t png_count) {
  const train::RunConfig cfg = train::load_run_config(c.config_path, c.overrides);
  OutputDir out(c.out);
  const auto& d = cfg.data;
  const synth::Dataset train = synth::generate_dataset(d.seed, d.train_count, d.spec, synth::Split::train);
  const synth::Dataset eval = synth::generate_dataset(d.seed, d.eval_count, d.spec, synth::Split::eval);
  synth::save_dataset(train, (out.path() / "train").string(), png_count);
  synth::save_dataset(eval, (out.path() / "eval").string(), png_count);
  std::size_t warnings = 0;
  for (const auto* ds : {&train, &eval}) {
    for (const auto& s : ds->samples) warnings += s.warnings.size();
  }
  ojson m = manifest("gen-data", &cfg, c.config_path, c.overrides);
  m["png_count"] = png_count;
  m["placement_warnings"] = warnings;
  write_text(out.path() / "manifest.json", m.dump(2) + "\n");
  out.commit();
  std::cout << "wrote " << train.samples.size() << " train and " << eval.samples.size() << " eval samples to "
            << c.out << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t trials, std::uint64_t seed, const std::string& only, const std::string& report) {
  bool ok = true;
  ojson rows = ojson::array();
  std::printf("%-26s %7s %7s %12s %9s %9s\n", "op", "trials", "failed", "max_rel_err", "tol", "seconds");
  std::size_t ran = 0;
  for (const train::SuiteCase& c : train::gradient_suite()) {
    if (!only.empty() && c.name.find(only) == std::string::npos) continue;
    const train::SuiteResult r = train::run_suite_case(c, trials, seed);
    ++ran;
    ok = ok && r.passed();
    std::printf("%-26s %7zu %7zu %12.3e %9.0e %9.3f%s\n", r.name.c_str(), r.trials, r.failed_trials, r.max_rel_error,
                r.tolerance, r.seconds, r.passed() ? "" : "  FAIL");
    if (!r.passed()) std::printf("    %s\n", r.first_failure.c_str());
    std::fflush(stdout);
    rows.push_back({{"op", r.name},
                    {"trials", r.trials},
                    {"failed_trials", r.failed_trials},
                    {"max_rel_error", r.max_rel_error},
                    {"tolerance", r.tolerance},
                    {"seconds", r.seconds},
                    {"first_failure", r.first_failure}});
  }
  if (ran == 0) throw ConfigError("only", "no op matches '" + only + "'");
  std::printf("%s\n", ok ? "all ops passed" : "FAILURES");
  if (!report.empty()) {
    ojson j;
    j["trials"] = trials;
    j["seed"] = seed;
    j["passed"] = ok;
    j["ops"] = rows;
    write_text(report, j.dump(2) + "\n");
  }
  return ok ? 0 : kExitRuntime;
}

int cmd_train(const Common& c) {
  const train::RunConfig cfg = train::load_run_config(c.config_path, c.overrides);
  OutputDir out(c.out);
  const auto& d = cfg.data;
  const synth::Dataset train = synth::generate_dataset(d.seed, d.train_count, d.spec, synth::Split::train);
  const synth::Dataset eval = synth::generate_dataset(d.seed, d.eval_count, d.spec, synth::Split::eval);
  train::TrainOptions opts;
  opts.eval = &eval;
  const std::size_t steps_per_epoch = (train.samples.size() + cfg.batch_size - 1) / cfg.batch_size;
  opts.on_step = [steps_per_epoch](const train::StepLog& s, const train::Model&) {
    if ((s.step + 1) % static_cast<std::int64_t>(steps_per_epoch) != 0) return;
    std::fprintf(stderr, "epoch %lld  loss %.4f  gen %.4f  reg %.4f  status %.3f\n",
                 static_cast<long long>((s.step + 1) / static_cast<std::int64_t>(steps_per_epoch)), s.total_loss,
                 s.gen_loss, s.reg_loss, s.status);
  };
  const train::RunResult r = train::train_seed_model(cfg, train, opts);
  train::save_run(r, out.path().string());
  ojson m = manifest("train", &cfg, c.config_path, c.overrides);
  m["aborted"] = r.aborted;
  write_text(out.path() / "manifest.json", m.dump(2) + "\n");
  out.commit();
  if (r.aborted) {
    std::fprintf(stderr, "training aborted at step %lld: %s\n", static_cast<long long>(r.abort_step),
                 r.abort_message.c_str());
    return kExitRuntime;
  }
  if (r.metrics) {
    std::printf("mIoU %.4f  FPR %.4f  FNR %.4f  (%.0fs)\n", r.metrics->miou, r.metrics->mean_fpr, r.metrics->mean_fnr,
                r.seconds);
  }
  return 0;
}

// Config and checkpoint of a finished training run, with optional overrides
// for evaluation-only keys.
struct LoadedRun {
  train::RunConfig config;
  ParamSet params;
};

LoadedRun load_run(const std::string& run_dir, bool teacher, const std::vector<std::string>& overrides) {
  const fs::path dir(run_dir);
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ConfigError("run", "no manifest.json in '" + run_dir + "'");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("run", e.what());
  }
  if (!m.contains("config") || m.value("subcommand", "") != "train") {
    throw ConfigError("run", "'" + run_dir + "' is not a training run");
  }
  nlohmann::json doc = m["config"];
  for (const std::string& o : overrides) train::apply_override(doc, o);
  LoadedRun r{train::resolve_config(doc), backbone::load_params((dir / (teacher ? "teacher.bin" : "student.bin")).string())};
  return r;
}

int cmd_eval(const std::string& run_dir, bool teacher, const std::vector<std::string>& overrides,
             const std::string& out) {
  const LoadedRun run = load_run(run_dir, teacher, overrides);
  const auto& d = run.config.data;
  const synth::Dataset eval = synth::generate_dataset(d.seed, d.eval_count, d.spec, synth::Split::eval);
  const seed::MetricsReport r = train::evaluate_model(run.params, eval, run.config);
  const std::string text = r.to_json().dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  return 0;
}

std::vector<std::string> split_list(const std::string& s, const std::string& key) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw ConfigError(key, "empty entry in '" + s + "'");
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError(key, "at least one entry is required");
  return out;
}

int cmd_compare(const Common& c, const std::string& variants, const std::string& backbones, std::size_t seed_count) {
  const train::RunConfig base = train::load_run_config(c.config_path, c.overrides);
  if (seed_count == 0) throw ConfigError("seeds", "must be positive");
  std::vector<train::Variant> vs;
  for (const std::string& b : split_list(backbones, "backbones")) {
    backbone::Kind kind;
    try {
      kind = backbone::kind_from_string(b);
    } catch (const Error& e) {
      throw ConfigError("backbones", e.what());
    }
    for (const std::string& v : split_list(variants, "variants")) {
      try {
        vs.push_back(train::make_variant(v, kind, base));
      } catch (const ConfigError& e) {
        throw ConfigError("variants", e.what());
      }
      vs.back().config.validate();
    }
  }
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < seed_count; ++i) seeds.push_back(base.seed + i);
  OutputDir out(c.out);
  const auto& d = base.data;
  const synth::Dataset train = synth::generate_dataset(d.seed, d.train_count, d.spec, synth::Split::train);
  const synth::Dataset eval = synth::generate_dataset(d.seed, d.eval_count, d.spec, synth::Split::eval);
  const fs::path runs = out.path() / "runs";
  const train::Comparison cmp =
      train::run_comparison(vs, train, eval, seeds, [&](const std::string& name, std::uint64_t s, const train::RunResult& r) {
        std::string dir = name;
        for (char& ch : dir) {
          if (ch == '/') ch = '_';
        }
        const fs::path p = runs / dir / ("seed" + std::to_string(s));
        fs::create_directories(p);
        write_text(p / "run.json", r.to_json().dump(2) + "\n");
        if (r.metrics) {
          std::fprintf(stderr, "%-22s seed %llu  mIoU %.4f  FPR %.4f  FNR %.4f  (%.0fs)\n", name.c_str(),
                       static_cast<unsigned long long>(s), r.metrics->miou, r.metrics->mean_fpr, r.metrics->mean_fnr,
                       r.seconds);
        } else {
          std::fprintf(stderr, "%-22s seed %llu  aborted: %s\n", name.c_str(), static_cast<unsigned long long>(s),
                       r.abort_message.c_str());
        }
      });
  write_text(out.path() / "comparison.csv", cmp.csv());
  write_text(out.path() / "comparison.txt", cmp.text());
  write_text(out.path() / "comparison.json", cmp.to_json().dump(2) + "\n");
  ojson m = manifest("compare", &base, c.config_path, c.overrides);
  m["variants"] = variants;
  m["backbones"] = backbones;
  m["seeds"] = seeds;
  write_text(out.path() / "manifest.json", m.dump(2) + "\n");
  out.commit();
  std::cout << cmp.text();
  bool any_error = false;
  for (const auto& row : cmp.rows) any_error = any_error || !row.errors.empty();
  return any_error ? kExitRuntime : 0;
}

int cmd_render(const std::string& run_dir, bool teacher, std::size_t count, const std::vector<std::string>& overrides,
               const std::string& out_path) {
  const LoadedRun run = load_run(run_dir, teacher, overrides);
  OutputDir out(out_path);
  const auto& d = run.config.data;
  const synth::Dataset eval =
      synth::generate_dataset(d.seed, std::min(count, d.eval_count), d.spec, synth::Split::eval);
  const Tensor& weights = run.params.at(mappings::kHeadWeights);
  const std::size_t classes = weights.dim(0);
  ojson files = ojson::array();
  for (const synth::Sample& s : eval.samples) {
    const FeatureMap f = backbone::extract_features(run.params, s.image, run.config.backbone);
    std::vector<Tensor> heat(classes);
    std::vector<seed::SeedArea> present;
    for (std::size_t cls = 1; cls <= classes; ++cls) {
      if (s.labels[cls - 1] != 1.0) continue;
      present.push_back(seed::compute_seed_area(f, weights, cls));
      heat[cls - 1] = present.back().map;
    }
    const seed::SeedLabelMap seeds =
        seed::seed_label_map(present, run.config.background_threshold, f.height, f.width);
    const io::RgbImage panel = io::render_panel(s.image, heat, f.height, f.width, seeds, s.gt_mask);
    char name[32];
    std::snprintf(name, sizeof name, "eval_%03zu.png", files.size());
    io::write_png((out.path() / name).string(), panel);
    files.push_back({{"file", name}, {"sample_index", s.index}});
  }
  ojson m = manifest("render", &run.config, "", overrides);
  m["run"] = run_dir;
  m["checkpoint"] = teacher ? "teacher" : "student";
  m["panels"] = files;
  m["layout"] = "input | per-class seed heatmap (blank when absent) | seed label map | ground truth";
  write_text(out.path() / "manifest.json", m.dump(2) + "\n");
  out.commit();
  std::cout << "wrote " << files.size() << " panels to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"USAGE seed-area laboratory"};
  app.require_subcommand(1);

  Common gen, tr, cmpc;
  std::size_t png_count = 8;
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic train/eval datasets");
  add_config_options(g, gen);
  g->add_option("-o,--out", gen.out, "Output directory")->required();
  g->add_option("--png", png_count, "Number of samples per split also written as PNG");

  std::size_t trials = 100;
  std::uint64_t gc_seed = 1;
  std::string only, report;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gc->add_option("--trials", trials, "Random trials per op");
  gc->add_option("--seed", gc_seed, "Suite seed");
  gc->add_option("--only", only, "Run ops whose name contains this string");
  gc->add_option("--report", report, "Write a JSON report here");

  auto* t = app.add_subcommand("train", "Train one model and evaluate its seed areas");
  add_config_options(t, tr);
  t->add_option("-o,--out", tr.out, "Run directory")->required();

  std::string run_dir, eval_out;
  bool teacher = false;
  std::vector<std::string> eval_overrides;
  auto* e = app.add_subcommand("eval", "Evaluate a trained run on its eval split");
  e->add_option("--run", run_dir, "Run directory written by train")->required();
  e->add_flag("--teacher", teacher, "Use the EMA teacher checkpoint");
  e->add_option("-o,--out", eval_out, "Metrics JSON path (stdout when omitted)");
  e->add_option("overrides", eval_overrides, "key=value overrides, e.g. metrics_mode=literal");

  std::string variants = "cam,usage", backbones = "conv,transformer";
  std::size_t seed_count = 3;
  auto* cp = app.add_subcommand("compare", "Train and compare variants over seeds");
  add_config_options(cp, cmpc);
  cp->add_option("-o,--out", cmpc.out, "Output directory")->required();
  cp->add_option("--variants", variants, "cam, mil, mct, usage, usage-noreg, usage-fixed, usage-linear");
  cp->add_option("--backbones", backbones, "conv, transformer");
  cp->add_option("--seeds", seed_count, "Number of seeds, counting up from the config seed");

  std::string render_run, render_out;
  bool render_teacher = false;
  std::size_t render_count = 4;
  std::vector<std::string> render_overrides;
  auto* r = app.add_subcommand("render", "Write seed-area panels for eval samples");
  r->add_option("--run", render_run, "Run directory written by train")->required();
  r->add_flag("--teacher", render_teacher, "Use the EMA teacher checkpoint");
  r->add_option("--samples", render_count, "Number of eval samples");
  r->add_option("-o,--out", render_out, "Output directory")->required();
  r->add_option("overrides", render_overrides, "key=value overrides, e.g. background_threshold=0.3");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*g) return cmd_gen_data(gen, png_count);
    if (*gc) return cmd_gradcheck(trials, gc_seed, only, report);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(run_dir, teacher, eval_overrides, eval_out);
    if (*cp) return cmd_compare(cmpc, variants, backbones, seed_count);
    if (*r) return cmd_render(render_run, render_teacher, render_count, render_overrides, render_out);
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kExitConfig;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitRuntime;
  }
  return kExitConfig;
}
