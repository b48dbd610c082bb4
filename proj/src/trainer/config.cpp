#include <cmath>

#include "usage/error.hpp"
#include "usage/trainer/trainer.hpp"

namespace usage::train {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "adam" || name == "adamw") return OptimizerKind::adam;
  if (name == "sgd_momentum" || name == "sgd") return OptimizerKind::sgd_momentum;
  throw ValueError("unknown optimizer '" + name + "' (expected adam or sgd_momentum)");
}

namespace {

using Json = nlohmann::json;

template <class T>
T read(const Json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(key, "expected a number");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key, "expected true or false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
        throw ConfigError(key, "expected a non-negative integer");
      }
    } else {
      if (!v.is_string()) throw ConfigError(key, "expected a string");
    }
    return v.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

// Calls f(key, value) per entry and rethrows library errors with the key.
template <class F>
void each(const Json& j, const std::string& prefix, F f) {
  if (!j.is_object()) throw ConfigError(prefix, "expected a table");
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    try {
      if (!f(k, v, key)) throw ConfigError(key, "unknown key");
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(key, e.what());
    }
  }
}

}  // namespace

void RunConfig::validate() const {
  try {
    backbone.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("backbone." + e.key(), e.what());
  }
  try {
    adjustment.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("adjustment." + e.key(), e.what());
  }
  try {
    data.spec.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("data.spec." + e.key(), e.what());
  }
  auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
  if (!positive(tau1)) throw ConfigError("tau1", "must be a positive real");
  if (!positive(tau2)) throw ConfigError("tau2", "must be a positive real");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda", "must be a non-negative real");
  if (!std::isfinite(background_logit)) throw ConfigError("background_logit", "must be finite");
  if (!(optimizer.lr >= 0.0)) throw ConfigError("optimizer.lr", "must be non-negative");
  if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay", "must be non-negative");
  if (!(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0)) throw ConfigError("optimizer.momentum", "must lie in [0, 1)");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) throw ConfigError("optimizer.beta1", "must lie in [0, 1)");
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) throw ConfigError("optimizer.beta2", "must lie in [0, 1)");
  if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer.eps", "must be positive");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (epochs == 0) throw ConfigError("epochs", "must be positive");
  if (!(background_threshold > 0.0 && background_threshold < 1.0)) {
    throw ConfigError("background_threshold", "must lie in (0, 1)");
  }
  if (data.train_count == 0) throw ConfigError("data.train_count", "must be positive");
  if (data.eval_count == 0) throw ConfigError("data.eval_count", "must be positive");
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["backbone"] = {{"kind", backbone::to_string(backbone.kind)}, {"feature_dim", backbone.feature_dim},
                   {"depth", backbone.depth},   {"heads", backbone.heads},
                   {"patch_size", backbone.patch_size}, {"mlp_ratio", backbone.mlp_ratio}};
  j["mapping"] = mappings::to_string(mapping);
  j["tau1"] = tau1;
  j["tau2"] = tau2;
  j["lambda"] = lambda;
  j["background_logit"] = background_logit;
  j["regularization_enabled"] = regularization_enabled;
  j["reg_form"] = reg::to_string(reg_form);
  j["adjustment"] = {{"gamma_t", adjustment.gamma_t},
                     {"gamma_s_init", adjustment.gamma_s_init},
                     {"gamma_s_max", adjustment.gamma_s_max},
                     {"delta_s_init", adjustment.delta_s_init},
                     {"delta_s_max", adjustment.delta_s_max},
                     {"strategy", reg::to_string(adjustment.strategy)},
                     {"ema_momentum", adjustment.ema_momentum},
                     {"status_momentum", adjustment.status_momentum}};
  j["optimizer"] = {{"kind", to_string(optimizer.kind)}, {"lr", optimizer.lr},
                    {"weight_decay", optimizer.weight_decay}, {"momentum", optimizer.momentum},
                    {"beta1", optimizer.beta1}, {"beta2", optimizer.beta2}, {"eps", optimizer.eps}};
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["seed"] = seed;
  j["metrics_mode"] = seed::to_string(metrics_mode);
  j["background_threshold"] = background_threshold;
  j["evaluate_teacher"] = evaluate_teacher;
  j["data"] = {{"seed", data.seed},
               {"train_count", data.train_count},
               {"eval_count", data.eval_count},
               {"spec", data.spec.to_json()}};
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  each(j, "", [&c](const std::string& k, const Json& v, const std::string& key) {
    if (k == "backbone") {
      each(v, key, [&c](const std::string& k2, const Json& v2, const std::string& key2) {
        auto& b = c.backbone;
        if (k2 == "kind") b.kind = backbone::kind_from_string(read<std::string>(v2, key2));
        else if (k2 == "feature_dim") b.feature_dim = read<std::size_t>(v2, key2);
        else if (k2 == "depth") b.depth = read<std::size_t>(v2, key2);
        else if (k2 == "heads") b.heads = read<std::size_t>(v2, key2);
        else if (k2 == "patch_size") b.patch_size = read<std::size_t>(v2, key2);
        else if (k2 == "mlp_ratio") b.mlp_ratio = read<std::size_t>(v2, key2);
        else return false;
        return true;
      });
    } else if (k == "adjustment") {
      each(v, key, [&c](const std::string& k2, const Json& v2, const std::string& key2) {
        auto& a = c.adjustment;
        if (k2 == "gamma_t") a.gamma_t = read<double>(v2, key2);
        else if (k2 == "gamma_s_init") a.gamma_s_init = read<double>(v2, key2);
        else if (k2 == "gamma_s_max") a.gamma_s_max = read<double>(v2, key2);
        else if (k2 == "delta_s_init") a.delta_s_init = read<double>(v2, key2);
        else if (k2 == "delta_s_max") a.delta_s_max = read<double>(v2, key2);
        else if (k2 == "strategy") a.strategy = reg::strategy_from_string(read<std::string>(v2, key2));
        else if (k2 == "ema_momentum") a.ema_momentum = read<double>(v2, key2);
        else if (k2 == "status_momentum") a.status_momentum = read<double>(v2, key2);
        else return false;
        return true;
      });
    } else if (k == "optimizer") {
      each(v, key, [&c](const std::string& k2, const Json& v2, const std::string& key2) {
        auto& o = c.optimizer;
        if (k2 == "kind") o.kind = optimizer_from_string(read<std::string>(v2, key2));
        else if (k2 == "lr") o.lr = read<double>(v2, key2);
        else if (k2 == "weight_decay") o.weight_decay = read<double>(v2, key2);
        else if (k2 == "momentum") o.momentum = read<double>(v2, key2);
        else if (k2 == "beta1") o.beta1 = read<double>(v2, key2);
        else if (k2 == "beta2") o.beta2 = read<double>(v2, key2);
        else if (k2 == "eps") o.eps = read<double>(v2, key2);
        else return false;
        return true;
      });
    } else if (k == "data") {
      each(v, key, [&c](const std::string& k2, const Json& v2, const std::string& key2) {
        auto& d = c.data;
        if (k2 == "seed") d.seed = read<std::uint64_t>(v2, key2);
        else if (k2 == "train_count") d.train_count = read<std::size_t>(v2, key2);
        else if (k2 == "eval_count") d.eval_count = read<std::size_t>(v2, key2);
        else if (k2 == "spec") {
          try {
            d.spec = synth::SceneSpec::from_json(v2);
          } catch (const ConfigError& e) {
            throw ConfigError(key2 + "." + e.key(), e.what());
          }
        } else {
          return false;
        }
        return true;
      });
    } else if (k == "mapping") c.mapping = mappings::mapping_from_string(read<std::string>(v, key));
    else if (k == "tau1") c.tau1 = read<double>(v, key);
    else if (k == "tau2") c.tau2 = read<double>(v, key);
    else if (k == "lambda") c.lambda = read<double>(v, key);
    else if (k == "background_logit") c.background_logit = read<double>(v, key);
    else if (k == "regularization_enabled") c.regularization_enabled = read<bool>(v, key);
    else if (k == "reg_form") c.reg_form = reg::reg_form_from_string(read<std::string>(v, key));
    else if (k == "batch_size") c.batch_size = read<std::size_t>(v, key);
    else if (k == "epochs") c.epochs = read<std::size_t>(v, key);
    else if (k == "seed") c.seed = read<std::uint64_t>(v, key);
    else if (k == "metrics_mode") c.metrics_mode = seed::metrics_mode_from_string(read<std::string>(v, key));
    else if (k == "background_threshold") c.background_threshold = read<double>(v, key);
    else if (k == "evaluate_teacher") c.evaluate_teacher = read<bool>(v, key);
    else return false;
    return true;
  });
  c.validate();
  return c;
}

RunConfig default_config(backbone::Kind kind) {
  RunConfig c;
  c.backbone.kind = kind;
  c.tau1 = kind == backbone::Kind::conv ? 50.0 : 1.0;
  return c;
}

}  // namespace usage::train
