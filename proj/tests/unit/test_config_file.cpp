#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "usage/error.hpp"
#include "usage/io/toml.hpp"
#include "usage/trainer/config_file.hpp"

using namespace usage;
using nlohmann::json;

namespace {

std::string error_key(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<none>";
}

}  // namespace

TEST_CASE("toml subset values") {
  const json j = io::parse_toml(R"(
# comment
title = "seed \"areas\"\t"
path = 'C:\raw'
count = 1_000
neg = -7
rate = 3e-3
half = +0.5
on = true
off = false
list = [1, 2.5, "x"]
multi = [
  1,  # one
  2,
]
[backbone]
kind = "conv"   # trailing
[data.spec]
shapes_max = 2
[a]
b.c = 1
"quoted key" = 2
)");
  CHECK(j["title"] == "seed \"areas\"\t");
  CHECK(j["path"] == "C:\\raw");
  CHECK(j["count"] == 1000);
  CHECK(j["neg"] == -7);
  CHECK(j["rate"].get<double>() == 3e-3);
  CHECK(j["half"].get<double>() == 0.5);
  CHECK(j["on"] == true);
  CHECK(j["off"] == false);
  CHECK(j["list"] == json::array({1, 2.5, "x"}));
  CHECK(j["multi"] == json::array({1, 2}));
  CHECK(j["backbone"]["kind"] == "conv");
  CHECK(j["data"]["spec"]["shapes_max"] == 2);
  CHECK(j["a"]["b"]["c"] == 1);
  CHECK(j["a"]["quoted key"] == 2);
  CHECK(j["count"].is_number_integer());
  CHECK(j["rate"].is_number_float());
  CHECK(std::isinf(io::parse_toml("x = -inf")["x"].get<double>()));
}

TEST_CASE("toml errors name the line") {
  CHECK(error_key([] { io::parse_toml("a = 1\nb = \n"); }) == "line 2");
  CHECK(error_key([] { io::parse_toml("a = 1\na = 2"); }) == "line 2");
  CHECK(error_key([] { io::parse_toml("[t]\nx=1\n[t]\n"); }) == "line 3");
  CHECK(error_key([] { io::parse_toml("x = {a = 1}"); }) == "line 1");
  CHECK(error_key([] { io::parse_toml("[[t]]"); }) == "line 1");
  CHECK(error_key([] { io::parse_toml("x = 01"); }) == "line 1");
  CHECK(error_key([] { io::parse_toml("x = 1__0"); }) == "line 1");
  CHECK(error_key([] { io::parse_toml("x = \"open"); }) == "line 1");
  CHECK(error_key([] { io::parse_toml("x = 1 2"); }) == "line 1");
  CHECK(error_key([] { io::parse_toml("x = 1.\n"); }) == "line 1");
  CHECK(error_key([] { io::parse_toml("x = [1,\n2,\n\ny = 3 3"); }) == "line 1");
  CHECK(error_key([] { io::parse_toml("a = 1\nb = [\n 1,\n 2\n]\nc = ?"); }) == "line 6");
}

TEST_CASE("overrides") {
  json doc = io::parse_toml("[backbone]\nkind = \"transformer\"\n");
  train::apply_override(doc, "backbone.kind=conv");
  train::apply_override(doc, "tau1=12.5");
  train::apply_override(doc, "optimizer.lr=1e-3");
  train::apply_override(doc, "regularization_enabled=false");
  train::apply_override(doc, "mapping=\"cam_gap\"");
  CHECK(doc["backbone"]["kind"] == "conv");
  CHECK(doc["tau1"].get<double>() == 12.5);
  CHECK(doc["optimizer"]["lr"].get<double>() == 1e-3);
  CHECK(doc["regularization_enabled"] == false);
  CHECK(doc["mapping"] == "cam_gap");
  CHECK_THROWS_AS(train::apply_override(doc, "tau1"), ConfigError);
  CHECK_THROWS_AS(train::apply_override(doc, "=3"), ConfigError);
  CHECK_THROWS_AS(train::apply_override(doc, "a..b=3"), ConfigError);
  CHECK_THROWS_AS(train::apply_override(doc, "tau1.x=3"), ConfigError);
  CHECK_THROWS_AS(train::apply_override(doc, "x=[1,"), ConfigError);
}

TEST_CASE("resolved configs start from the backbone defaults") {
  const train::RunConfig conv = train::resolve_config(json{{"backbone", {{"kind", "conv"}}}});
  CHECK(conv.tau1 == train::default_config(backbone::Kind::conv).tau1);
  CHECK(conv.backbone.kind == backbone::Kind::conv);
  const train::RunConfig t = train::resolve_config(json::object());
  CHECK(t.to_json().dump() == train::default_config(backbone::Kind::transformer).to_json().dump());
  const train::RunConfig explicit_tau = train::resolve_config(json{{"backbone", {{"kind", "conv"}}}, {"tau1", 3.0}});
  CHECK(explicit_tau.tau1 == 3.0);
  CHECK(explicit_tau.backbone.kind == backbone::Kind::conv);
  // The resolved JSON is a complete description.
  CHECK(train::resolve_config(json::parse(conv.to_json().dump())).to_json().dump() == conv.to_json().dump());

  CHECK(error_key([] { train::resolve_config(json{{"backbone", {{"kind", "mlp"}}}}); }) == "backbone.kind");
  CHECK(error_key([] { train::resolve_config(json{{"backbone", {{"knd", "conv"}}}}); }) == "backbone.knd");
  CHECK(error_key([] { train::resolve_config(json{{"tau2", 0.0}}); }) == "tau2");
  CHECK(error_key([] { train::resolve_config(json{{"data", {{"spec", {{"colour", 1}}}}}}); }) == "data.spec.colour");
}

TEST_CASE("config files by extension") {
  const auto dir = std::filesystem::temp_directory_path() / "usage_config_file_test";
  std::filesystem::create_directories(dir);
  const std::string toml = (dir / "c.toml").string(), js = (dir / "c.json").string(), txt = (dir / "c.txt").string();
  std::ofstream(toml) << "epochs = 3\n[backbone]\nkind = \"conv\"\n";
  std::ofstream(js) << R"({"epochs": 3, "backbone": {"kind": "conv"}})";
  std::ofstream(txt) << "epochs = 3\n";
  const train::RunConfig a = train::load_run_config(toml, {"seed=9"});
  const train::RunConfig b = train::load_run_config(js, {"seed=9"});
  CHECK(a.to_json().dump() == b.to_json().dump());
  CHECK(a.epochs == 3);
  CHECK(a.seed == 9);
  CHECK_THROWS_AS(train::load_run_config(txt, {}), ConfigError);
  CHECK_THROWS_AS(train::load_run_config((dir / "missing.toml").string(), {}), ConfigError);
  std::ofstream(js) << "{ not json";
  CHECK_THROWS_AS(train::load_run_config(js, {}), ConfigError);
  std::filesystem::remove_all(dir);
}
