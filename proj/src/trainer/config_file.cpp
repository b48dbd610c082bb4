#include "usage/trainer/config_file.hpp"

#include <fstream>
#include <sstream>

#include "usage/error.hpp"
#include "usage/io/toml.hpp"

namespace usage::train {

nlohmann::json read_config_document(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path, "cannot open config file");
  std::ostringstream buf;
  buf << in.rdbuf();
  const auto ends_with = [&path](std::string_view ext) {
    return path.size() >= ext.size() && path.compare(path.size() - ext.size(), ext.size(), ext) == 0;
  };
  if (ends_with(".toml")) return io::parse_toml(buf.str());
  if (ends_with(".json")) {
    try {
      return nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path, e.what());
    }
  }
  throw ConfigError(path, "config files must end in .toml or .json");
}

void apply_override(nlohmann::json& doc, std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError(std::string(assignment), "overrides take the form key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string_view text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = io::parse_toml_value(text, key);
  } catch (const ConfigError&) {
    const bool bare = !text.empty() && text.find_first_of("\"'[]{}=# \t") == std::string_view::npos;
    if (!bare) throw;
    value = std::string(text);
  }
  if (!doc.is_object()) doc = nlohmann::json::object();
  nlohmann::json* t = &doc;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(key, "empty key segment");
    if (dot == std::string::npos) {
      (*t)[part] = std::move(value);
      return;
    }
    nlohmann::json& next = (*t)[part];
    if (next.is_null()) next = nlohmann::json::object();
    if (!next.is_object()) throw ConfigError(key.substr(0, dot), "not a table");
    t = &next;
    start = dot + 1;
  }
}

RunConfig resolve_config(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("", "config must be a table");
  backbone::Kind kind = backbone::Kind::transformer;
  if (doc.contains("backbone") && doc["backbone"].is_object() && doc["backbone"].contains("kind")) {
    const nlohmann::json& k = doc["backbone"]["kind"];
    if (!k.is_string()) throw ConfigError("backbone.kind", "expected a string");
    try {
      kind = backbone::kind_from_string(k.get<std::string>());
    } catch (const Error& e) {
      throw ConfigError("backbone.kind", e.what());
    }
  }
  nlohmann::json merged = nlohmann::json::parse(default_config(kind).to_json().dump());
  // Unknown keys would vanish in a merge; check them on the raw document first.
  (void)RunConfig::from_json(doc);
  merged.merge_patch(doc);
  RunConfig c = RunConfig::from_json(merged);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json doc = path.empty() ? nlohmann::json::object() : read_config_document(path);
  for (const std::string& o : overrides) apply_override(doc, o);
  return resolve_config(doc);
}

}  // namespace usage::train
