#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "usage/trainer/trainer.hpp"

namespace usage::train {

// .toml or .json by extension.
nlohmann::json read_config_document(const std::string& path);

// "a.b.c=value". The value is read as a TOML value; a bare word that is not
// one (e.g. conv) is taken as a string.
void apply_override(nlohmann::json& doc, std::string_view assignment);

// Starts from default_config() for the document's backbone.kind (transformer
// when absent), overlays the document and validates. Unknown keys throw.
RunConfig resolve_config(const nlohmann::json& doc);

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace usage::train
