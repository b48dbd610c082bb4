#pragma once

#include <string>
#include <string_view>

#include "json.hpp"

namespace usage::io {

// Reads the TOML subset used by config files: comments, [table] and
// [dotted.table] headers, bare/quoted/dotted keys, basic and literal strings,
// integers, floats, booleans and arrays of those (arrays may span lines).
// Inline tables, arrays of tables and dates are rejected. Errors throw
// ConfigError keyed "line N".
nlohmann::json parse_toml(std::string_view text);

// Parses a single TOML value; throws ConfigError keyed `key` on bad syntax.
nlohmann::json parse_toml_value(std::string_view text, const std::string& key);

}  // namespace usage::io
