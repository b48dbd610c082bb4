#include "usage/io/toml.hpp"

#include <cctype>
#include <cmath>
#include <limits>
#include <vector>

#include "usage/error.hpp"

namespace usage::io {

namespace {

class Cursor {
 public:
  Cursor(std::string_view text, std::string where) : s_(text), where_(std::move(where)) {}

  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(where_, msg); }

  bool done() const { return i_ >= s_.size(); }
  char peek() const { return done() ? '\0' : s_[i_]; }
  char get() {
    if (done()) fail("unexpected end of input");
    return s_[i_++];
  }
  void expect(char c) {
    if (get() != c) fail(std::string("expected '") + c + "'");
  }

  // Spaces and tabs; with `newlines` also line breaks and comments.
  void skip(bool newlines = false) {
    while (!done()) {
      const char c = s_[i_];
      if (c == ' ' || c == '\t' || c == '\r') {
        ++i_;
      } else if (newlines && c == '\n') {
        ++i_;
      } else if (newlines && c == '#') {
        while (!done() && s_[i_] != '\n') ++i_;
      } else {
        break;
      }
    }
  }

  std::vector<std::string> key() {
    std::vector<std::string> parts;
    for (;;) {
      skip();
      if (peek() == '"') {
        parts.push_back(basic_string());
      } else if (peek() == '\'') {
        parts.push_back(literal_string());
      } else {
        std::string k;
        while (!done() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) k += get();
        if (k.empty()) fail("expected a key");
        parts.push_back(k);
      }
      skip();
      if (peek() != '.') return parts;
      ++i_;
    }
  }

  nlohmann::json value() {
    skip();
    const char c = peek();
    if (c == '"') return basic_string();
    if (c == '\'') return literal_string();
    if (c == '[') return array();
    if (c == '{') fail("inline tables are not supported");
    std::string tok;
    while (!done() && !std::isspace(static_cast<unsigned char>(peek())) && peek() != ',' && peek() != ']' &&
           peek() != '#')
      tok += get();
    return scalar(tok);
  }

 private:
  std::string basic_string() {
    expect('"');
    std::string out;
    for (;;) {
      const char c = get();
      if (c == '"') return out;
      if (c == '\n') fail("newline in string");
      if (c != '\\') {
        out += c;
        continue;
      }
      const char e = get();
      switch (e) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        default: fail(std::string("unsupported escape \\") + e);
      }
    }
  }

  std::string literal_string() {
    expect('\'');
    std::string out;
    for (;;) {
      const char c = get();
      if (c == '\'') return out;
      if (c == '\n') fail("newline in string");
      out += c;
    }
  }

  nlohmann::json array() {
    expect('[');
    nlohmann::json out = nlohmann::json::array();
    for (;;) {
      skip(true);
      if (peek() == ']') {
        ++i_;
        return out;
      }
      out.push_back(value());
      skip(true);
      if (peek() == ',') {
        ++i_;
      } else if (peek() != ']') {
        fail("expected ',' or ']' in array");
      }
    }
  }

  nlohmann::json scalar(const std::string& tok) {
    if (tok.empty()) fail("missing value");
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string t;
    for (std::size_t k = 0; k < tok.size(); ++k) {
      if (tok[k] != '_') {
        t += tok[k];
        continue;
      }
      if (k == 0 || k + 1 == tok.size() || !std::isdigit(static_cast<unsigned char>(tok[k - 1])) ||
          !std::isdigit(static_cast<unsigned char>(tok[k + 1])))
        fail("bad underscore in number '" + tok + "'");
    }
    const std::string body = (t[0] == '+' || t[0] == '-') ? t.substr(1) : t;
    const bool neg = t[0] == '-';
    if (body == "inf") return neg ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    if (body == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (body.empty() || !std::isdigit(static_cast<unsigned char>(body[0]))) fail("unrecognized value '" + tok + "'");
    const bool is_float = body.find_first_of(".eE") != std::string::npos;
    if (body.size() > 1 && body[0] == '0' && std::isdigit(static_cast<unsigned char>(body[1])))
      fail("leading zero in '" + tok + "'");
    std::size_t used = 0;
    try {
      if (is_float) {
        if (body.front() == '.' || body.back() == '.' || body.find(".e") != std::string::npos ||
            body.find(".E") != std::string::npos)
          fail("bad float '" + tok + "'");
        const double v = std::stod(t, &used);
        if (used == t.size()) return v;
      } else {
        const long long v = std::stoll(t, &used, 10);
        if (used == t.size()) return v;
      }
    } catch (const std::out_of_range&) {
      fail("number out of range '" + tok + "'");
    } catch (const std::invalid_argument&) {
    }
    fail("unrecognized value '" + tok + "'");
  }

  std::string_view s_;
  std::string where_;
  std::size_t i_ = 0;
};

std::string dotted(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : ".") + p;
  return out;
}

}  // namespace

nlohmann::json parse_toml(std::string_view text) {
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* table = &root;
  std::vector<std::string> defined_tables;
  std::size_t pos = 0, line = 1;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view chunk = text.substr(pos, end - pos);
    std::size_t lines = 1;
    // Multi-line arrays: extend the chunk until brackets outside strings balance.
    for (;;) {
      int depth = 0;
      char quote = 0;
      for (std::size_t k = 0; k < chunk.size(); ++k) {
        const char c = chunk[k];
        if (quote) {
          if (c == '\\' && quote == '"') ++k;
          else if (c == quote) quote = 0;
        } else if (c == '"' || c == '\'') {
          quote = c;
        } else if (c == '#') {
          while (k < chunk.size() && chunk[k] != '\n') ++k;
        } else if (c == '[') {
          ++depth;
        } else if (c == ']') {
          --depth;
        }
      }
      if (depth <= 0 || end >= text.size()) break;
      end = text.find('\n', end + 1);
      if (end == std::string_view::npos) end = text.size();
      chunk = text.substr(pos, end - pos);
      ++lines;
    }
    Cursor cur(chunk, "line " + std::to_string(line));
    cur.skip();
    if (cur.done() || cur.peek() == '#') {
      // blank or comment
    } else if (cur.peek() == '[') {
      cur.get();
      if (cur.peek() == '[') cur.fail("arrays of tables are not supported");
      const auto parts = cur.key();
      cur.expect(']');
      const std::string name = dotted(parts);
      for (const auto& d : defined_tables) {
        if (d == name) cur.fail("table [" + name + "] defined twice");
      }
      defined_tables.push_back(name);
      table = &root;
      for (const auto& p : parts) {
        nlohmann::json& next = (*table)[p];
        if (next.is_null()) next = nlohmann::json::object();
        if (!next.is_object()) cur.fail("'" + p + "' is not a table");
        table = &next;
      }
    } else {
      const auto parts = cur.key();
      cur.expect('=');
      nlohmann::json v = cur.value();
      nlohmann::json* t = table;
      for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
        nlohmann::json& next = (*t)[parts[k]];
        if (next.is_null()) next = nlohmann::json::object();
        if (!next.is_object()) cur.fail("'" + parts[k] + "' is not a table");
        t = &next;
      }
      if (t->contains(parts.back())) cur.fail("duplicate key '" + dotted(parts) + "'");
      (*t)[parts.back()] = std::move(v);
    }
    cur.skip(true);
    if (!cur.done()) cur.fail("unexpected trailing content");
    pos = end + 1;
    line += lines;
  }
  return root;
}

nlohmann::json parse_toml_value(std::string_view text, const std::string& key) {
  Cursor cur(text, key);
  nlohmann::json v = cur.value();
  cur.skip();
  if (!cur.done()) cur.fail("unexpected trailing content in value");
  return v;
}

}  // namespace usage::io
