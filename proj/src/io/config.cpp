#include "locfuse/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "locfuse/error.hpp"

namespace locfuse::config {
namespace {

class LineParser {
 public:
  LineParser(std::string_view line, std::string where) : s_(line), where_(std::move(where)) {}

  [[noreturn]] void bad(const std::string& what) const { fail(ErrorCode::kConfig, where_ + ": " + what); }

  void skip_space() {
    while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t')) ++i_;
  }
  bool at_end() {
    skip_space();
    return i_ >= s_.size() || s_[i_] == '#';
  }
  bool eat(char c) {
    skip_space();
    if (i_ < s_.size() && s_[i_] == c) {
      ++i_;
      return true;
    }
    return false;
  }

  std::string name() {
    skip_space();
    const auto start = i_;
    while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '_' || s_[i_] == '-'))
      ++i_;
    if (start == i_) bad("expected a name");
    return std::string(s_.substr(start, i_ - start));
  }

  Value value(bool nested = false) {
    skip_space();
    if (i_ >= s_.size()) bad("missing value");
    Value v;
    const char c = s_[i_];
    if (c == '"') {
      v.kind = Value::Kind::kString;
      v.text = quoted();
    } else if (c == '[') {
      if (nested) bad("nested arrays are not supported");
      ++i_;
      v.kind = Value::Kind::kArray;
      if (!eat(']')) {
        do {
          if (eat(']')) return v;  // trailing comma
          v.items.push_back(value(true));
        } while (eat(','));
        if (!eat(']')) bad("unterminated array");
      }
    } else {
      const auto start = i_;
      while (i_ < s_.size() && s_[i_] != ',' && s_[i_] != ']' && s_[i_] != '#' && s_[i_] != ' ' && s_[i_] != '\t')
        ++i_;
      const std::string_view word = s_.substr(start, i_ - start);
      if (word == "true" || word == "false") {
        v.kind = Value::Kind::kBool;
        v.boolean = word == "true";
      } else {
        v.kind = Value::Kind::kNumber;
        v.number = number(word);
      }
    }
    return v;
  }

 private:
  std::string quoted() {
    ++i_;
    std::string out;
    while (i_ < s_.size() && s_[i_] != '"') {
      char c = s_[i_++];
      if (c == '\\') {
        if (i_ >= s_.size()) bad("dangling escape");
        switch (s_[i_++]) {
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          default: bad("unknown escape");
        }
      }
      out.push_back(c);
    }
    if (i_ >= s_.size()) bad("unterminated string");
    ++i_;
    return out;
  }

  double number(std::string_view word) const {
    std::string clean;
    for (char c : word)
      if (c != '_') clean.push_back(c);
    if (clean == "inf" || clean == "+inf") return std::numeric_limits<double>::infinity();
    if (clean == "-inf") return -std::numeric_limits<double>::infinity();
    std::string_view body = clean;
    if (!body.empty() && body.front() == '+') body.remove_prefix(1);
    double x = 0.0;
    const auto [end, ec] = std::from_chars(body.data(), body.data() + body.size(), x);
    if (body.empty() || ec != std::errc() || end != body.data() + body.size())
      bad("not a number: '" + std::string(word) + "'");
    return x;
  }

  std::string_view s_;
  std::size_t i_ = 0;
  std::string where_;
};

std::string_view kind_name(Value::Kind k) {
  switch (k) {
    case Value::Kind::kBool: return "boolean";
    case Value::Kind::kNumber: return "number";
    case Value::Kind::kString: return "string";
    case Value::Kind::kArray: return "array";
  }
  return "?";
}

[[noreturn]] void type_error(const std::string& key, std::string_view want, const Value& got) {
  fail(ErrorCode::kConfig, "key '" + key + "' expects " + std::string(want) + ", got " + std::string(kind_name(got.kind)));
}

double as_number(const std::string& key, const Value& v) {
  if (v.kind != Value::Kind::kNumber) type_error(key, "a number", v);
  return v.number;
}

long long as_integer(const std::string& key, const Value& v, long long lo, long long hi) {
  const double x = as_number(key, v);
  if (!(std::floor(x) == x) || x < double(lo) || x > double(hi))
    fail(ErrorCode::kConfig, "key '" + key + "' expects an integer in range");
  return static_cast<long long>(x);
}

bool as_bool(const std::string& key, const Value& v) {
  if (v.kind != Value::Kind::kBool) type_error(key, "a boolean", v);
  return v.boolean;
}

const std::string& as_string(const std::string& key, const Value& v) {
  if (v.kind != Value::Kind::kString) type_error(key, "a string", v);
  return v.text;
}

// Scalars are accepted where a list is expected.
std::vector<Value> as_list(const Value& v) {
  if (v.kind == Value::Kind::kArray) return v.items;
  return {v};
}

}  // namespace

Document Document::parse(std::string_view text, std::string_view source) {
  Document doc;
  doc.source_ = source;
  std::string section;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    LineParser p(line, std::string(source) + ":" + std::to_string(line_no));
    if (p.at_end()) continue;
    if (p.eat('[')) {
      section = p.name();
      if (!p.eat(']')) p.bad("expected ']'");
      if (!p.at_end()) p.bad("trailing text after section header");
      continue;
    }
    const std::string key = section.empty() ? p.name() : section + "." + p.name();
    if (!p.eat('=')) p.bad("expected '='");
    Value v = p.value();
    if (!p.at_end()) p.bad("trailing text after value");
    if (!doc.entries_.emplace(key, std::move(v)).second) p.bad("duplicate key '" + key + "'");
  }
  return doc;
}

Document Document::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kConfig, "cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

std::vector<std::string> Document::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

const Value* Document::find(const std::string& key) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

void Document::read(const std::string& key, bool& out) const {
  if (const auto* v = find(key)) out = as_bool(key, *v);
}
void Document::read(const std::string& key, double& out) const {
  if (const auto* v = find(key)) out = as_number(key, *v);
}
void Document::read(const std::string& key, int& out) const {
  if (const auto* v = find(key))
    out = int(as_integer(key, *v, std::numeric_limits<int>::min(), std::numeric_limits<int>::max()));
}
void Document::read(const std::string& key, std::uint64_t& out) const {
  // Doubles hold integers exactly up to 2^53; larger seeds go in as strings.
  if (const auto* v = find(key)) {
    if (v->kind == Value::Kind::kString) {
      std::uint64_t x = 0;
      const auto& s = v->text;
      const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
      if (s.empty() || ec != std::errc() || end != s.data() + s.size())
        fail(ErrorCode::kConfig, "key '" + key + "' expects an unsigned integer");
      out = x;
    } else {
      out = std::uint64_t(as_integer(key, *v, 0, (1LL << 53)));
    }
  }
}
void Document::read(const std::string& key, std::string& out) const {
  if (const auto* v = find(key)) out = as_string(key, *v);
}
void Document::read(const std::string& key, std::vector<double>& out) const {
  if (const auto* v = find(key)) {
    out.clear();
    for (const auto& item : as_list(*v)) out.push_back(as_number(key, item));
  }
}
void Document::read(const std::string& key, std::vector<int>& out) const {
  if (const auto* v = find(key)) {
    out.clear();
    for (const auto& item : as_list(*v))
      out.push_back(int(as_integer(key, item, std::numeric_limits<int>::min(), std::numeric_limits<int>::max())));
  }
}
void Document::read(const std::string& key, std::vector<bool>& out) const {
  if (const auto* v = find(key)) {
    out.clear();
    for (const auto& item : as_list(*v)) out.push_back(as_bool(key, item));
  }
}
void Document::read(const std::string& key, std::vector<std::string>& out) const {
  if (const auto* v = find(key)) {
    out.clear();
    for (const auto& item : as_list(*v)) out.push_back(as_string(key, item));
  }
}

void Document::reject_unknown(const std::set<std::string>& allowed) const {
  for (const auto& [k, v] : entries_)
    if (!allowed.count(k)) fail(ErrorCode::kConfig, source_ + ": unknown key '" + k + "'");
}

}  // namespace locfuse::config
