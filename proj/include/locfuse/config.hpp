#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace locfuse::config {

// A TOML subset: [section] headers, key = value lines, # comments. Values are
// booleans, numbers, double-quoted strings (\" \\ \n \t escapes) or
// single-line arrays of those.
struct Value {
  enum class Kind { kBool, kNumber, kString, kArray };
  Kind kind = Kind::kNumber;
  bool boolean = false;
  double number = 0.0;
  std::string text;
  std::vector<Value> items;
};

class Document {
 public:
  static Document parse(std::string_view text, std::string_view source = "<config>");
  static Document load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  // Keys are "section.name" (or "name" before any section header).
  std::vector<std::string> keys() const;

  // Typed reads; an absent key leaves the target untouched, a present key of
  // the wrong type throws kConfig.
  void read(const std::string& key, bool& out) const;
  void read(const std::string& key, double& out) const;
  void read(const std::string& key, int& out) const;
  void read(const std::string& key, std::uint64_t& out) const;
  void read(const std::string& key, std::string& out) const;
  void read(const std::string& key, std::vector<double>& out) const;
  void read(const std::string& key, std::vector<int>& out) const;
  void read(const std::string& key, std::vector<bool>& out) const;
  void read(const std::string& key, std::vector<std::string>& out) const;

  // Throws kConfig naming the first key outside the allowed set.
  void reject_unknown(const std::set<std::string>& allowed) const;

 private:
  const Value* find(const std::string& key) const;
  std::string source_;
  std::map<std::string, Value> entries_;
};

}  // namespace locfuse::config
