#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace stow {

// Flat `key = value` configuration. Lines starting with '#' are comments.
// Later assignments replace earlier ones, so file values followed by
// command-line overrides resolve with the override winning.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::string& path);

  // Accepts "key=value"; throws ParseError otherwise.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void merge(const KeyValueConfig& other);

  [[nodiscard]] bool contains(const std::string& key) const { return values_.count(key) != 0; }
  [[nodiscard]] std::optional<std::string> find(const std::string& key) const;

  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const;
  [[nodiscard]] double get_double(const std::string& key, double fallback) const;
  [[nodiscard]] std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  [[nodiscard]] std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const;

  // Keys starting with `prefix`, with the prefix stripped.
  [[nodiscard]] KeyValueConfig section(const std::string& prefix) const;

  [[nodiscard]] std::string serialize() const;
  [[nodiscard]] const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Shortest decimal text that parses back to the same double.
[[nodiscard]] std::string format_double(double v);

}  // namespace stow
