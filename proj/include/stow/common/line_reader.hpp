#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stow/common/errors.hpp"

namespace stow {

// Whitespace-separated record reader for the plain-text manifests. Errors
// carry "path:line:".
class LineReader {
 public:
  explicit LineReader(std::string path) : path_(std::move(path)), in_(path_) {
    if (!in_) throw ParseError("cannot open " + path_);
  }

  // Next non-empty line split on whitespace; false at end of file.
  bool next(std::vector<std::string>& fields) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_;
      std::istringstream ss(line);
      fields.clear();
      for (std::string f; ss >> f;) fields.push_back(f);
      if (!fields.empty()) return true;
    }
    return false;
  }

  void expect(std::vector<std::string>& fields, const std::string& key, std::size_t min_fields) {
    if (!next(fields)) fail("unexpected end of file, wanted '" + key + "'");
    if (fields[0] != key) fail("expected '" + key + "', found '" + fields[0] + "'");
    if (fields.size() < min_fields) fail("record '" + key + "' has too few fields");
  }

  template <class T>
  T number(const std::string& text, const std::string& what) {
    T v{};
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size()) fail("bad " + what + " '" + text + "'");
    return v;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw ParseError(path_ + ":" + std::to_string(line_) + ": " + message);
  }

 private:
  std::string path_;
  std::ifstream in_;
  int line_ = 0;
};

}  // namespace stow
