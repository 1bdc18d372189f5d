#pragma once

#include <charconv>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hnet/tensor.hpp"

namespace hnet {

/// `key = value` text document. Lines starting with '#' and blank lines are
/// ignored; keys are unique. `to_text` emits keys in sorted order so equal
/// documents serialise identically.
class KvDoc {
 public:
  KvDoc() = default;

  static KvDoc parse(const std::string& text) {
    KvDoc doc;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ValidationError("config line " + std::to_string(lineno) + ": expected 'key = value'");
      }
      const std::string key = trim(t.substr(0, eq));
      const std::string value = trim(t.substr(eq + 1));
      if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
      if (!doc.entries_.emplace(key, value).second) {
        throw ValidationError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
    }
    return doc;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  void set(const std::string& key, double value) { entries_[key] = format_double(value); }
  void set(const std::string& key, std::size_t value) { entries_[key] = std::to_string(value); }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : parse_double(key, it->second);
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : parse_size(key, it->second);
  }

  std::vector<std::size_t> get_size_list(const std::string& key, std::vector<std::size_t> fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::vector<std::size_t> out;
    std::istringstream in(it->second);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(parse_size(key, trim(item)));
    if (out.empty()) throw ValidationError("config key '" + key + "': empty list");
    return out;
  }

  /// Throws on any key not accepted by `known`.
  template <class Pred>
  void reject_unknown(Pred&& known) const {
    for (const auto& [k, v] : entries_)
      if (!known(k)) throw ValidationError("unknown config key '" + k + "'");
  }

  static std::string format_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
    return std::string(buf, r.ptr);
  }

  static double parse_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw ValidationError("config key '" + key + "': '" + s + "' is not a number");
    }
    return v;
  }

  static std::size_t parse_size(const std::string& key, const std::string& s) {
    std::size_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw ValidationError("config key '" + key + "': '" + s + "' is not a non-negative integer");
    }
    return v;
  }

  static std::string join(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace hnet
