#pragma once

// Strict JSON object access: every field is required, types are checked and
// keys that were never read are reported as errors.

#include <set>
#include <string>
#include <string_view>

#include <json.hpp>

#include "gistlab/tensor.hpp"

namespace gistlab {

class FieldReader {
 public:
  FieldReader(const nlohmann::json& object, std::string path) : object_(object), path_(std::move(path)) {
    if (!object_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  const nlohmann::json& raw(std::string_view key) {
    auto it = object_.find(std::string(key));
    if (it == object_.end()) throw ConfigError(field(key) + ": missing field");
    used_.insert(std::string(key));
    return *it;
  }

  std::size_t count(std::string_view key) {
    const auto& v = raw(key);
    if (!v.is_number_unsigned()) throw ConfigError(field(key) + ": expected a non-negative integer");
    return v.get<std::size_t>();
  }

  std::uint64_t u64(std::string_view key) {
    const auto& v = raw(key);
    if (!v.is_number_unsigned()) throw ConfigError(field(key) + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  double number(std::string_view key) {
    const auto& v = raw(key);
    if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
    return v.get<double>();
  }

  bool boolean(std::string_view key) {
    const auto& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(field(key) + ": expected true or false");
    return v.get<bool>();
  }

  std::string string(std::string_view key) {
    const auto& v = raw(key);
    if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
    return v.get<std::string>();
  }

  std::string field(std::string_view key) const { return path_ + "." + std::string(key); }
  const std::string& path() const { return path_; }

  /// Rejects keys that were never read.
  void finish() const {
    for (auto it = object_.begin(); it != object_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const nlohmann::json& object_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace gistlab
