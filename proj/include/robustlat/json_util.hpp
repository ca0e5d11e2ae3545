#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "robustlat/error.hpp"

namespace robustlat {

using Json = nlohmann::json;

// Rejects keys outside `allowed` so config typos fail loudly.
inline void require_known_keys(const Json& j, std::initializer_list<std::string_view> allowed,
                               const std::string& context) {
  if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (std::string_view a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(context + ": unknown key \"" + key + "\"");
  }
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback, const std::string& context) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(context + "." + key + ": " + e.what());
  }
}

template <typename T>
T get_required(const Json& j, const char* key, const std::string& context) {
  if (!j.contains(key)) throw ConfigError(context + ": missing required key \"" + key + "\"");
  return get_or<T>(j, key, T{}, context);
}

}  // namespace robustlat
