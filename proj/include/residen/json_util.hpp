#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"
#include "residen/error.hpp"

namespace residen {

using json = nlohmann::json;

/// Rejects any key of object `j` not listed in `allowed`.
inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                                const std::string& context) {
  if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || item.key() == k;
    if (!known) throw ConfigError(context + ": unknown key '" + item.key() + "'");
  }
}

/// Reads `key` into `out` when present; type mismatches become ConfigError.
template <typename V>
void read_opt(const json& j, const char* key, V& out, const std::string& context) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(context + "." + key + ": " + e.what());
  }
}

}  // namespace residen
