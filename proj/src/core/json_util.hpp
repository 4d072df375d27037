// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "core/errors.hpp"
#include "core/rng.hpp"

namespace trydit {

// Unknown keys are a hard error everywhere a config document is parsed.
inline void require_known_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                               const std::string& where) {
  if (!obj.is_object()) throw ContractError(where + ": expected a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ContractError(where + ": unknown key \"" + it.key() + "\"");
    }
  }
}

template <typename T>
T json_get_or(const nlohmann::json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  return obj.at(key).get<T>();
}

inline std::string fnv1a64_hex(const std::string& s) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(s)));
  return buf;
}

}  // namespace trydit
