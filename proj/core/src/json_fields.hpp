#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msf/errors.hpp"

namespace msf::detail {

// nlohmann converts -1 to SIZE_MAX and 2.5 to 2 without complaint.
template <class T = std::size_t>
T json_count(const nlohmann::json& v, const std::string& path) {
  const bool negative = v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0;
  if (!v.is_number_integer() || negative) {
    throw ContractError(path + ": expected a nonnegative integer, got " + v.dump());
  }
  return v.get<T>();
}

inline std::vector<std::size_t> json_counts(const nlohmann::json& v, const std::string& path) {
  if (!v.is_array()) throw ContractError(path + ": expected an array, got " + v.dump());
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(json_count(e, path));
  return out;
}

}  // namespace msf::detail
