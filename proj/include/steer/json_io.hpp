#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "steer/tensor.hpp"

namespace steer {

// Tensors serialize as {"shape": [...], "data": [...]}; doubles are printed
// with round-trip precision so reloading is exact.
nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace steer
