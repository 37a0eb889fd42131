#pragma once

#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "psx/tensor.hpp"

namespace psx {

std::string base64_encode(std::string_view bytes);
/// Throws Error(format) on malformed input.
std::string base64_decode(std::string_view text);

/// {"shape": [...], "data": base64 of row-major little-endian float32}.
nlohmann::json encode_tensor(const Tensor& tensor);
Tensor decode_tensor(const nlohmann::json& value);

}  // namespace psx
