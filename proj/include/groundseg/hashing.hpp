#pragma once

#include <string>
#include <string_view>

#include <json.hpp>

namespace groundseg {

/// Lower-case hex SHA-256 of `bytes`.
[[nodiscard]] std::string sha256_hex(std::string_view bytes);

/// Compact JSON with object keys sorted; the form every content hash is taken over.
[[nodiscard]] std::string canonical_json(const nlohmann::json& value);

[[nodiscard]] std::string base64_encode(std::string_view bytes);

}  // namespace groundseg
