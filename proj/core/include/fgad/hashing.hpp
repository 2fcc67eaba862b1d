// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>

namespace fgad {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

std::string base64_encode(std::string_view data);

}  // namespace fgad
