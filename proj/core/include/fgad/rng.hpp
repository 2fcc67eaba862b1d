// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace fgad {

using Rng = std::mt19937_64;

/// Independent, reproducible stream for (seed, tag, extra...). Every random
/// quantity in the library is drawn from a stream derived this way.
inline Rng derive_rng(std::uint64_t seed, std::string_view tag,
                      std::initializer_list<std::uint64_t> extra = {}) {
  std::vector<std::uint32_t> material;
  material.reserve(4 + tag.size() + 2 * extra.size());
  material.push_back(static_cast<std::uint32_t>(seed));
  material.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (unsigned char c : tag) material.push_back(c);
  material.push_back(0xFFFFFFFFu);
  for (std::uint64_t e : extra) {
    material.push_back(static_cast<std::uint32_t>(e));
    material.push_back(static_cast<std::uint32_t>(e >> 32));
  }
  std::seed_seq seq(material.begin(), material.end());
  return Rng(seq);
}

}  // namespace fgad
