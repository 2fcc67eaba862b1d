// SPDX-License-Identifier: Apache-2.0
#pragma once
// Score map container ("FGADSMAP", version 1, little-endian):
//   magic[8] u32 version u32 h u32 w f32[h*w] row-major
// Decoding restores the f32 values exactly (as doubles).

#include "fgad/numeric.hpp"

#include <string>
#include <string_view>

namespace fgad {

std::string encode_score_map(const ScoreMap& map);
/// Throws FormatError naming the offending field.
ScoreMap decode_score_map(std::string_view bytes);

/// The map as stored: every value rounded to f32.
ScoreMap quantize_f32(const ScoreMap& map);

struct PgmExport {
  std::string pgm;      ///< binary P5, min-max normalized to 0..255
  std::string sidecar;  ///< JSON with the normalization bounds
};

PgmExport score_map_to_pgm(const ScoreMap& map);

}  // namespace fgad
