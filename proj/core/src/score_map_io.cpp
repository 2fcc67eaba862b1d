// SPDX-License-Identifier: Apache-2.0
#include "fgad/score_map_io.hpp"

#include "fgad/feature_file.hpp"

#include <json.hpp>

#include <cmath>

namespace fgad {
namespace {

constexpr std::string_view kMagic = "FGADSMAP";
constexpr std::size_t kHeader = 20;

}  // namespace

std::string encode_score_map(const ScoreMap& map) {
  std::string out;
  out.reserve(kHeader + 4 * map.size());
  out.append(kMagic);
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(map.height()));
  detail::put_u32(out, static_cast<std::uint32_t>(map.width()));
  for (double v : map.values()) detail::put_f32(out, static_cast<float>(v));
  return out;
}

ScoreMap decode_score_map(std::string_view bytes) {
  if (bytes.size() < kHeader) throw FormatError("length", "truncated header");
  if (bytes.substr(0, 8) != kMagic) throw FormatError("magic", "not a FGADSMAP file");
  if (detail::get_u32(bytes, 8) != 1) throw FormatError("version", "unsupported version");
  const std::uint64_t h = detail::get_u32(bytes, 12);
  const std::uint64_t w = detail::get_u32(bytes, 16);
  if (h == 0) throw FormatError("h", "zero height");
  if (w == 0) throw FormatError("w", "zero width");
  if (h * w > (1ULL << 32)) throw FormatError("length", "grid too large");
  if (bytes.size() != kHeader + 4 * h * w) throw FormatError("length", "payload size does not match h*w");
  std::vector<double> values(h * w);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = detail::get_f32(bytes, kHeader + 4 * i);
    if (!std::isfinite(f) || f < 0.0f || f > 1.0f) throw FormatError("payload", "score outside [0,1]");
    values[i] = f;
  }
  return ScoreMap(static_cast<int>(h), static_cast<int>(w), std::move(values));
}

ScoreMap quantize_f32(const ScoreMap& map) {
  std::vector<double> v(map.values().begin(), map.values().end());
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  return ScoreMap(map.height(), map.width(), std::move(v));
}

PgmExport score_map_to_pgm(const ScoreMap& map) {
  const double lo = map.min();
  const double hi = map.max();
  PgmExport out;
  out.pgm = "P5\n" + std::to_string(map.width()) + " " + std::to_string(map.height()) + "\n255\n";
  const double span = hi - lo;
  for (double v : map.values()) {
    const double t = span > 0.0 ? (v - lo) / span : 0.0;
    out.pgm.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
  nlohmann::json j{{"height", map.height()}, {"width", map.width()}, {"min", lo}, {"max", hi}};
  out.sidecar = j.dump(2) + "\n";
  return out;
}

}  // namespace fgad
