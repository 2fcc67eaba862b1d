// SPDX-License-Identifier: Apache-2.0
#include "fgad/feature_file.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace fgad {
namespace detail {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::string_view in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

float get_f32(std::string_view in, std::size_t offset) { return std::bit_cast<float>(get_u32(in, offset)); }

double get_f64(std::string_view in, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace detail

namespace {

constexpr std::string_view kFeatureMagic = "FGADFEAT";
constexpr std::string_view kMatrixMagic = "FGADMATD";
constexpr std::size_t kFeatureHeader = 28;
constexpr std::size_t kMatrixHeader = 20;

}  // namespace

std::string encode_feature_file(const TokenGrid& grid) {
  const auto T = static_cast<std::uint64_t>(grid.tokens.rows());
  const auto d = static_cast<std::uint64_t>(grid.tokens.cols());
  if (T != static_cast<std::uint64_t>(grid.height) * static_cast<std::uint64_t>(grid.width)) {
    throw FormatError("T != h*w", "grid token count does not match its dimensions");
  }
  if (static_cast<std::uint64_t>(grid.class_token.size()) != d) {
    throw FormatError("d", "class token dimension mismatch");
  }
  std::string out;
  out.reserve(kFeatureHeader + 4 * d + 4 * T * d);
  out.append(kFeatureMagic);
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(T));
  detail::put_u32(out, static_cast<std::uint32_t>(d));
  detail::put_u32(out, static_cast<std::uint32_t>(grid.height));
  detail::put_u32(out, static_cast<std::uint32_t>(grid.width));
  for (std::uint64_t k = 0; k < d; ++k) detail::put_f32(out, static_cast<float>(grid.class_token[static_cast<Eigen::Index>(k)]));
  for (std::uint64_t i = 0; i < T; ++i)
    for (std::uint64_t k = 0; k < d; ++k)
      detail::put_f32(out, static_cast<float>(grid.tokens(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k))));
  return out;
}

TokenGrid decode_feature_file(std::string_view bytes) {
  if (bytes.size() < kFeatureHeader) throw FormatError("length", "truncated header");
  if (bytes.substr(0, 8) != kFeatureMagic) throw FormatError("magic", "not a FGADFEAT file");
  const std::uint32_t version = detail::get_u32(bytes, 8);
  if (version != 1) throw FormatError("version", "unsupported version " + std::to_string(version));
  const std::uint64_t T = detail::get_u32(bytes, 12);
  const std::uint64_t d = detail::get_u32(bytes, 16);
  const std::uint64_t h = detail::get_u32(bytes, 20);
  const std::uint64_t w = detail::get_u32(bytes, 24);
  if (T != h * w) throw FormatError("T != h*w", "header token count " + std::to_string(T) + " != h*w");
  if (d == 0) throw FormatError("d", "feature dimension must be positive");
  if (T == 0) throw FormatError("T", "token count must be positive");
  if (h > 0x7FFFFFFF || w > 0x7FFFFFFF || d > 0x7FFFFFFF) throw FormatError("h", "dimension too large");
  if (T * d > (std::uint64_t{1} << 40)) throw FormatError("length", "header implies an implausibly large payload");
  const std::uint64_t expected = kFeatureHeader + 4 * d + 4 * T * d;
  if (bytes.size() != expected) {
    throw FormatError("length", "file is " + std::to_string(bytes.size()) + " bytes, header implies " +
                                    std::to_string(expected));
  }
  TokenGrid grid;
  grid.height = static_cast<int>(h);
  grid.width = static_cast<int>(w);
  grid.resolution = Resolution::Native;
  grid.class_token.resize(static_cast<Eigen::Index>(d));
  grid.tokens.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(d));
  std::size_t off = kFeatureHeader;
  auto next = [&] {
    const float v = detail::get_f32(bytes, off);
    off += 4;
    if (!std::isfinite(v)) throw FormatError("payload", "non-finite feature value");
    return static_cast<double>(v);
  };
  for (std::uint64_t k = 0; k < d; ++k) grid.class_token[static_cast<Eigen::Index>(k)] = next();
  for (std::uint64_t i = 0; i < T; ++i)
    for (std::uint64_t k = 0; k < d; ++k) grid.tokens(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = next();
  return grid;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::random_device rd;
  const auto tmp = path.parent_path() / (path.filename().string() + ".tmp" + std::to_string(rd()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_feature_file(const TokenGrid& grid, const std::filesystem::path& path) {
  write_file_atomic(path, encode_feature_file(grid));
}

TokenGrid load_feature_file(const std::filesystem::path& path) { return decode_feature_file(read_file_bytes(path)); }

std::string encode_matrix(const FeatMat& m) {
  std::string out;
  out.reserve(kMatrixHeader + 8 * static_cast<std::size_t>(m.size()));
  out.append(kMatrixMagic);
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) detail::put_f64(out, m(r, c));
  return out;
}

FeatMat decode_matrix(std::string_view bytes) {
  if (bytes.size() < kMatrixHeader) throw FormatError("length", "truncated header");
  if (bytes.substr(0, 8) != kMatrixMagic) throw FormatError("magic", "not a FGADMATD file");
  if (detail::get_u32(bytes, 8) != 1) throw FormatError("version", "unsupported version");
  const std::uint64_t rows = detail::get_u32(bytes, 12);
  const std::uint64_t cols = detail::get_u32(bytes, 16);
  if (rows * cols > (std::uint64_t{1} << 40) || bytes.size() != kMatrixHeader + 8 * rows * cols) throw FormatError("length", "payload size mismatch");
  FeatMat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::size_t off = kMatrixHeader;
  for (std::uint64_t r = 0; r < rows; ++r)
    for (std::uint64_t c = 0; c < cols; ++c, off += 8)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = detail::get_f64(bytes, off);
  return m;
}

}  // namespace fgad
