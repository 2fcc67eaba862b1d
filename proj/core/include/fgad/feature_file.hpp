// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary containers, all little-endian.
//
// Feature file ("FGADFEAT"), version 1:
//   magic[8] u32 version u32 T u32 d u32 h u32 w
//   f32[d] class token, f32[T*d] tokens in row-major order
// Total length is exactly 28 + 4d + 4Td bytes.
//
// Matrix file ("FGADMATD"), version 1: magic[8] u32 version u32 rows u32 cols
// f64[rows*cols] row-major. Used for lossless parameter storage.

#include "fgad/encoder.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fgad {

class FormatError : public std::runtime_error {
 public:
  FormatError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

  /// Offending header field or section ("magic", "version", "T != h*w", "length", ...).
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

std::string encode_feature_file(const TokenGrid& grid);
TokenGrid decode_feature_file(std::string_view bytes);

void save_feature_file(const TokenGrid& grid, const std::filesystem::path& path);
TokenGrid load_feature_file(const std::filesystem::path& path);

std::string encode_matrix(const FeatMat& m);
FeatMat decode_matrix(std::string_view bytes);

std::string read_file_bytes(const std::filesystem::path& path);
/// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

namespace detail {

void put_u32(std::string& out, std::uint32_t v);
void put_f32(std::string& out, float v);
void put_f64(std::string& out, double v);
std::uint32_t get_u32(std::string_view in, std::size_t offset);
float get_f32(std::string_view in, std::size_t offset);
double get_f64(std::string_view in, std::size_t offset);

}  // namespace detail

}  // namespace fgad
