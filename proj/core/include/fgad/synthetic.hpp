// SPDX-License-Identifier: Apache-2.0
#pragma once
// Category fixtures and seeded scene generators for the synthetic benchmark.

#include "fgad/encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace fgad::synthetic {

struct RegionRect {
  int component = 0;
  int row = 0;
  int col = 0;
  int rows = 1;
  int cols = 1;
  bool operator==(const RegionRect&) const = default;
};

/// A category: its scene components (index 0 = background), rectangular
/// layout, and the id of its MFSC caption fixture. Scene component i+1 is
/// described by caption component i.
struct CategoryFixture {
  std::string category;
  std::string mfsc_fixture;
  int height = 15;
  int width = 15;
  std::vector<SceneComponent> components;
  std::vector<RegionRect> regions;  ///< painted in order over a background canvas
  int jitter = 1;                   ///< max layout shift (cells) per normal scene
  double attribute_stddev = 0.05;   ///< spread of per-cell attribute vectors
  std::vector<std::string> defect_words = {"damaged", "broken"};
  double defect_semantic_weight = 0.7;  ///< share of a defect direction drawn from defect_words
  int defect_min = 2;                   ///< defect patch side length range
  int defect_max = 3;

  int foreground_component_count() const noexcept { return static_cast<int>(components.size()) - 1; }
  void validate() const;
  bool operator==(const CategoryFixture&) const = default;
};

CategoryFixture fixture_from_json(std::string_view text);
std::string fixture_to_json(const CategoryFixture& fixture);
CategoryFixture load_fixture(const std::filesystem::path& path);

/// Ground-truth layout shifted by (dr, dc); cells shifted off-canvas become background.
std::vector<int> layout_for(const CategoryFixture& fixture, int dr, int dc);

/// Normal scene; stream = (seed, role, index).
SyntheticScene make_normal_scene(const CategoryFixture& fixture, const EncoderSpec& spec, std::uint64_t seed,
                                 std::string_view role, int index);

/// Normal scene plus one square defect patch placed uniformly over the grid
/// (wrapping around the edges).
/// Every patch cell carries a perturbation of norm `magnitude`.
SyntheticScene make_anomalous_scene(const CategoryFixture& fixture, const EncoderSpec& spec, std::uint64_t seed,
                                    std::string_view role, int index, double magnitude);

std::vector<SyntheticScene> make_shots(const CategoryFixture& fixture, const EncoderSpec& spec, int k,
                                       std::uint64_t seed);

struct LabeledScene {
  SyntheticScene scene;
  bool anomalous = false;
};

struct SuiteConfig {
  int normal_count = 60;
  int anomalous_count = 60;
  double magnitude_sigmas = 3.0;  ///< perturbation norm in units of EncoderSpec::noise_sigma
  std::uint64_t seed = 0;
};

std::vector<LabeledScene> make_test_suite(const CategoryFixture& fixture, const EncoderSpec& spec,
                                          const SuiteConfig& cfg);

}  // namespace fgad::synthetic
