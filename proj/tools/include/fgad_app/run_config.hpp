// SPDX-License-Identifier: Apache-2.0
#pragma once
// Run configuration for the fgad tool: every training setting, the encoder
// spec, paths, mode, fixture ids and the benchmark suite sizes. Stored as
// JSON; command-line flags override it and a snapshot goes into each bundle.

#include "fgad/caption_client.hpp"
#include "fgad/evaluation.hpp"
#include "fgad/pipeline.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace fgad::app {

enum class Mode { Synthetic, FeatureImport };

std::string_view to_string(Mode m);
Mode mode_from_string(std::string_view s);

struct Paths {
  std::filesystem::path fixtures = "fixtures";   ///< holds categories/ and mfsc/
  std::filesystem::path cache = ".fgad/cache";   ///< caption cache
  std::filesystem::path bundles = ".fgad/bundles";
  std::filesystem::path features;                ///< feature-import root: <category>/shots/*.feat
};

struct SuiteSettings {
  int normal_count = 60;
  int anomalous_count = 60;
  double magnitude_sigmas = 3.0;
  int null_normal_count = 400;
  int null_anomalous_count = 400;
};

struct RunConfig {
  pipeline::PipelineConfig pipeline{};
  int grid_height = 15;
  int grid_width = 15;
  Mode mode = Mode::Synthetic;
  std::vector<std::string> fixtures = {"pcb_fixture"};
  Paths paths{};
  captions::EndpointConfig captions{};
  SuiteSettings suite{};
  eval::PixelPooling pooling = eval::PixelPooling::Pooled;
  std::uint64_t seed = 0;

  /// Routes one seed into every random stream: the encoder world, prompt
  /// initialization, shot sampling, training order and the test suites.
  void set_seed(std::uint64_t s);
  std::uint64_t shot_seed() const;
  std::uint64_t suite_seed() const;
  std::uint64_t null_suite_seed() const;

  /// Throws DomainError.
  void validate() const;

  /// include_paths=false drops machine-specific paths (used for bundle snapshots).
  std::string to_json(bool include_paths = true) const;
  /// Missing keys keep their defaults. Relative paths resolve against base_dir.
  static RunConfig from_json(std::string_view text, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
};

}  // namespace fgad::app
