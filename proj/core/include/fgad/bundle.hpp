// SPDX-License-Identifier: Apache-2.0
#pragma once
// Model bundle: a directory of canonical files plus a manifest of SHA-256
// content hashes. Bundles are written once into a fresh directory and never
// modified afterwards.
//
//   manifest.json      format, version, category, file -> sha256
//   config.json        run configuration snapshot (opaque to this module)
//   encoder.json       EncoderSpec
//   model.json         category, logit scale
//   mfsc.json          caption document, canonical form
//   prompts.json       prompt templates
//   params.json        placeholder embeddings and Attr-MoE gates
//   qf_*.mat           Query Former matrices (FGADMATD, f64)
//   intrinsics.mat     intrinsic queries, one row per family
//   memory.mat         normal memory bank
//   probe.feat         stored query grid (FGADFEAT)
//   probe.smap         its pixel map M_pix (FGADSMAP)
//   probe.json         its image score M_img
// Any further files (loss traces, reports) are carried as extras.

#include "fgad/numeric.hpp"
#include "fgad/pipeline.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace fgad::bundle {

inline constexpr int kFormatVersion = 1;
inline constexpr std::string_view kFormatName = "fgad-bundle";

struct Probe {
  TokenGrid query;  ///< f32-exact, as stored
  ScoreMap m_pix;   ///< f32-exact, as stored
  double m_img = 0.0;
};

struct Bundle {
  pipeline::Model model;
  std::string config_json = "{}\n";
  Probe probe;
  std::map<std::string, std::string> extras;  ///< file name -> contents
};

/// Runs inference on the f32 image of query and keeps the f32 image of the map.
Probe make_probe(const pipeline::Model& model, const TokenGrid& query);

/// File name -> contents, manifest included. Deterministic in the bundle.
std::map<std::string, std::string> bundle_files(const Bundle& b);

/// Writes into a temporary sibling directory and renames it to dir.
/// Throws std::runtime_error if dir already exists.
void save_bundle(const Bundle& b, const std::filesystem::path& dir);

/// Verifies every manifest hash (FormatError("manifest"/file name) on any
/// mismatch, missing or unlisted file), then rebuilds the model.
Bundle load_bundle(const std::filesystem::path& dir);

/// Re-runs inference on the stored probe and compares bit-for-bit.
bool verify_probe(const Bundle& b);

/// Summary JSON: manifest, component names, prompt and parameter counts,
/// memory size, probe scores, and whether the probe reproduces.
std::string inspect(const std::filesystem::path& dir);

/// root/<category>/v0001, v0002, ...: the first version not yet present.
std::filesystem::path next_version_dir(const std::filesystem::path& root, std::string_view category);

/// Most recent version directory under root/<category>; throws if none.
std::filesystem::path latest_version_dir(const std::filesystem::path& root, std::string_view category);

}  // namespace fgad::bundle
