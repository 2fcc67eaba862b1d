// SPDX-License-Identifier: Apache-2.0
#pragma once
// Per-category steps shared by the subcommands: fixture and caption lookup,
// shot preparation, training, bundling and evaluation.

#include "fgad/bundle.hpp"
#include "fgad/evaluation.hpp"
#include "fgad/pipeline.hpp"
#include "fgad/synthetic.hpp"
#include "fgad_app/run_config.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fgad::app {

synthetic::CategoryFixture load_category(const RunConfig& cfg, const std::string& id);

/// Caption id for a fixture id: the category fixture's caption reference
/// when one exists, the id itself otherwise.
std::string caption_id(const RunConfig& cfg, const std::string& id);

/// Caption document through the caption client in fixture mode (cached under paths.cache).
mfsc::MFSCDocument caption_document(const RunConfig& cfg, const std::string& id);

struct ShotGrids {
  std::vector<TokenGrid> native;
  std::vector<TokenGrid> highres;       ///< empty when not available
  std::vector<std::vector<int>> truth;  ///< native ground-truth layouts (synthetic mode only)
  std::vector<std::vector<int>> truth_highres;
};

/// Synthetic: encoded k-shot scenes. Feature import: <features>/<id>/shots/*.feat
/// and, when present, matching files in <features>/<id>/highres/.
ShotGrids load_shots(const RunConfig& cfg, const std::string& id);

struct Trained {
  pipeline::Model model;
  pipeline::TrainingArtifacts artifacts;
};

Trained train_category(const RunConfig& cfg, const std::string& id);

/// Probe query stored with each bundle.
TokenGrid probe_query(const RunConfig& cfg, const std::string& id, const pipeline::Model& model);

bundle::Bundle make_bundle(const RunConfig& cfg, const std::string& id, const Trained& t);

/// Re-trains only the Query Former of a bundled model on its frozen prompt bank.
bundle::Bundle retrain_queryformer(const RunConfig& cfg, const bundle::Bundle& b);

enum class SuiteKind { Perturbed, Null };

std::vector<synthetic::LabeledScene> make_suite(const RunConfig& cfg, const synthetic::CategoryFixture& fx,
                                                SuiteKind kind);

eval::CategoryReport evaluate_category(const RunConfig& cfg, const pipeline::Model& model,
                                       const std::vector<synthetic::LabeledScene>& suite);

std::string qf_trace_to_csv(const qf::TrainResult& r);

}  // namespace fgad::app
