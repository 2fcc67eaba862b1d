// SPDX-License-Identifier: Apache-2.0
#pragma once
// End-to-end few-shot pipeline: prompts from a caption document, region
// maps from high-resolution shots, prompt alignment, Query Former training,
// normal memory, and two-branch inference.

#include "fgad/alignment.hpp"
#include "fgad/encoder.hpp"
#include "fgad/evaluation.hpp"
#include "fgad/mfsc.hpp"
#include "fgad/prompt_bank.hpp"
#include "fgad/query_former.hpp"
#include "fgad/region_aggregation.hpp"
#include "fgad/scoring.hpp"
#include "fgad/synthetic.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fgad::pipeline {

struct PipelineConfig {
  EncoderSpec encoder{};
  align::TrainConfig align{};
  qf::TrainConfig qf{};
  int highres_factor = 4;
  int shots = 4;
  std::vector<std::string> anomaly_words = prompts::kDefaultAnomalyWords;
  std::uint64_t seed = 0;
  void validate() const;
};

struct Model {
  std::string category;
  EncoderSpec encoder{};
  LogitScale scale{};
  mfsc::MFSCDocument doc;
  prompts::PromptSet prompts;
  prompts::PromptParameters params;
  qf::Params qf;
  scoring::NormalMemory memory;

  // Derived from the fields above by refresh().
  std::vector<FeatVec> intrinsics;
  std::vector<scoring::FamilyPrompts> family_prompts;

  /// Re-encodes the prompt banks and recomputes intrinsics and scoring prompts.
  void refresh();
  scoring::Inference infer(const TokenGrid& query) const;
};

struct TrainingArtifacts {
  std::vector<RegionMap> highres_maps;
  std::vector<RegionMap> native_maps;
  align::TrainResult align;
  qf::TrainResult qf;
};

/// Region maps for shots: two-stage clustering on the high-resolution grid
/// guided by the current prompt banks, downsampled to native resolution.
RegionMap aggregate_regions(const TokenGrid& highres, const prompts::PromptSet& encoded, int factor,
                            RegionMap* highres_out = nullptr);

/// Training from externally supplied grids. highres may be empty, in which
/// case the native grids are clustered directly.
Model train_model_from_grids(const std::string& category, const mfsc::MFSCDocument& doc,
                             const std::vector<TokenGrid>& native, const std::vector<TokenGrid>& highres,
                             const PipelineConfig& cfg, TrainingArtifacts* artifacts = nullptr);

/// Training on synthetic shots, encoded with cfg.encoder.
Model train_model(const mfsc::MFSCDocument& doc, const std::vector<SyntheticScene>& shots, const PipelineConfig& cfg,
                  TrainingArtifacts* artifacts = nullptr);

struct SceneScores {
  std::vector<double> image_scores;
  std::vector<bool> image_labels;
  std::vector<std::vector<double>> pixel_scores;  ///< per scene
  std::vector<std::vector<bool>> pixel_labels;
};

SceneScores score_scenes(const Model& model, const std::vector<synthetic::LabeledScene>& scenes);

struct EvalResult {
  double image_auroc = 0.0;
  double pixel_auroc = 0.0;
};

EvalResult summarize(const SceneScores& scores, eval::PixelPooling pooling = eval::PixelPooling::Pooled);

}  // namespace fgad::pipeline
