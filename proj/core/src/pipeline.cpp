// SPDX-License-Identifier: Apache-2.0
#include "fgad/pipeline.hpp"

#include <cmath>

namespace fgad::pipeline {

void PipelineConfig::validate() const {
  encoder.validate();
  align.validate();
  qf.validate();
  if (highres_factor < 1) throw DomainError("PipelineConfig: highres_factor must be >= 1");
  if (shots < 1) throw DomainError("PipelineConfig: shots must be >= 1");
  if (anomaly_words.empty()) throw DomainError("PipelineConfig: anomaly word list is empty");
}

void Model::refresh() {
  const TextEncoder text(encoder);
  prompts::encode_all(prompts, params, text);
  intrinsics = qf::qf_forward(qf, qf::family_banks(prompts));
  family_prompts = scoring::family_prompts(prompts);
}

scoring::Inference Model::infer(const TokenGrid& query) const {
  return scoring::infer(query, memory, intrinsics, family_prompts, scale);
}

RegionMap aggregate_regions(const TokenGrid& highres, const prompts::PromptSet& encoded, int factor,
                            RegionMap* highres_out) {
  std::vector<FeatVec> comps;
  for (int c = 0; c < encoded.component_count; ++c) {
    comps.push_back(encoded.bank(prompts::PromptLevel::component_level(c)).mean_normal);
  }
  RegionMap map = cluster_two_stage(highres, encoded.bank(prompts::PromptLevel::foreground()).mean_normal,
                                    encoded.background_feature(), comps);
  if (highres_out) *highres_out = map;
  return downsample_region_map(map, factor);
}

Model train_model_from_grids(const std::string& category, const mfsc::MFSCDocument& doc,
                             const std::vector<TokenGrid>& native, const std::vector<TokenGrid>& highres,
                             const PipelineConfig& cfg, TrainingArtifacts* artifacts) {
  cfg.validate();
  if (native.empty()) throw DomainError("train_model: no shots");
  if (!highres.empty() && highres.size() != native.size()) {
    throw DomainError("train_model: highres and native shot counts differ");
  }
  const TextEncoder text(cfg.encoder);
  Model m;
  m.category = category;
  m.encoder = cfg.encoder;
  m.scale = cfg.align.logit_scale;
  m.doc = doc;
  m.prompts = prompts::build_prompt_set(doc, cfg.anomaly_words, cfg.align.n_ab, cfg.seed);
  m.params = prompts::PromptParameters::initialize(m.prompts, cfg.encoder.token_embedding_dim, cfg.seed);
  prompts::encode_all(m.prompts, m.params, text);

  TrainingArtifacts local;
  TrainingArtifacts& art = artifacts ? *artifacts : local;
  std::vector<align::TrainingShot> shots;
  for (std::size_t i = 0; i < native.size(); ++i) {
    RegionMap hr;
    RegionMap nat;
    if (highres.empty()) {
      nat = aggregate_regions(native[i], m.prompts, 1, &hr);
    } else {
      const int factor = highres[i].height / native[i].height;
      if (factor * native[i].height != highres[i].height || factor * native[i].width != highres[i].width) {
        throw DomainError("train_model: highres grid is not an integer multiple of the native grid");
      }
      nat = aggregate_regions(highres[i], m.prompts, factor, &hr);
    }
    art.highres_maps.push_back(hr);
    art.native_maps.push_back(nat);
    shots.push_back({native[i], nat});
  }

  art.align = align::train_align(shots, m.prompts, m.params, text, cfg.align);
  m.params = art.align.params;
  prompts::encode_all(m.prompts, m.params, text);

  const auto banks = qf::family_banks(m.prompts);
  const auto init = qf::Params::initialize(cfg.encoder.feature_dim, qf::family_count(m.prompts.component_count),
                                           cfg.seed);
  qf::TrainConfig qcfg = cfg.qf;
  qcfg.seed = cfg.seed;
  art.qf = qf::train_queryformer(banks, init, qcfg);
  m.qf = art.qf.params;
  m.memory = scoring::build_memory(native);
  m.refresh();
  return m;
}

Model train_model(const mfsc::MFSCDocument& doc, const std::vector<SyntheticScene>& shots, const PipelineConfig& cfg,
                  TrainingArtifacts* artifacts) {
  if (shots.empty()) throw DomainError("train_model: no shots");
  const ImageEncoder image(cfg.encoder);
  std::vector<TokenGrid> native;
  std::vector<TokenGrid> highres;
  for (const auto& s : shots) {
    native.push_back(image.encode_scene(s));
    highres.push_back(image.encode_scene_highres(s, cfg.highres_factor));
  }
  return train_model_from_grids(shots.front().category, doc, native, highres, cfg, artifacts);
}

SceneScores score_scenes(const Model& model, const std::vector<synthetic::LabeledScene>& scenes) {
  const ImageEncoder image(model.encoder);
  SceneScores out;
  for (const auto& ls : scenes) {
    const TokenGrid grid = image.encode_scene(ls.scene);
    const auto inf = model.infer(grid);
    out.image_scores.push_back(inf.m_img);
    out.image_labels.push_back(ls.anomalous);
    out.pixel_scores.push_back(inf.m_pix.values());
    out.pixel_labels.push_back(ls.scene.anomaly_mask());
  }
  return out;
}

EvalResult summarize(const SceneScores& scores, eval::PixelPooling pooling) {
  EvalResult r;
  r.image_auroc = eval::auroc({scores.image_scores, scores.image_labels});
  if (pooling == eval::PixelPooling::Pooled) {
    eval::LabeledScores pooled;
    for (std::size_t i = 0; i < scores.pixel_scores.size(); ++i) {
      pooled.scores.insert(pooled.scores.end(), scores.pixel_scores[i].begin(), scores.pixel_scores[i].end());
      pooled.labels.insert(pooled.labels.end(), scores.pixel_labels[i].begin(), scores.pixel_labels[i].end());
    }
    r.pixel_auroc = eval::auroc(pooled);
  } else {
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < scores.pixel_scores.size(); ++i) {
      const auto& labels = scores.pixel_labels[i];
      const auto pos = std::count(labels.begin(), labels.end(), true);
      if (pos == 0 || pos == static_cast<long>(labels.size())) continue;
      sum += eval::auroc({scores.pixel_scores[i], labels});
      ++n;
    }
    if (n == 0) throw DomainError("summarize: no scene has both pixel classes");
    r.pixel_auroc = sum / n;
  }
  return r;
}

}  // namespace fgad::pipeline
