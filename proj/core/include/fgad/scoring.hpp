// SPDX-License-Identifier: Apache-2.0
#pragma once
// Inference: memory-bank vision scores, prompt-guided token scores with
// image-level reweighting, and harmonic fusion.

#include "fgad/encoder.hpp"
#include "fgad/numeric.hpp"
#include "fgad/prompt_bank.hpp"

#include <vector>

namespace fgad::scoring {

struct NormalMemory {
  FeatMat bank;  ///< one row per stored token
  std::size_t size() const noexcept { return static_cast<std::size_t>(bank.rows()); }
};

/// Shot order, then row-major token order.
NormalMemory build_memory(const std::vector<TokenGrid>& shots);

/// min over the bank of (1 - cos) / 2, exact.
ScoreMap score_vad(const TokenGrid& query, const NormalMemory& mem);

struct AssignmentMap {
  int height = 0;
  int width = 0;
  std::vector<int> families;  ///< row-major
  int at(int row, int col) const { return families[static_cast<std::size_t>(row) * width + col]; }
  bool operator==(const AssignmentMap&) const = default;
};

/// Argmax cosine against the intrinsic features, ties to the lowest index.
AssignmentMap assign_prompts(const TokenGrid& query, const std::vector<FeatVec>& intrinsics);

/// exp(s<z,a>) / (exp(s<z,n>) + exp(s<z,a>)), evaluated as a logistic.
double anomaly_probability(const FeatVec& z, const FeatVec& p_n, const FeatVec& p_a, LogitScale scale);

/// Per-family scoring prompts: the family's NHP feature and its mean abnormal feature.
struct FamilyPrompts {
  FeatVec normal;
  FeatVec abnormal;
};

std::vector<FamilyPrompts> family_prompts(const prompts::PromptSet& set);

ScoreMap score_pad(const TokenGrid& query, const AssignmentMap& assign, const std::vector<FamilyPrompts>& prompts,
                   LogitScale scale);

/// Token softmax over image-level anomaly probabilities (unit temperature),
/// times T, times the map, clamped to [0,1].
ScoreMap reweight_image_level(const ScoreMap& m_hat, const TokenGrid& query, const FamilyPrompts& image_prompts,
                              LogitScale scale);

ScoreMap fuse_pixel(const ScoreMap& m_v, const ScoreMap& m_p);

/// harmonic(max m_pix, S_i) with S_i the class-token anomaly probability.
double image_score(const TokenGrid& query, const FamilyPrompts& image_prompts, const ScoreMap& m_pix,
                   LogitScale scale);

struct Inference {
  ScoreMap m_v;
  ScoreMap m_hat;
  ScoreMap m_p;
  ScoreMap m_pix;
  AssignmentMap assignment;
  double s_i = 0.0;
  double m_img = 0.0;
};

/// Full two-branch inference for one query grid.
Inference infer(const TokenGrid& query, const NormalMemory& mem, const std::vector<FeatVec>& intrinsics,
                const std::vector<FamilyPrompts>& prompts, LogitScale scale);

}  // namespace fgad::scoring
