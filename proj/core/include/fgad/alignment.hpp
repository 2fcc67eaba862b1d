// SPDX-License-Identifier: Apache-2.0
#pragma once
// Multi-level alignment training of the learnable prompts. Each loss is a
// plain function of feature vectors returning its value and the gradient
// with respect to every vector input; train_align chains those gradients
// through the text encoder into placeholder embeddings and gates.

#include "fgad/encoder.hpp"
#include "fgad/numeric.hpp"
#include "fgad/prompt_bank.hpp"
#include "fgad/region_aggregation.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fgad::align {

struct TrainConfig {
  double epsilon = 1.0;
  double lambda_reg = 1.0;
  double gamma = 1.5;
  int n_ab = prompts::kDefaultAbnormalLearnable;
  double learning_rate = 2e-3;
  int epochs = 200;
  LogitScale logit_scale{};
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig& o) const;
};

struct ClipLoss {
  double loss = 0.0;
  FeatVec grad_normal;
  std::vector<FeatVec> grad_bank;
};

/// Token-weighted cross-entropy of the normal prompt against the abnormal
/// bank. tokens is T x d (need not be normalized); weights has length T and
/// is rescaled to mean 1.
ClipLoss loss_clip(const FeatMat& tokens, const std::vector<double>& weights, const FeatVec& p_n,
                   const std::vector<FeatVec>& bank, LogitScale scale);

struct TripletLoss {
  double loss = 0.0;
  bool active = false;  ///< margin violated
  FeatVec grad_anchor;
  FeatVec grad_normal;
  FeatVec grad_abnormal;
};

TripletLoss loss_triplet(const FeatVec& z, const FeatVec& p_n, const FeatVec& p_a, double epsilon);

struct MeanLoss {
  double loss = 0.0;
  FeatVec grad_ahp;
  FeatVec grad_alp;
};

/// Squared distance between the normalized inputs. Throws on a zero norm.
MeanLoss loss_mean(const FeatVec& ahp_mean, const FeatVec& alp);

struct RegLoss {
  double loss = 0.0;
  FeatVec grad_image;
  std::vector<FeatVec> grad_components;
};

RegLoss loss_reg(const FeatVec& p_a_img, const std::vector<FeatVec>& component_alp_means, const FeatVec& p_b,
                 double lambda_reg);

/// gamma where the token belongs to the level's region, else 1, rescaled to
/// mean 1. Image level covers every token, foreground every nonzero label,
/// component c the label c+1, background the label 0.
std::vector<double> token_weights(const RegionMap& map, const prompts::PromptLevel& level, double gamma);

/// Visual anchor for the triplet term: the class token at image level,
/// otherwise the normalized mean of the level's region tokens (class token if
/// the region is empty).
FeatVec triplet_anchor(const TokenGrid& grid, const RegionMap& map, const prompts::PromptLevel& level);

struct LossBreakdown {
  double clip = 0.0;
  double trip = 0.0;
  double mean = 0.0;
  double reg = 0.0;
  double total() const noexcept { return clip + trip + mean + reg; }
  bool operator==(const LossBreakdown&) const = default;
};

struct TrainingShot {
  TokenGrid grid;
  RegionMap map;  ///< native resolution, same shape as grid
};

/// Loss averaged over the shots. When grads is non-null, the gradient with
/// respect to params is accumulated into it (grads must be zeros_like(params)).
/// Re-encodes `set` with params. Throws DomainError naming the first
/// non-finite term.
LossBreakdown alignment_loss(const std::vector<TrainingShot>& shots, prompts::PromptSet& set,
                             const prompts::PromptParameters& params, const TextEncoder& enc, const TrainConfig& cfg,
                             prompts::PromptParameters* grads = nullptr);

struct TrainResult {
  prompts::PromptParameters params;
  LossBreakdown initial;
  std::vector<LossBreakdown> trace;  ///< full-batch loss after each epoch
};

/// Plain SGD, one step per shot in a seeded shuffle each epoch. `set` is left
/// encoded with the final parameters.
TrainResult train_align(const std::vector<TrainingShot>& shots, prompts::PromptSet& set,
                        const prompts::PromptParameters& init, const TextEncoder& enc, const TrainConfig& cfg);

/// epoch,l_clip,l_trip,l_mean,l_reg,total with epoch 0 the initial loss.
std::string trace_to_csv(const TrainResult& result);

/// True when total(i + window) <= total(i) for every i, counting the initial
/// loss as entry 0.
bool windowed_non_increasing(const TrainResult& result, int window = 20);

// Finite-difference verification.

struct GradEntry {
  std::string term;
  int point = 0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double rel_error = 0.0;  ///< |analytic - numeric| / max(|analytic|, |numeric|, floor)
};

struct GradReport {
  std::vector<GradEntry> entries;
  double tolerance = 1e-4;

  double max_rel_error(const std::string& term = "") const;
  bool passed() const;
  std::string to_json() const;
};

inline constexpr double kFiniteDifferenceStep = 1e-5;

/// Relative error of two gradient vectors under the GradReport convention.
double gradient_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                          double floor = 1e-8);

/// Central differences of f at x.
template <class F>
std::vector<double> numeric_gradient(F&& f, std::vector<double> x, double step = kFiniteDifferenceStep) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

struct GradCheckOptions {
  std::uint64_t seed = 0;
  int points = 100;
  int feature_dim = 16;
  int embedding_dim = 8;
  int tokens = 6;
  int bank = 4;
  LogitScale logit_scale{};
};

/// Runs every alignment loss and the prompt-encoder chain at `points` random
/// instances each; terms l_clip, l_trip, l_mean, l_reg, text_chain, alignment_total.
GradReport grad_check_alignment(const GradCheckOptions& options);
/// Query Former family loss with respect to every projection, the fusion
/// layer and the queries; term qf_family.
GradReport grad_check_queryformer(const GradCheckOptions& options);
/// Both of the above in one report.
GradReport grad_check_all(const GradCheckOptions& options);

}  // namespace fgad::align
