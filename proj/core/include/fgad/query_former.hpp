// SPDX-License-Identifier: Apache-2.0
#pragma once
// Query Former: one learnable query per prompt family attends, in two
// parallel single-head cross-attention branches, over the family's normal
// and abnormal prompt features. A linear fusion of both branch outputs,
// normalized, is the family's intrinsic representation.

#include "fgad/numeric.hpp"
#include "fgad/prompt_bank.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fgad::qf {

/// Family index: 0 = image, 1 = foreground, 2 + c = component c.
int family_count(int component_count);
prompts::PromptLevel family_level(int family);
int family_of(const prompts::PromptLevel& level);
/// Family of a region label (label 0 has none and returns -1).
int family_of_region(int label);

struct Branch {
  Eigen::MatrixXd wq;  ///< d x d
  Eigen::MatrixXd wk;
  Eigen::MatrixXd wv;
  bool operator==(const Branch& o) const { return wq == o.wq && wk == o.wk && wv == o.wv; }
};

struct Params {
  Branch normal;
  Branch abnormal;
  Eigen::MatrixXd wf;  ///< d x 2d
  FeatVec bias;        ///< d
  FeatMat queries;     ///< families x d

  int dim() const noexcept { return static_cast<int>(wf.rows()); }
  int families() const noexcept { return static_cast<int>(queries.rows()); }

  /// Projections ~ N(0, 1/d), queries ~ N(0, 0.02^2), bias 0.
  static Params initialize(int dim, int families, std::uint64_t seed);
  Params zeros_like() const;
  std::size_t size() const;
  /// Order: normal wq, wk, wv, abnormal wq, wk, wv, wf, bias, queries; matrices row-major.
  std::vector<double> flatten() const;
  void assign(const std::vector<double>& flat);
  void add_scaled(const Params& other, double alpha);
  bool all_finite() const;
  bool operator==(const Params& o) const;
};

/// Prompt features of one family.
struct FamilyBank {
  std::vector<FeatVec> normal;    ///< NHP features
  std::vector<FeatVec> abnormal;  ///< AHP and ALP features
  FeatVec mean_normal;            ///< normalized mean targets
  FeatVec mean_abnormal;
};

/// Banks for every family of an encoded prompt set.
std::vector<FamilyBank> family_banks(const prompts::PromptSet& set);

struct BranchTrace {
  FeatVec q;                       ///< W_q query
  Eigen::MatrixXd keys;            ///< n x d projected keys
  Eigen::MatrixXd values;          ///< n x d projected values
  Eigen::MatrixXd inputs;          ///< n x d raw bank features
  std::vector<double> attention;   ///< softmax weights
  FeatVec output;
};

struct ForwardTrace {
  BranchTrace normal;
  BranchTrace abnormal;
  FeatVec pre_norm;
  double norm = 0.0;
  FeatVec output;  ///< intrinsic representation
};

/// Throws DomainError on an empty bank.
ForwardTrace forward_family(const Params& params, int family, const FamilyBank& bank);
FeatVec qf_forward_family(const Params& params, int family, const FamilyBank& bank);
std::vector<FeatVec> qf_forward(const Params& params, const std::vector<FamilyBank>& banks);

/// -1/2 [cos(u, mean_normal) + cos(u, mean_abnormal)] for the family; with
/// grads non-null its gradient is accumulated there.
double family_loss(const Params& params, int family, const FamilyBank& bank, Params* grads = nullptr);
double mean_loss(const Params& params, const std::vector<FamilyBank>& banks);

struct TrainConfig {
  double learning_rate = 2e-2;
  int epochs = 300;
  std::uint64_t seed = 0;
  void validate() const;
};

struct TrainResult {
  Params params;
  double initial_loss = 0.0;
  std::vector<double> trace;  ///< mean family loss after each epoch
};

/// SGD, one step per family in a seeded shuffle each epoch. Prompt features
/// are inputs only.
TrainResult train_queryformer(const std::vector<FamilyBank>& banks, const Params& init, const TrainConfig& cfg);

}  // namespace fgad::qf
