// SPDX-License-Identifier: Apache-2.0
#include "fgad/scoring.hpp"

#include "fgad/query_former.hpp"

#include <algorithm>
#include <cmath>

namespace fgad::scoring {
namespace {

FeatMat normalized_rows(const FeatMat& m) { return m.rowwise().normalized(); }

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

void check_same_shape(const ScoreMap& a, const ScoreMap& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) throw DomainError(std::string(what) + ": shape mismatch");
}

}  // namespace

NormalMemory build_memory(const std::vector<TokenGrid>& shots) {
  if (shots.empty()) throw DomainError("build_memory: need at least one shot");
  Eigen::Index rows = 0;
  const Eigen::Index d = shots.front().tokens.cols();
  for (const auto& s : shots) {
    if (s.tokens.cols() != d) throw DomainError("build_memory: dimension mismatch between shots");
    rows += s.tokens.rows();
  }
  NormalMemory mem;
  mem.bank.resize(rows, d);
  Eigen::Index r = 0;
  for (const auto& s : shots) {
    mem.bank.middleRows(r, s.tokens.rows()) = s.tokens;
    r += s.tokens.rows();
  }
  return mem;
}

ScoreMap score_vad(const TokenGrid& query, const NormalMemory& mem) {
  if (mem.bank.rows() == 0) throw DomainError("score_vad: empty memory");
  if (mem.bank.cols() != query.tokens.cols()) throw DomainError("score_vad: dimension mismatch");
  const FeatMat q = normalized_rows(query.tokens);
  const FeatMat r = normalized_rows(mem.bank);
  const Eigen::MatrixXd sims = q * r.transpose();
  ScoreMap out(query.height, query.width);
  for (int i = 0; i < query.token_count(); ++i) {
    const double best = std::clamp(sims.row(i).maxCoeff(), -1.0, 1.0);
    out.set(i / query.width, i % query.width, clamp01(0.5 * (1.0 - best)));
  }
  return out;
}

AssignmentMap assign_prompts(const TokenGrid& query, const std::vector<FeatVec>& intrinsics) {
  if (intrinsics.empty()) throw DomainError("assign_prompts: no families");
  const Eigen::Index d = query.tokens.cols();
  Eigen::MatrixXd P(d, static_cast<Eigen::Index>(intrinsics.size()));
  for (std::size_t k = 0; k < intrinsics.size(); ++k) {
    if (intrinsics[k].size() != d) throw DomainError("assign_prompts: dimension mismatch");
    P.col(static_cast<Eigen::Index>(k)) = l2_normalize(intrinsics[k]);
  }
  const Eigen::MatrixXd sims = normalized_rows(query.tokens) * P;
  AssignmentMap out{query.height, query.width, std::vector<int>(static_cast<std::size_t>(query.token_count()), 0)};
  for (Eigen::Index i = 0; i < sims.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < sims.cols(); ++k) {
      if (sims(i, k) > sims(i, best)) best = k;
    }
    out.families[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

double anomaly_probability(const FeatVec& z, const FeatVec& p_n, const FeatVec& p_a, LogitScale scale) {
  return stable_sigmoid(scale.value() * (cosine(z, p_a) - cosine(z, p_n)));
}

std::vector<FamilyPrompts> family_prompts(const prompts::PromptSet& set) {
  std::vector<FamilyPrompts> out;
  for (int f = 0; f < qf::family_count(set.component_count); ++f) {
    const auto& bank = set.bank(qf::family_level(f));
    if (bank.normal.empty() || bank.mean_abnormal.size() == 0) {
      throw DomainError("family_prompts: family " + std::to_string(f) + " lacks encoded prompts");
    }
    out.push_back({bank.normal.front(), bank.mean_abnormal});
  }
  return out;
}

ScoreMap score_pad(const TokenGrid& query, const AssignmentMap& assign, const std::vector<FamilyPrompts>& prompts,
                   LogitScale scale) {
  if (assign.height != query.height || assign.width != query.width) throw DomainError("score_pad: shape mismatch");
  ScoreMap out(query.height, query.width);
  for (int i = 0; i < query.token_count(); ++i) {
    const int f = assign.families[static_cast<std::size_t>(i)];
    if (f < 0 || f >= static_cast<int>(prompts.size())) throw DomainError("score_pad: family index out of range");
    const auto& p = prompts[static_cast<std::size_t>(f)];
    out.set(i / query.width, i % query.width, anomaly_probability(query.token(i), p.normal, p.abnormal, scale));
  }
  return out;
}

ScoreMap reweight_image_level(const ScoreMap& m_hat, const TokenGrid& query, const FamilyPrompts& image_prompts,
                              LogitScale scale) {
  if (m_hat.height() != query.height || m_hat.width() != query.width) {
    throw DomainError("reweight_image_level: shape mismatch");
  }
  std::vector<double> s(m_hat.size());
  for (int i = 0; i < query.token_count(); ++i) {
    s[static_cast<std::size_t>(i)] = anomaly_probability(query.token(i), image_prompts.normal, image_prompts.abnormal, scale);
  }
  const auto w = token_softmax_weights(s, LogitScale(1.0));
  const double T = static_cast<double>(m_hat.size());
  std::vector<double> out(m_hat.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = clamp01(T * w[i] * m_hat[i]);
  return ScoreMap(m_hat.height(), m_hat.width(), std::move(out));
}

ScoreMap fuse_pixel(const ScoreMap& m_v, const ScoreMap& m_p) {
  check_same_shape(m_v, m_p, "fuse_pixel");
  std::vector<double> out(m_v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = harmonic_combine(m_v[i], m_p[i]);
  return ScoreMap(m_v.height(), m_v.width(), std::move(out));
}

double image_score(const TokenGrid& query, const FamilyPrompts& image_prompts, const ScoreMap& m_pix,
                   LogitScale scale) {
  const double s_i = anomaly_probability(query.class_token, image_prompts.normal, image_prompts.abnormal, scale);
  return harmonic_combine(m_pix.max(), s_i);
}

Inference infer(const TokenGrid& query, const NormalMemory& mem, const std::vector<FeatVec>& intrinsics,
                const std::vector<FamilyPrompts>& prompts, LogitScale scale) {
  if (prompts.empty()) throw DomainError("infer: no family prompts");
  Inference r;
  r.m_v = score_vad(query, mem);
  r.assignment = assign_prompts(query, intrinsics);
  r.m_hat = score_pad(query, r.assignment, prompts, scale);
  r.m_p = reweight_image_level(r.m_hat, query, prompts.front(), scale);
  r.m_pix = fuse_pixel(r.m_v, r.m_p);
  r.s_i = anomaly_probability(query.class_token, prompts.front().normal, prompts.front().abnormal, scale);
  r.m_img = harmonic_combine(r.m_pix.max(), r.s_i);
  return r;
}

}  // namespace fgad::scoring
