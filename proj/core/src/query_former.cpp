// SPDX-License-Identifier: Apache-2.0
#include "fgad/query_former.hpp"

#include "fgad/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fgad::qf {
namespace {

using prompts::Polarity;
using prompts::PromptLevel;

Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> g(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = g(rng);
  return m;
}

Branch gaussian_branch(Rng& rng, int d) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  Branch b;
  b.wq = gaussian(rng, d, d, s);
  b.wk = gaussian(rng, d, d, s);
  b.wv = gaussian(rng, d, d, s);
  return b;
}

template <class M>
void push(std::vector<double>& out, const M& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
}

template <class M>
void pull(const std::vector<double>& in, std::size_t& off, M& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = in[off++];
}

BranchTrace attend(const Branch& b, const FeatVec& query, const std::vector<FeatVec>& bank) {
  if (bank.empty()) throw DomainError("qf_forward: empty prompt bank");
  const Eigen::Index d = query.size();
  BranchTrace t;
  t.inputs.resize(static_cast<Eigen::Index>(bank.size()), d);
  for (std::size_t j = 0; j < bank.size(); ++j) {
    if (bank[j].size() != d) throw DomainError("qf_forward: bank dimension mismatch");
    t.inputs.row(static_cast<Eigen::Index>(j)) = bank[j].transpose();
  }
  t.q = b.wq * query;
  t.keys = t.inputs * b.wk.transpose();
  t.values = t.inputs * b.wv.transpose();
  const Eigen::VectorXd logits = t.keys * t.q / std::sqrt(static_cast<double>(d));
  const double mx = logits.maxCoeff();
  double z = 0.0;
  for (Eigen::Index j = 0; j < logits.size(); ++j) z += std::exp(logits[j] - mx);
  t.attention.resize(bank.size());
  t.output = FeatVec::Zero(d);
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    t.attention[static_cast<std::size_t>(j)] = std::exp(logits[j] - mx) / z;
    t.output += t.attention[static_cast<std::size_t>(j)] * t.values.row(j).transpose();
  }
  return t;
}

// Accumulates branch parameter gradients, returns the gradient w.r.t. the raw query.
FeatVec attend_backward(const Branch& b, const BranchTrace& t, const FeatVec& query, const FeatVec& grad_out,
                        Branch& g) {
  const Eigen::Index n = t.inputs.rows();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(query.size()));
  Eigen::VectorXd alpha(n);
  for (Eigen::Index j = 0; j < n; ++j) alpha[j] = t.attention[static_cast<std::size_t>(j)];
  // values: o = sum_j alpha_j Wv k_j
  g.wv += grad_out * (t.inputs.transpose() * alpha).transpose();
  const Eigen::VectorXd dalpha = t.values * grad_out;
  const double mean_dalpha = alpha.dot(dalpha);
  const Eigen::VectorXd dlogit = alpha.array() * (dalpha.array() - mean_dalpha);
  // logits_j = (Wq q) . (Wk k_j) / sqrt(d)
  const FeatVec dq_proj = inv_sqrt_d * (t.keys.transpose() * dlogit);
  g.wk += (inv_sqrt_d * t.q) * (t.inputs.transpose() * dlogit).transpose();
  g.wq += dq_proj * query.transpose();
  return b.wq.transpose() * dq_proj;
}

}  // namespace

int family_count(int component_count) { return component_count + 2; }

PromptLevel family_level(int family) {
  if (family == 0) return PromptLevel::image();
  if (family == 1) return PromptLevel::foreground();
  if (family < 0) throw DomainError("family_level: negative family");
  return PromptLevel::component_level(family - 2);
}

int family_of(const PromptLevel& level) {
  switch (level.kind) {
    case PromptLevel::Kind::Image: return 0;
    case PromptLevel::Kind::Foreground: return 1;
    case PromptLevel::Kind::Component: return level.component + 2;
    case PromptLevel::Kind::Background: break;
  }
  throw DomainError("family_of: background prompts form no family");
}

int family_of_region(int label) { return label <= 0 ? -1 : label + 1; }

Params Params::initialize(int dim, int families, std::uint64_t seed) {
  if (dim < 1 || families < 1) throw DomainError("qf::Params: bad dimensions");
  Rng rng = derive_rng(seed, "qf/init");
  Params p;
  p.normal = gaussian_branch(rng, dim);
  p.abnormal = gaussian_branch(rng, dim);
  p.wf = gaussian(rng, dim, 2 * dim, 1.0 / std::sqrt(static_cast<double>(dim)));
  p.bias = FeatVec::Zero(dim);
  Rng qrng = derive_rng(seed, "qf/queries");
  p.queries = gaussian(qrng, families, dim, 0.02);
  return p;
}

Params Params::zeros_like() const {
  Params z;
  const auto d = wf.rows();
  for (Branch* b : {&z.normal, &z.abnormal}) {
    b->wq = Eigen::MatrixXd::Zero(d, d);
    b->wk = Eigen::MatrixXd::Zero(d, d);
    b->wv = Eigen::MatrixXd::Zero(d, d);
  }
  z.wf = Eigen::MatrixXd::Zero(d, 2 * d);
  z.bias = FeatVec::Zero(d);
  z.queries = FeatMat::Zero(queries.rows(), queries.cols());
  return z;
}

std::size_t Params::size() const {
  const auto d = static_cast<std::size_t>(wf.rows());
  return 6 * d * d + 2 * d * d + d + static_cast<std::size_t>(queries.size());
}

std::vector<double> Params::flatten() const {
  std::vector<double> out;
  out.reserve(size());
  for (const Branch* b : {&normal, &abnormal}) {
    push(out, b->wq);
    push(out, b->wk);
    push(out, b->wv);
  }
  push(out, wf);
  out.insert(out.end(), bias.data(), bias.data() + bias.size());
  push(out, queries);
  return out;
}

void Params::assign(const std::vector<double>& flat) {
  if (flat.size() != size()) throw DomainError("qf::Params::assign: size mismatch");
  std::size_t off = 0;
  for (Branch* b : {&normal, &abnormal}) {
    pull(flat, off, b->wq);
    pull(flat, off, b->wk);
    pull(flat, off, b->wv);
  }
  pull(flat, off, wf);
  for (Eigen::Index i = 0; i < bias.size(); ++i) bias[i] = flat[off++];
  pull(flat, off, queries);
}

void Params::add_scaled(const Params& o, double alpha) {
  normal.wq += alpha * o.normal.wq;
  normal.wk += alpha * o.normal.wk;
  normal.wv += alpha * o.normal.wv;
  abnormal.wq += alpha * o.abnormal.wq;
  abnormal.wk += alpha * o.abnormal.wk;
  abnormal.wv += alpha * o.abnormal.wv;
  wf += alpha * o.wf;
  bias += alpha * o.bias;
  queries += alpha * o.queries;
}

bool Params::all_finite() const {
  return normal.wq.allFinite() && normal.wk.allFinite() && normal.wv.allFinite() && abnormal.wq.allFinite() &&
         abnormal.wk.allFinite() && abnormal.wv.allFinite() && wf.allFinite() && bias.allFinite() &&
         queries.allFinite();
}

bool Params::operator==(const Params& o) const {
  return normal == o.normal && abnormal == o.abnormal && wf.rows() == o.wf.rows() && wf == o.wf &&
         bias == o.bias && queries.rows() == o.queries.rows() && queries == o.queries;
}

std::vector<FamilyBank> family_banks(const prompts::PromptSet& set) {
  if (!set.encoded()) throw DomainError("family_banks: prompt set is not encoded");
  std::vector<FamilyBank> out;
  for (int f = 0; f < family_count(set.component_count); ++f) {
    const auto& bank = set.bank(family_level(f));
    FamilyBank fb;
    fb.normal = bank.normal;
    fb.abnormal = bank.handcrafted;
    fb.abnormal.insert(fb.abnormal.end(), bank.learnable.begin(), bank.learnable.end());
    fb.mean_normal = bank.mean_normal;
    fb.mean_abnormal = bank.mean_abnormal;
    out.push_back(std::move(fb));
  }
  return out;
}

ForwardTrace forward_family(const Params& params, int family, const FamilyBank& bank) {
  if (family < 0 || family >= params.families()) throw DomainError("qf_forward: family out of range");
  const FeatVec query = params.queries.row(family).transpose();
  ForwardTrace t;
  t.normal = attend(params.normal, query, bank.normal);
  t.abnormal = attend(params.abnormal, query, bank.abnormal);
  const Eigen::Index d = query.size();
  t.pre_norm = params.wf.leftCols(d) * t.normal.output + params.wf.rightCols(d) * t.abnormal.output + params.bias;
  t.norm = t.pre_norm.norm();
  if (!(t.norm > 0.0) || !std::isfinite(t.norm)) throw DomainError("qf_forward: degenerate fused feature");
  t.output = t.pre_norm / t.norm;
  return t;
}

FeatVec qf_forward_family(const Params& params, int family, const FamilyBank& bank) {
  return forward_family(params, family, bank).output;
}

std::vector<FeatVec> qf_forward(const Params& params, const std::vector<FamilyBank>& banks) {
  if (static_cast<int>(banks.size()) != params.families()) throw DomainError("qf_forward: family count mismatch");
  std::vector<FeatVec> out;
  for (int f = 0; f < params.families(); ++f) out.push_back(qf_forward_family(params, f, banks[static_cast<std::size_t>(f)]));
  return out;
}

double family_loss(const Params& params, int family, const FamilyBank& bank, Params* grads) {
  const ForwardTrace t = forward_family(params, family, bank);
  const FeatVec tn = l2_normalize(bank.mean_normal);
  const FeatVec ta = l2_normalize(bank.mean_abnormal);
  const double loss = -0.5 * (t.output.dot(tn) + t.output.dot(ta));
  if (!grads) return loss;
  const Eigen::Index d = t.output.size();
  const FeatVec du = -0.5 * (tn + ta);
  const FeatVec dh = (du - t.output * t.output.dot(du)) / t.norm;
  grads->wf.leftCols(d) += dh * t.normal.output.transpose();
  grads->wf.rightCols(d) += dh * t.abnormal.output.transpose();
  grads->bias += dh;
  const FeatVec query = params.queries.row(family).transpose();
  const FeatVec don = params.wf.leftCols(d).transpose() * dh;
  const FeatVec doa = params.wf.rightCols(d).transpose() * dh;
  FeatVec dq = attend_backward(params.normal, t.normal, query, don, grads->normal);
  dq += attend_backward(params.abnormal, t.abnormal, query, doa, grads->abnormal);
  grads->queries.row(family) += dq.transpose();
  return loss;
}

double mean_loss(const Params& params, const std::vector<FamilyBank>& banks) {
  double s = 0.0;
  for (int f = 0; f < params.families(); ++f) s += family_loss(params, f, banks[static_cast<std::size_t>(f)]);
  return s / static_cast<double>(params.families());
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw DomainError("qf::TrainConfig: learning_rate must be > 0");
  if (epochs < 0) throw DomainError("qf::TrainConfig: epochs must be >= 0");
}

TrainResult train_queryformer(const std::vector<FamilyBank>& banks, const Params& init, const TrainConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(banks.size()) != init.families()) throw DomainError("train_queryformer: family count mismatch");
  TrainResult r;
  r.params = init;
  r.initial_loss = mean_loss(r.params, banks);
  if (!std::isfinite(r.initial_loss)) throw DomainError("train_queryformer: non-finite initial loss");
  std::vector<int> order(banks.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng = derive_rng(cfg.seed, "qf/shuffle", {static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    for (int f : order) {
      Params g = r.params.zeros_like();
      const double l = family_loss(r.params, f, banks[static_cast<std::size_t>(f)], &g);
      if (!std::isfinite(l)) {
        throw DomainError("train_queryformer: non-finite loss for family " + std::to_string(f));
      }
      r.params.add_scaled(g, -cfg.learning_rate);
    }
    r.trace.push_back(mean_loss(r.params, banks));
    if (!std::isfinite(r.trace.back())) throw DomainError("train_queryformer: non-finite loss");
  }
  return r;
}

}  // namespace fgad::qf
