// SPDX-License-Identifier: Apache-2.0
#include "fgad/alignment.hpp"

#include "fgad/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fgad::align {
namespace {

using prompts::Polarity;
using prompts::PromptLevel;
using prompts::PromptParameters;
using prompts::PromptSet;

struct PreparedLevel {
  PromptLevel level;
  std::vector<double> weights;
  FeatVec anchor;
};

struct PreparedShot {
  FeatMat tokens;  // row-normalized
  std::vector<PreparedLevel> levels;
};

PreparedShot prepare(const TrainingShot& shot, const PromptSet& set, const TrainConfig& cfg) {
  if (shot.map.height != shot.grid.height || shot.map.width != shot.grid.width) {
    throw DomainError("train_align: region map shape does not match its token grid");
  }
  if (shot.map.component_count != set.component_count) {
    throw DomainError("train_align: region map component count does not match the prompt set");
  }
  PreparedShot p;
  p.tokens = shot.grid.tokens.rowwise().normalized();
  for (const auto& level : set.trained_levels()) {
    p.levels.push_back({level, token_weights(shot.map, level, cfg.gamma), triplet_anchor(shot.grid, shot.map, level)});
  }
  return p;
}

// Gradient of normalize(mean(f_1..f_n)) pulled back to each f_j (identical for all j).
FeatVec normalized_mean_vjp(const std::vector<const FeatVec*>& features, const FeatVec& grad_out) {
  FeatVec m = FeatVec::Zero(grad_out.size());
  for (const auto* f : features) m += *f;
  m /= static_cast<double>(features.size());
  const double n = m.norm();
  const FeatVec o = m / n;
  return (grad_out - o * o.dot(grad_out)) / (n * static_cast<double>(features.size()));
}

void require_finite(double value, const std::string& term, const PromptLevel* level) {
  if (std::isfinite(value)) return;
  std::string msg = "train_align: non-finite " + term;
  if (level) msg += " at level " + level->name();
  throw DomainError(msg);
}

LossBreakdown prepared_loss(const std::vector<PreparedShot>& shots, PromptSet& set, const PromptParameters& params,
                            const TextEncoder& enc, const TrainConfig& cfg, PromptParameters* grads) {
  if (shots.empty()) throw DomainError("train_align: no shots");
  const auto traces = prompts::encode_all_traced(set, params, enc);
  const auto feature = [&](std::size_t i) -> const FeatVec& { return traces[i].forward.output; };
  const bool want = grads != nullptr;
  std::vector<FeatVec> gfeat;
  if (want) gfeat.assign(set.templates.size(), FeatVec::Zero(enc.feature_dim()));
  const double inv_shots = 1.0 / static_cast<double>(shots.size());

  LossBreakdown total;
  for (const auto& shot : shots) {
    for (const auto& pl : shot.levels) {
      const auto& level = pl.level;
      const auto ahp = set.indices(level, Polarity::AbnormalHandcrafted);
      const auto alp = set.indices(level, Polarity::AbnormalLearnable);
      std::vector<std::size_t> lambda_idx = ahp;
      lambda_idx.insert(lambda_idx.end(), alp.begin(), alp.end());
      std::vector<FeatVec> lambda;
      std::vector<const FeatVec*> lambda_ptr;
      for (auto i : lambda_idx) {
        lambda.push_back(feature(i));
        lambda_ptr.push_back(&feature(i));
      }
      const auto& bank = set.bank(level);

      const ClipLoss clip = loss_clip(shot.tokens, pl.weights, bank.mean_normal, lambda, cfg.logit_scale);
      require_finite(clip.loss, "l_clip", &level);
      total.clip += clip.loss * inv_shots;

      const TripletLoss trip = loss_triplet(pl.anchor, bank.mean_normal, bank.mean_abnormal, cfg.epsilon);
      require_finite(trip.loss, "l_trip", &level);
      total.trip += trip.loss * inv_shots;

      FeatVec ahp_mean = FeatVec::Zero(enc.feature_dim());
      for (auto i : ahp) ahp_mean += feature(i);
      ahp_mean /= static_cast<double>(std::max<std::size_t>(ahp.size(), 1));
      std::vector<MeanLoss> means;
      if (!ahp.empty()) {
        for (auto i : alp) {
          means.push_back(loss_mean(ahp_mean, feature(i)));
          total.mean += means.back().loss * inv_shots / static_cast<double>(alp.size());
        }
      }
      require_finite(total.mean, "l_mean", &level);

      if (!want) continue;
      for (std::size_t k = 0; k < lambda_idx.size(); ++k) gfeat[lambda_idx[k]] += inv_shots * clip.grad_bank[k];
      if (trip.active) {
        const FeatVec g = normalized_mean_vjp(lambda_ptr, trip.grad_abnormal);
        for (auto i : lambda_idx) gfeat[i] += inv_shots * g;
      }
      for (std::size_t k = 0; k < means.size(); ++k) {
        gfeat[alp[k]] += (inv_shots / static_cast<double>(alp.size())) * means[k].grad_alp;
      }
    }
  }

  // The regularizer depends on prompts only, so it is the same for every shot.
  const auto image_alp = set.indices(PromptLevel::image(), Polarity::AbnormalLearnable);
  auto plain_mean = [&](const std::vector<std::size_t>& idx) {
    FeatVec m = FeatVec::Zero(enc.feature_dim());
    for (auto i : idx) m += feature(i);
    return FeatVec(m / static_cast<double>(idx.size()));
  };
  std::vector<std::vector<std::size_t>> comp_alp;
  std::vector<FeatVec> comp_means;
  for (int c = 0; c < set.component_count; ++c) {
    comp_alp.push_back(set.indices(PromptLevel::component_level(c), Polarity::AbnormalLearnable));
    comp_means.push_back(plain_mean(comp_alp.back()));
  }
  const RegLoss reg = loss_reg(plain_mean(image_alp), comp_means, set.background_feature(), cfg.lambda_reg);
  require_finite(reg.loss, "l_reg", nullptr);
  total.reg = reg.loss;

  if (want) {
    for (auto i : image_alp) gfeat[i] += reg.grad_image / static_cast<double>(image_alp.size());
    for (std::size_t c = 0; c < comp_alp.size(); ++c) {
      for (auto i : comp_alp[c]) gfeat[i] += reg.grad_components[c] / static_cast<double>(comp_alp[c].size());
    }
    for (std::size_t i = 0; i < set.templates.size(); ++i) {
      if (set.templates[i].slots().empty()) continue;
      prompts::backprop_prompt(set.templates[i], traces[i], params, enc, gfeat[i], *grads);
    }
  }
  require_finite(total.total(), "total", nullptr);
  return total;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(epsilon > 0.0)) throw DomainError("TrainConfig: epsilon must be > 0");
  if (!(gamma >= 1.0)) throw DomainError("TrainConfig: gamma must be >= 1");
  if (!(learning_rate > 0.0)) throw DomainError("TrainConfig: learning_rate must be > 0");
  if (!(lambda_reg >= 0.0)) throw DomainError("TrainConfig: lambda_reg must be >= 0");
  if (n_ab < 1) throw DomainError("TrainConfig: N_ab must be >= 1");
  if (epochs < 0) throw DomainError("TrainConfig: epochs must be >= 0");
}

bool TrainConfig::operator==(const TrainConfig& o) const {
  return epsilon == o.epsilon && lambda_reg == o.lambda_reg && gamma == o.gamma && n_ab == o.n_ab &&
         learning_rate == o.learning_rate && epochs == o.epochs && logit_scale.value() == o.logit_scale.value() &&
         seed == o.seed;
}

ClipLoss loss_clip(const FeatMat& tokens, const std::vector<double>& weights, const FeatVec& p_n,
                   const std::vector<FeatVec>& bank, LogitScale scale) {
  const Eigen::Index T = tokens.rows();
  const Eigen::Index d = tokens.cols();
  if (T == 0) throw DomainError("loss_clip: no tokens");
  if (bank.empty()) throw DomainError("loss_clip: empty abnormal bank");
  if (static_cast<Eigen::Index>(weights.size()) != T) throw DomainError("loss_clip: weight count != token count");
  const Eigen::Index K = static_cast<Eigen::Index>(bank.size()) + 1;

  Eigen::MatrixXd P(d, K);
  Eigen::VectorXd norms(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    const FeatVec& p = k == 0 ? p_n : bank[static_cast<std::size_t>(k - 1)];
    if (p.size() != d) throw DomainError("loss_clip: prompt dimension mismatch");
    norms[k] = p.norm();
    if (!(norms[k] > 0.0)) throw DomainError("loss_clip: zero-norm prompt");
    P.col(k) = p / norms[k];
  }
  const Eigen::MatrixXd Z = tokens.rowwise().normalized();
  const Eigen::MatrixXd C = Z * P;  // T x K cosines

  double wsum = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw DomainError("loss_clip: token weights must be positive");
    wsum += w;
  }
  const double s = scale.value();
  Eigen::MatrixXd A(T, K);  // dLoss/dC
  ClipLoss out;
  for (Eigen::Index i = 0; i < T; ++i) {
    const double wi = weights[static_cast<std::size_t>(i)] / wsum;  // = normalized weight / T
    const double mx = s * C.row(i).maxCoeff();
    double z = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) z += std::exp(s * C(i, k) - mx);
    out.loss += wi * (mx + std::log(z) - s * C(i, 0));
    for (Eigen::Index k = 0; k < K; ++k) {
      const double q = std::exp(s * C(i, k) - mx) / z;
      A(i, k) = wi * s * (q - (k == 0 ? 1.0 : 0.0));
    }
  }
  // d cos(z, p) / d p = (z_hat - cos * p_hat) / |p|
  const Eigen::MatrixXd ZA = Z.transpose() * A;  // d x K
  const Eigen::VectorXd AC = (A.array() * C.array()).colwise().sum().transpose();
  for (Eigen::Index k = 0; k < K; ++k) {
    FeatVec g = (ZA.col(k) - P.col(k) * AC[k]) / norms[k];
    if (k == 0) {
      out.grad_normal = std::move(g);
    } else {
      out.grad_bank.push_back(std::move(g));
    }
  }
  return out;
}

TripletLoss loss_triplet(const FeatVec& z, const FeatVec& p_n, const FeatVec& p_a, double epsilon) {
  if (z.size() != p_n.size() || z.size() != p_a.size()) throw DomainError("loss_triplet: dimension mismatch");
  const FeatVec dn = z - p_n;
  const FeatVec da = z - p_a;
  const double rn = dn.norm();
  const double ra = da.norm();
  TripletLoss out;
  out.grad_anchor = FeatVec::Zero(z.size());
  out.grad_normal = FeatVec::Zero(z.size());
  out.grad_abnormal = FeatVec::Zero(z.size());
  const double margin = rn - ra + epsilon;
  if (margin <= 0.0) return out;
  out.loss = margin;
  out.active = true;
  // Zero distances sit on a kink; the zero subgradient is used there.
  if (rn > 0.0) {
    out.grad_anchor += dn / rn;
    out.grad_normal -= dn / rn;
  }
  if (ra > 0.0) {
    out.grad_anchor -= da / ra;
    out.grad_abnormal += da / ra;
  }
  return out;
}

MeanLoss loss_mean(const FeatVec& ahp_mean, const FeatVec& alp) {
  if (ahp_mean.size() != alp.size()) throw DomainError("loss_mean: dimension mismatch");
  const double na = ahp_mean.norm();
  const double nl = alp.norm();
  if (!(na > 0.0) || !(nl > 0.0)) throw DomainError("loss_mean: zero-norm input");
  const FeatVec a = ahp_mean / na;
  const FeatVec l = alp / nl;
  const FeatVec r = a - l;
  MeanLoss out;
  out.loss = r.squaredNorm();
  const FeatVec g = 2.0 * r;
  out.grad_ahp = (g - a * a.dot(g)) / na;
  out.grad_alp = (-g + l * l.dot(g)) / nl;
  return out;
}

RegLoss loss_reg(const FeatVec& p_a_img, const std::vector<FeatVec>& component_alp_means, const FeatVec& p_b,
                 double lambda_reg) {
  if (component_alp_means.empty()) throw DomainError("loss_reg: no components");
  FeatVec r = p_a_img - p_b;
  for (const auto& c : component_alp_means) {
    if (c.size() != r.size()) throw DomainError("loss_reg: dimension mismatch");
    r -= c;
  }
  if (p_b.size() != p_a_img.size()) throw DomainError("loss_reg: dimension mismatch");
  RegLoss out;
  const double n = r.norm();
  out.loss = lambda_reg * n;
  out.grad_image = n > 0.0 ? FeatVec(lambda_reg * r / n) : FeatVec::Zero(r.size());
  out.grad_components.assign(component_alp_means.size(), -out.grad_image);
  return out;
}

std::vector<double> token_weights(const RegionMap& map, const PromptLevel& level, double gamma) {
  const auto n = map.labels.size();
  if (n == 0) throw DomainError("token_weights: empty map");
  std::vector<double> w(n, 1.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int l = map.labels[i];
    bool match = false;
    switch (level.kind) {
      case PromptLevel::Kind::Image: match = true; break;
      case PromptLevel::Kind::Foreground: match = l != 0; break;
      case PromptLevel::Kind::Background: match = l == 0; break;
      case PromptLevel::Kind::Component: match = l == level.component + 1; break;
    }
    if (match) w[i] = gamma;
    sum += w[i];
  }
  const double scale = static_cast<double>(n) / sum;
  for (double& x : w) x *= scale;
  return w;
}

FeatVec triplet_anchor(const TokenGrid& grid, const RegionMap& map, const PromptLevel& level) {
  if (level.kind == PromptLevel::Kind::Image) return grid.class_token;
  FeatVec sum = FeatVec::Zero(grid.dim());
  int count = 0;
  for (std::size_t i = 0; i < map.labels.size(); ++i) {
    const int l = map.labels[i];
    const bool in = level.kind == PromptLevel::Kind::Foreground   ? l != 0
                    : level.kind == PromptLevel::Kind::Background ? l == 0
                                                                  : l == level.component + 1;
    if (!in) continue;
    sum += grid.tokens.row(static_cast<Eigen::Index>(i)).transpose();
    ++count;
  }
  if (count == 0 || sum.norm() == 0.0) return grid.class_token;
  return l2_normalize(sum);
}

LossBreakdown alignment_loss(const std::vector<TrainingShot>& shots, PromptSet& set, const PromptParameters& params,
                             const TextEncoder& enc, const TrainConfig& cfg, PromptParameters* grads) {
  cfg.validate();
  std::vector<PreparedShot> prepared;
  prepared.reserve(shots.size());
  for (const auto& s : shots) prepared.push_back(prepare(s, set, cfg));
  return prepared_loss(prepared, set, params, enc, cfg, grads);
}

TrainResult train_align(const std::vector<TrainingShot>& shots, PromptSet& set, const PromptParameters& init,
                        const TextEncoder& enc, const TrainConfig& cfg) {
  cfg.validate();
  if (shots.empty()) throw DomainError("train_align: need at least one shot");
  std::vector<PreparedShot> prepared;
  prepared.reserve(shots.size());
  for (const auto& s : shots) prepared.push_back(prepare(s, set, cfg));

  TrainResult result;
  result.params = init;
  result.initial = prepared_loss(prepared, set, result.params, enc, cfg, nullptr);
  std::vector<std::size_t> order(prepared.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng = derive_rng(cfg.seed, "align/shuffle", {static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    for (auto idx : order) {
      PromptParameters grads = result.params.zeros_like();
      const std::vector<PreparedShot> one = {prepared[idx]};
      prepared_loss(one, set, result.params, enc, cfg, &grads);
      result.params.add_scaled(grads, -cfg.learning_rate);
      if (!result.params.all_finite()) {
        throw DomainError("train_align: parameters became non-finite at epoch " + std::to_string(epoch));
      }
    }
    result.trace.push_back(prepared_loss(prepared, set, result.params, enc, cfg, nullptr));
  }
  prompts::encode_all(set, result.params, enc);
  return result;
}

std::string trace_to_csv(const TrainResult& result) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,l_clip,l_trip,l_mean,l_reg,total\n";
  auto row = [&](std::size_t e, const LossBreakdown& b) {
    os << e << ',' << b.clip << ',' << b.trip << ',' << b.mean << ',' << b.reg << ',' << b.total() << '\n';
  };
  row(0, result.initial);
  for (std::size_t i = 0; i < result.trace.size(); ++i) row(i + 1, result.trace[i]);
  return os.str();
}

bool windowed_non_increasing(const TrainResult& result, int window) {
  std::vector<double> totals = {result.initial.total()};
  for (const auto& b : result.trace) totals.push_back(b.total());
  for (std::size_t i = 0; i + static_cast<std::size_t>(window) < totals.size(); ++i) {
    if (totals[i + static_cast<std::size_t>(window)] > totals[i]) return false;
  }
  return true;
}

double GradReport::max_rel_error(const std::string& term) const {
  double m = 0.0;
  for (const auto& e : entries) {
    if (term.empty() || e.term == term) m = std::max(m, e.rel_error);
  }
  return m;
}

bool GradReport::passed() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [&](const GradEntry& e) {
    return std::isfinite(e.rel_error) && e.rel_error < tolerance;
  });
}

std::string GradReport::to_json() const {
  using nlohmann::json;
  json terms = json::object();
  for (const auto& e : entries) {
    json& t = terms[e.term];
    if (t.is_null()) t = json{{"points", 0}, {"max_rel_error", 0.0}, {"worst_point", 0}};
    t["points"] = t["points"].get<int>() + 1;
    if (e.rel_error > t["max_rel_error"].get<double>()) {
      t["max_rel_error"] = e.rel_error;
      t["worst_point"] = e.point;
    }
  }
  json list = json::array();
  for (const auto& e : entries) {
    list.push_back(json{{"term", e.term},
                        {"point", e.point},
                        {"analytic_norm", e.analytic_norm},
                        {"numeric_norm", e.numeric_norm},
                        {"rel_error", e.rel_error}});
  }
  json j{{"tolerance", tolerance},
         {"step", kFiniteDifferenceStep},
         {"passed", passed()},
         {"max_rel_error", max_rel_error()},
         {"terms", terms},
         {"entries", list}};
  return j.dump(2) + "\n";
}

double gradient_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor) {
  if (analytic.size() != numeric.size()) throw DomainError("gradient_rel_error: size mismatch");
  double diff = 0.0;
  double na = 0.0;
  double nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

}  // namespace fgad::align
