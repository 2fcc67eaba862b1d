// SPDX-License-Identifier: Apache-2.0
#include "fgad/alignment.hpp"

#include "fgad/query_former.hpp"
#include "fgad/rng.hpp"

#include <cmath>

namespace fgad::align {
namespace {

using prompts::PromptLevel;

FeatVec random_vec(Rng& rng, int d) {
  std::normal_distribution<double> g(0.0, 1.0);
  FeatVec v(d);
  for (int i = 0; i < d; ++i) v[i] = g(rng);
  return v;
}

void pack(std::vector<double>& out, const FeatVec& v) { out.insert(out.end(), v.data(), v.data() + v.size()); }

FeatVec unpack(const std::vector<double>& x, std::size_t& offset, int d) {
  FeatVec v = Eigen::Map<const FeatVec>(x.data() + offset, d);
  offset += static_cast<std::size_t>(d);
  return v;
}

GradEntry entry(const std::string& term, int point, const std::vector<double>& a, const std::vector<double>& n) {
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  return {term, point, norm(a), norm(n), gradient_rel_error(a, n)};
}

mfsc::MFSCDocument tiny_document() {
  mfsc::MFSCDocument doc;
  doc.category = "gradcheck";
  doc.summary = "a red widget on a plate";
  doc.background = "a plain plate";
  doc.foreground.relation_text = "one widget in the middle";
  doc.foreground.component_counts["widget"] = 1;
  mfsc::ComponentCaption c;
  c.name = "widget";
  c.caption_text = "a red widget";
  c.attributes["color"] = {{"red"}, mfsc::Connector::Single};
  doc.components.push_back(c);
  doc.attribute_vocabulary["color"] = {"red", "blue"};
  return doc;
}

}  // namespace

GradReport grad_check_alignment(const GradCheckOptions& o) {
  GradReport report;
  const int d = o.feature_dim;
  Rng rng = derive_rng(o.seed, "gradcheck");
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (int p = 0; p < o.points; ++p) {
    FeatMat tokens(o.tokens, d);
    for (int i = 0; i < o.tokens; ++i) tokens.row(i) = random_vec(rng, d).transpose();
    std::vector<double> weights;
    for (int i = 0; i < o.tokens; ++i) weights.push_back(1.0 + 0.5 * unit(rng));
    std::vector<double> x;
    pack(x, random_vec(rng, d));
    for (int k = 0; k < o.bank; ++k) pack(x, random_vec(rng, d));
    auto unpack_all = [&](const std::vector<double>& v, FeatVec& pn, std::vector<FeatVec>& bank) {
      std::size_t off = 0;
      pn = unpack(v, off, d);
      bank.clear();
      for (int k = 0; k < o.bank; ++k) bank.push_back(unpack(v, off, d));
    };
    FeatVec pn;
    std::vector<FeatVec> bank;
    unpack_all(x, pn, bank);
    const ClipLoss c = loss_clip(tokens, weights, pn, bank, o.logit_scale);
    std::vector<double> a;
    pack(a, c.grad_normal);
    for (const auto& g : c.grad_bank) pack(a, g);
    const auto n = numeric_gradient(
        [&](const std::vector<double>& v) {
          FeatVec qn;
          std::vector<FeatVec> qb;
          unpack_all(v, qn, qb);
          return loss_clip(tokens, weights, qn, qb, o.logit_scale).loss;
        },
        x);
    report.entries.push_back(entry("l_clip", p, a, n));
  }

  for (int p = 0; p < o.points; ++p) {
    std::vector<double> x;
    double eps = 0.0;
    // Resample until the point sits clearly away from the hinge.
    for (;;) {
      x.clear();
      for (int k = 0; k < 3; ++k) pack(x, random_vec(rng, d));
      eps = 2.0 * unit(rng);
      std::size_t off = 0;
      const FeatVec z = unpack(x, off, d);
      const FeatVec pn = unpack(x, off, d);
      const FeatVec pa = unpack(x, off, d);
      if (std::abs((z - pn).norm() - (z - pa).norm() + eps) > 1e-3) break;
    }
    auto f = [&](const std::vector<double>& v) {
      std::size_t off = 0;
      const FeatVec z = unpack(v, off, d);
      const FeatVec pn = unpack(v, off, d);
      const FeatVec pa = unpack(v, off, d);
      return loss_triplet(z, pn, pa, eps);
    };
    const TripletLoss t = f(x);
    std::vector<double> a;
    pack(a, t.grad_anchor);
    pack(a, t.grad_normal);
    pack(a, t.grad_abnormal);
    report.entries.push_back(entry("l_trip", p, a, numeric_gradient([&](const std::vector<double>& v) {
                                                   return f(v).loss;
                                                 }, x)));
  }

  for (int p = 0; p < o.points; ++p) {
    std::vector<double> x;
    pack(x, random_vec(rng, d));
    pack(x, random_vec(rng, d));
    auto f = [&](const std::vector<double>& v) {
      std::size_t off = 0;
      const FeatVec h = unpack(v, off, d);
      const FeatVec l = unpack(v, off, d);
      return loss_mean(h, l);
    };
    const MeanLoss m = f(x);
    std::vector<double> a;
    pack(a, m.grad_ahp);
    pack(a, m.grad_alp);
    report.entries.push_back(entry("l_mean", p, a, numeric_gradient([&](const std::vector<double>& v) {
                                                   return f(v).loss;
                                                 }, x)));
  }

  for (int p = 0; p < o.points; ++p) {
    const int nc = 1 + p % 3;
    std::vector<double> x;
    for (int k = 0; k < nc + 1; ++k) pack(x, random_vec(rng, d));
    const FeatVec pb = random_vec(rng, d);
    const double lambda = 0.5 + unit(rng);
    auto f = [&](const std::vector<double>& v) {
      std::size_t off = 0;
      const FeatVec img = unpack(v, off, d);
      std::vector<FeatVec> comps;
      for (int k = 0; k < nc; ++k) comps.push_back(unpack(v, off, d));
      return loss_reg(img, comps, pb, lambda);
    };
    const RegLoss r = f(x);
    std::vector<double> a;
    pack(a, r.grad_image);
    for (const auto& g : r.grad_components) pack(a, g);
    report.entries.push_back(entry("l_reg", p, a, numeric_gradient([&](const std::vector<double>& v) {
                                                  return f(v).loss;
                                                 }, x)));
  }

  EncoderSpec spec;
  spec.seed = o.seed;
  spec.feature_dim = d;
  spec.token_embedding_dim = o.embedding_dim;
  const TextEncoder enc(spec);
  const auto doc = tiny_document();

  for (int p = 0; p < o.points; ++p) {
    prompts::PromptTemplate t;
    t.level = PromptLevel::component_level(0);
    t.polarity = prompts::Polarity::AbnormalLearnable;
    t.tokens = {prompts::FixedWord{"a"}, prompts::Placeholder{0}, prompts::FixedWord{"widget"},
                prompts::Placeholder{1}};
    prompts::PromptParameters params;
    for (int s = 0; s < 2; ++s) {
      params.embeddings[s] = random_vec(rng, o.embedding_dim);
      params.raw_gates[s] = 2.0 * unit(rng) - 1.0;
    }
    const FeatVec g = random_vec(rng, d);
    const auto traced = prompts::encode_prompt_traced(t, params, enc);
    auto grads = params.zeros_like();
    prompts::backprop_prompt(t, traced, params, enc, g, grads);
    const auto n = numeric_gradient(
        [&](const std::vector<double>& v) {
          auto q = params;
          q.assign(v);
          return g.dot(prompts::encode_prompt(t, q, enc));
        },
        params.flatten());
    report.entries.push_back(entry("text_chain", p, grads.flatten(), n));
  }

  // Whole objective on a tiny prompt set; fewer points since every point
  // differentiates through all templates.
  const int total_points = std::max(1, o.points / 10);
  for (int p = 0; p < total_points; ++p) {
    auto set = prompts::build_prompt_set(doc, {"broken", "with defect"}, 2, o.seed + static_cast<std::uint64_t>(p));
    auto params = prompts::PromptParameters::initialize(set, o.embedding_dim, o.seed + static_cast<std::uint64_t>(p));
    for (auto& [slot, e] : params.embeddings) e = 0.5 * random_vec(rng, o.embedding_dim);
    for (auto& [slot, g] : params.raw_gates) g = 2.0 * unit(rng) - 1.0;
    std::vector<TrainingShot> shots(2);
    for (auto& s : shots) {
      s.grid.height = 2;
      s.grid.width = 3;
      s.grid.tokens.resize(6, d);
      for (int i = 0; i < 6; ++i) s.grid.tokens.row(i) = l2_normalize(random_vec(rng, d)).transpose();
      s.grid.class_token = l2_normalize(s.grid.tokens.colwise().mean().transpose());
      s.map = {2, 3, 1, {0, 1, 1, 0, 1, 0}, Resolution::Native};
    }
    TrainConfig cfg;
    cfg.logit_scale = o.logit_scale;
    cfg.n_ab = 2;
    auto grads = params.zeros_like();
    alignment_loss(shots, set, params, enc, cfg, &grads);
    const auto n = numeric_gradient(
        [&](const std::vector<double>& v) {
          auto q = params;
          q.assign(v);
          return alignment_loss(shots, set, q, enc, cfg).total();
        },
        params.flatten());
    report.entries.push_back(entry("alignment_total", p, grads.flatten(), n));
  }
  return report;
}

GradReport grad_check_queryformer(const GradCheckOptions& o) {
  GradReport report;
  const int d = o.feature_dim;
  for (int p = 0; p < o.points; ++p) {
    Rng rng = derive_rng(o.seed, "gradcheck/qf", {static_cast<std::uint64_t>(p)});
    const int families = 3;
    qf::Params params = qf::Params::initialize(d, families, rng());
    // Larger queries than the training init so the attention is far from uniform.
    for (Eigen::Index r = 0; r < params.queries.rows(); ++r) params.queries.row(r) = random_vec(rng, d).transpose();
    params.bias = 0.1 * random_vec(rng, d);
    qf::FamilyBank bank;
    const int nn = 1 + p % 3;
    const int na = 1 + (p / 3) % 4;
    for (int i = 0; i < nn; ++i) bank.normal.push_back(l2_normalize(random_vec(rng, d)));
    for (int i = 0; i < na; ++i) bank.abnormal.push_back(l2_normalize(random_vec(rng, d)));
    bank.mean_normal = l2_normalize(random_vec(rng, d));
    bank.mean_abnormal = l2_normalize(random_vec(rng, d));
    const int family = p % families;

    qf::Params grads = params.zeros_like();
    qf::family_loss(params, family, bank, &grads);
    const auto numeric = numeric_gradient(
        [&](const std::vector<double>& x) {
          qf::Params q = params;
          q.assign(x);
          return qf::family_loss(q, family, bank);
        },
        params.flatten());
    report.entries.push_back(entry("qf_family", p, grads.flatten(), numeric));
  }
  return report;
}

GradReport grad_check_all(const GradCheckOptions& options) {
  GradReport all = grad_check_alignment(options);
  const GradReport q = grad_check_queryformer(options);
  all.entries.insert(all.entries.end(), q.entries.begin(), q.entries.end());
  return all;
}

}  // namespace fgad::align
