// SPDX-License-Identifier: Apache-2.0
#include "fgad/alignment.hpp"
#include "fgad/feature_file.hpp"
#include "fgad/pipeline.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>

namespace fgad::align {
namespace {

using prompts::PromptLevel;
using testing::gaussian_vec;

// Direct formula, no log-sum-exp tricks beyond what the magnitudes need.
double clip_oracle(const FeatMat& tokens, const std::vector<double>& weights, const FeatVec& p_n,
                   const std::vector<FeatVec>& bank, double s) {
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
    const FeatVec z = tokens.row(i).transpose();
    auto cosv = [&](const FeatVec& p) { return z.dot(p) / (z.norm() * p.norm()); };
    const double pos = std::exp(s * cosv(p_n));
    double denom = pos;
    for (const auto& p : bank) denom += std::exp(s * cosv(p));
    loss += weights[static_cast<std::size_t>(i)] / wsum * -std::log(pos / denom);
  }
  return loss;
}

std::vector<double> fd(const std::function<double(const FeatVec&)>& f, FeatVec x, double h = 1e-5) {
  std::vector<double> g(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double o = x[i];
    x[i] = o + h;
    const double up = f(x);
    x[i] = o - h;
    const double down = f(x);
    x[i] = o;
    g[static_cast<std::size_t>(i)] = (up - down) / (2 * h);
  }
  return g;
}

std::vector<double> as_vec(const FeatVec& v) { return {v.data(), v.data() + v.size()}; }

TEST(TrainConfig, Defaults) {
  const TrainConfig c;
  EXPECT_EQ(c.epsilon, 1.0);
  EXPECT_EQ(c.lambda_reg, 1.0);
  EXPECT_EQ(c.gamma, 1.5);
  EXPECT_EQ(c.n_ab, 4);
  EXPECT_EQ(c.learning_rate, 2e-3);
  EXPECT_EQ(c.logit_scale.value(), 100.0);
  TrainConfig bad = c;
  bad.epsilon = 0.0;
  EXPECT_THROW(bad.validate(), DomainError);
  bad = c;
  bad.gamma = 0.5;
  EXPECT_THROW(bad.validate(), DomainError);
  bad = c;
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), DomainError);
}

TEST(LossClip, SaturatedCorrectCaseVanishes) {
  FeatMat z(1, 3);
  z << 1, 0, 0;
  const auto r = loss_clip(z, {1.0}, FeatVec::Unit(3, 0), {FeatVec::Unit(3, 1), FeatVec::Unit(3, 2)}, LogitScale(1e3));
  EXPECT_LT(r.loss, 1e-300 + 1e-12);
}

TEST(LossClip, SymmetricTwoClassIsLn2) {
  FeatMat z(1, 2);
  z << 1, 1;
  const auto r = loss_clip(z, {1.0}, FeatVec::Unit(2, 0), {FeatVec::Unit(2, 1)}, LogitScale(100.0));
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-12);
}

TEST(LossClip, MatchesOracleAndFiniteDifferences) {
  Rng rng = derive_rng(1, "clip");
  for (int trial = 0; trial < 30; ++trial) {
    const int T = testing::uniform_int(rng, 1, 6), d = 10, K = testing::uniform_int(rng, 1, 4);
    FeatMat tokens(T, d);
    for (int i = 0; i < T; ++i) tokens.row(i) = gaussian_vec(rng, d).transpose();
    std::vector<double> w(static_cast<std::size_t>(T));
    for (auto& x : w) x = testing::uniform(rng, 0.5, 2.0);
    const FeatVec pn = gaussian_vec(rng, d);
    std::vector<FeatVec> bank;
    for (int k = 0; k < K; ++k) bank.push_back(gaussian_vec(rng, d));
    const double s = testing::uniform(rng, 1.0, 20.0);
    const auto r = loss_clip(tokens, w, pn, bank, LogitScale(s));
    EXPECT_NEAR(r.loss, clip_oracle(tokens, w, pn, bank, s), 1e-12 * std::max(1.0, r.loss));
    const auto gn = fd([&](const FeatVec& x) { return clip_oracle(tokens, w, x, bank, s); }, pn);
    EXPECT_LT(gradient_rel_error(as_vec(r.grad_normal), gn), 1e-5);
    for (int k = 0; k < K; ++k) {
      auto g = fd([&](const FeatVec& x) {
        auto b = bank;
        b[static_cast<std::size_t>(k)] = x;
        return clip_oracle(tokens, w, pn, b, s);
      }, bank[static_cast<std::size_t>(k)]);
      EXPECT_LT(gradient_rel_error(as_vec(r.grad_bank[static_cast<std::size_t>(k)]), g), 1e-5);
    }
  }
}

TEST(LossClip, WeightsAreRescaledAndValidated) {
  Rng rng = derive_rng(2, "clip-w");
  FeatMat tokens(3, 4);
  for (int i = 0; i < 3; ++i) tokens.row(i) = gaussian_vec(rng, 4).transpose();
  const FeatVec pn = gaussian_vec(rng, 4);
  const std::vector<FeatVec> bank = {gaussian_vec(rng, 4)};
  const auto a = loss_clip(tokens, {1, 2, 3}, pn, bank, LogitScale(5));
  const auto b = loss_clip(tokens, {10, 20, 30}, pn, bank, LogitScale(5));
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  EXPECT_THROW(loss_clip(tokens, {1, 0, 1}, pn, bank, LogitScale(5)), DomainError);
  EXPECT_THROW(loss_clip(tokens, {1, 1}, pn, bank, LogitScale(5)), DomainError);
  EXPECT_THROW(loss_clip(tokens, {1, 1, 1}, pn, {}, LogitScale(5)), DomainError);
}

TEST(LossTriplet, Examples) {
  const FeatVec z = FeatVec::Zero(3);
  FeatVec far = FeatVec::Zero(3);
  far[0] = 2.0;
  const auto sat = loss_triplet(z, z, far, 1.0);
  EXPECT_EQ(sat.loss, 0.0);
  EXPECT_FALSE(sat.active);
  EXPECT_EQ(sat.grad_anchor.norm(), 0.0);
  EXPECT_EQ(sat.grad_normal.norm(), 0.0);
  FeatVec a = FeatVec::Unit(3, 1), b = -FeatVec::Unit(3, 1);
  const auto tie = loss_triplet(z, a, b, 1.0);
  EXPECT_NEAR(tie.loss, 1.0, 1e-15);
  EXPECT_TRUE(tie.active);
}

TEST(LossTriplet, TranslationInvariantAndGradientCorrect) {
  Rng rng = derive_rng(3, "trip");
  for (int trial = 0; trial < 50; ++trial) {
    const FeatVec z = gaussian_vec(rng, 8), pn = gaussian_vec(rng, 8), pa = gaussian_vec(rng, 8), t = gaussian_vec(rng, 8, 5.0);
    const double eps = testing::uniform(rng, 0.1, 3.0);
    const auto r = loss_triplet(z, pn, pa, eps);
    EXPECT_NEAR(loss_triplet(FeatVec(z + t), FeatVec(pn + t), FeatVec(pa + t), eps).loss, r.loss, 1e-12);
    const double oracle = std::max((z - pn).norm() - (z - pa).norm() + eps, 0.0);
    EXPECT_NEAR(r.loss, oracle, 1e-12);
    if (std::abs((z - pn).norm() - (z - pa).norm() + eps) < 1e-3) continue;  // hinge
    auto f = [&](const FeatVec& zz, const FeatVec& n, const FeatVec& a) {
      return std::max((zz - n).norm() - (zz - a).norm() + eps, 0.0);
    };
    EXPECT_LT(gradient_rel_error(as_vec(r.grad_anchor), fd([&](const FeatVec& x) { return f(x, pn, pa); }, z)), 1e-6);
    EXPECT_LT(gradient_rel_error(as_vec(r.grad_normal), fd([&](const FeatVec& x) { return f(z, x, pa); }, pn)), 1e-6);
    EXPECT_LT(gradient_rel_error(as_vec(r.grad_abnormal), fd([&](const FeatVec& x) { return f(z, pn, x); }, pa)), 1e-6);
  }
}

TEST(LossMean, Examples) {
  Rng rng = derive_rng(4, "mean");
  const FeatVec v = gaussian_vec(rng, 6);
  EXPECT_NEAR(loss_mean(v, FeatVec(3.7 * v)).loss, 0.0, 1e-15);
  const FeatVec u = v.normalized();
  EXPECT_NEAR(loss_mean(u, FeatVec(-u)).loss, 4.0, 1e-12);
  EXPECT_THROW(loss_mean(FeatVec::Zero(6), v), DomainError);
  EXPECT_THROW(loss_mean(v, FeatVec::Zero(6)), DomainError);
}

TEST(LossMean, GradientCorrect) {
  Rng rng = derive_rng(5, "mean-grad");
  auto f = [](const FeatVec& a, const FeatVec& b) { return (a / a.norm() - b / b.norm()).squaredNorm(); };
  for (int trial = 0; trial < 50; ++trial) {
    const FeatVec a = gaussian_vec(rng, 8), b = gaussian_vec(rng, 8);
    const auto r = loss_mean(a, b);
    EXPECT_NEAR(r.loss, f(a, b), 1e-12);
    EXPECT_LT(gradient_rel_error(as_vec(r.grad_ahp), fd([&](const FeatVec& x) { return f(x, b); }, a)), 1e-6);
    EXPECT_LT(gradient_rel_error(as_vec(r.grad_alp), fd([&](const FeatVec& x) { return f(a, x); }, b)), 1e-6);
  }
}

TEST(LossReg, ExamplesAndGradient) {
  Rng rng = derive_rng(6, "reg");
  const std::vector<FeatVec> comps = {gaussian_vec(rng, 5), gaussian_vec(rng, 5)};
  const FeatVec pb = gaussian_vec(rng, 5);
  const FeatVec exact = comps[0] + comps[1] + pb;
  EXPECT_NEAR(loss_reg(exact, comps, pb, 1.0).loss, 0.0, 1e-15);
  EXPECT_EQ(loss_reg(gaussian_vec(rng, 5), comps, pb, 0.0).loss, 0.0);
  EXPECT_THROW(loss_reg(exact, {}, pb, 1.0), DomainError);
  for (int trial = 0; trial < 50; ++trial) {
    const FeatVec img = gaussian_vec(rng, 5);
    const double lam = testing::uniform(rng, 0.1, 3.0);
    auto f = [&](const FeatVec& i, const std::vector<FeatVec>& c) {
      FeatVec r = i - pb;
      for (const auto& x : c) r -= x;
      return lam * r.norm();
    };
    const auto r = loss_reg(img, comps, pb, lam);
    EXPECT_NEAR(r.loss, f(img, comps), 1e-12);
    EXPECT_LT(gradient_rel_error(as_vec(r.grad_image), fd([&](const FeatVec& x) { return f(x, comps); }, img)), 1e-6);
    for (std::size_t k = 0; k < comps.size(); ++k) {
      const auto g = fd([&](const FeatVec& x) {
        auto c = comps;
        c[k] = x;
        return f(img, c);
      }, comps[k]);
      EXPECT_LT(gradient_rel_error(as_vec(r.grad_components[k]), g), 1e-6);
    }
  }
}

TEST(TokenWeights, GammaOneIsAllOnesAndMeanIsOne) {
  Rng rng = derive_rng(7, "weights");
  for (int trial = 0; trial < 30; ++trial) {
    RegionMap m{3, 4, 2, {}, Resolution::Native};
    for (int i = 0; i < 12; ++i) m.labels.push_back(testing::uniform_int(rng, 0, 2));
    for (const auto level : {PromptLevel::image(), PromptLevel::foreground(), PromptLevel::background(),
                             PromptLevel::component_level(0), PromptLevel::component_level(1)}) {
      for (double w : token_weights(m, level, 1.0)) EXPECT_NEAR(w, 1.0, 1e-15);
      const auto w = token_weights(m, level, 1.5);
      double sum = 0.0;
      for (double x : w) sum += x;
      EXPECT_NEAR(sum / 12.0, 1.0, 1e-12);
      for (int i = 0; i < 12; ++i) {
        const int l = m.labels[static_cast<std::size_t>(i)];
        const bool match = level.kind == PromptLevel::Kind::Image ||
                           (level.kind == PromptLevel::Kind::Foreground && l != 0) ||
                           (level.kind == PromptLevel::Kind::Background && l == 0) ||
                           (level.is_component() && l == level.component + 1);
        // ratio to any non-matching token is gamma
        for (int j = 0; j < 12; ++j) {
          const int lj = m.labels[static_cast<std::size_t>(j)];
          const bool mj = level.kind == PromptLevel::Kind::Image ||
                          (level.kind == PromptLevel::Kind::Foreground && lj != 0) ||
                          (level.kind == PromptLevel::Kind::Background && lj == 0) ||
                          (level.is_component() && lj == level.component + 1);
          if (match && !mj) {
            EXPECT_NEAR(w[static_cast<std::size_t>(i)] / w[static_cast<std::size_t>(j)], 1.5, 1e-12);
          }
        }
      }
    }
  }
}

TEST(TripletAnchor, ClassTokenOrRegionMean) {
  Rng rng = derive_rng(8, "anchor");
  const TokenGrid g = testing::random_grid(rng, 2, 2, 6);
  const RegionMap m{2, 2, 2, {0, 1, 1, 2}, Resolution::Native};
  EXPECT_EQ(triplet_anchor(g, m, PromptLevel::image()), g.class_token);
  const FeatVec expect = (g.token(1) + g.token(2)).normalized();
  EXPECT_LE((triplet_anchor(g, m, PromptLevel::component_level(0)) - expect).norm(), 1e-12);
  const FeatVec fg = (g.token(1) + g.token(2) + g.token(3)).normalized();
  EXPECT_LE((triplet_anchor(g, m, PromptLevel::foreground()) - fg).norm(), 1e-12);
  const RegionMap empty{2, 2, 3, {0, 1, 1, 2}, Resolution::Native};
  EXPECT_EQ(triplet_anchor(g, empty, PromptLevel::component_level(2)), g.class_token);
}

TEST(GradCheck, AllTermsPassAtReducedPointCount) {
  GradCheckOptions opt;
  opt.points = 8;
  opt.seed = 3;
  const auto report = grad_check_all(opt);
  EXPECT_TRUE(report.passed()) << report.to_json();
  for (const char* term : {"l_clip", "l_trip", "l_mean", "l_reg", "text_chain", "alignment_total", "qf_family"}) {
    int n = 0;
    for (const auto& e : report.entries) n += e.term == term;
    // the whole-objective check runs at a tenth of the points
    EXPECT_EQ(n, std::string(term) == "alignment_total" ? 1 : 8) << term;
    EXPECT_LT(report.max_rel_error(term), 1e-4) << term;
  }
  const auto j = nlohmann::json::parse(report.to_json());
  EXPECT_TRUE(j.contains("entries"));
}

TEST(GradCheck, RelErrorConvention) {
  EXPECT_EQ(gradient_rel_error({1.0, 2.0}, {1.0, 2.0}), 0.0);
  EXPECT_NEAR(gradient_rel_error({1.0}, {1.1}), 0.1 / 1.1, 1e-12);
  EXPECT_EQ(gradient_rel_error({0.0}, {0.0}), 0.0);
}

// Small real training problem: the pcb fixture at zero noise.
struct Problem {
  std::vector<TrainingShot> shots;
  prompts::PromptSet set;
  prompts::PromptParameters init;
  EncoderSpec spec;
};

Problem pcb_problem(int n_shots) {
  Problem p;
  p.spec.seed = 7;
  const auto fx = synthetic::load_fixture(testing::fixture_dir() / "categories" / "pcb_fixture.json");
  const auto doc = mfsc::parse_document(read_file_bytes(testing::fixture_dir() / "mfsc" / "pcb_fixture.json"));
  p.set = prompts::build_prompt_set(doc, prompts::kDefaultAnomalyWords, 4, 7);
  const TextEncoder text(p.spec);
  p.init = prompts::PromptParameters::initialize(p.set, text.embedding_dim(), 7);
  prompts::encode_all(p.set, p.init, text);
  for (const auto& scene : synthetic::make_shots(fx, p.spec, n_shots, 1)) {
    p.shots.push_back({encode_scene(scene, p.spec), {15, 15, 3, scene.layout(), Resolution::Native}});
  }
  return p;
}

TEST(TrainAlign, ZeroEpochsLeavesParametersUnchanged) {
  auto p = pcb_problem(1);
  TrainConfig cfg;
  cfg.epochs = 0;
  const TextEncoder text(p.spec);
  const auto r = train_align(p.shots, p.set, p.init, text, cfg);
  EXPECT_EQ(r.params, p.init);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_EQ(trace_to_csv(r).substr(0, trace_to_csv(r).find('\n')), "epoch,l_clip,l_trip,l_mean,l_reg,total");
}

TEST(TrainAlign, DeterministicAndDecreasing) {
  auto p = pcb_problem(2);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.seed = 4;
  const TextEncoder text(p.spec);
  auto set_a = p.set, set_b = p.set;
  const auto a = train_align(p.shots, set_a, p.init, text, cfg);
  const auto b = train_align(p.shots, set_b, p.init, text, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.trace, b.trace);
  ASSERT_EQ(a.trace.size(), 15u);
  EXPECT_LE(a.trace.back().total(), a.initial.total());
  EXPECT_LT(a.trace.back().clip, a.initial.clip);
  // the initial loss equals a fresh evaluation at the initial parameters
  auto set_c = p.set;
  EXPECT_EQ(alignment_loss(p.shots, set_c, p.init, text, cfg), a.initial);
  // the set is left encoded with the final parameters
  auto set_d = p.set;
  prompts::encode_all(set_d, a.params, text);
  EXPECT_EQ(set_d.banks.at(PromptLevel::image()).learnable, set_a.banks.at(PromptLevel::image()).learnable);
  // csv has one line per epoch plus header and initial row
  const auto csv = trace_to_csv(a);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 17);
}

TEST(TrainAlign, FullGradientMatchesFiniteDifferencesOnFixture) {
  auto p = pcb_problem(1);
  TrainConfig cfg;
  const TextEncoder text(p.spec);
  auto grads = p.init.zeros_like();
  alignment_loss(p.shots, p.set, p.init, text, cfg, &grads);
  const auto x = p.init.flatten();
  const auto analytic = grads.flatten();
  Rng rng = derive_rng(5, "align-fd");
  for (int k = 0; k < 12; ++k) {
    const auto i = static_cast<std::size_t>(testing::uniform_int(rng, 0, static_cast<int>(x.size()) - 1));
    auto eval = [&](double delta) {
      auto y = x;
      y[i] += delta;
      auto q = p.init;
      q.assign(y);
      auto s = p.set;
      return alignment_loss(p.shots, s, q, text, cfg).total();
    };
    const double num = (eval(1e-5) - eval(-1e-5)) / 2e-5;
    EXPECT_NEAR(analytic[i], num, 1e-6 + 1e-4 * std::abs(num)) << p.init.coordinate_name(i);
  }
}

TEST(Windowed, DetectsIncreaseAcrossWindow) {
  TrainResult r;
  r.initial.clip = 10.0;
  for (int e = 0; e < 40; ++e) {
    LossBreakdown b;
    b.clip = 10.0 - 0.1 * e + (e % 2 ? 0.05 : 0.0);
    r.trace.push_back(b);
  }
  EXPECT_TRUE(windowed_non_increasing(r, 20));
  r.trace[30].clip = 20.0;
  EXPECT_FALSE(windowed_non_increasing(r, 20));
}

}  // namespace
}  // namespace fgad::align
