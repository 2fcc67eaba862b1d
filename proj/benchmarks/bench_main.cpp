// SPDX-License-Identifier: Apache-2.0
#include "fgad/alignment.hpp"
#include "fgad/feature_file.hpp"
#include "fgad/pipeline.hpp"
#include "fgad/query_former.hpp"
#include "fgad/region_aggregation.hpp"
#include "fgad/rng.hpp"
#include "fgad/scoring.hpp"
#include "fgad/synthetic.hpp"

#include <benchmark/benchmark.h>

#include <filesystem>
#include <random>

namespace {

using namespace fgad;

TokenGrid random_grid(Rng& rng, int h, int w, int d) {
  std::normal_distribution<double> n(0.0, 1.0);
  TokenGrid g;
  g.height = h;
  g.width = w;
  g.tokens.resize(h * w, d);
  for (Eigen::Index i = 0; i < g.tokens.size(); ++i) g.tokens.data()[i] = n(rng);
  g.tokens.rowwise().normalize();
  g.class_token = g.tokens.row(0).transpose();
  return g;
}

struct Prepared {
  synthetic::CategoryFixture fx;
  EncoderSpec spec;
  prompts::PromptSet set;
  std::vector<align::TrainingShot> shots;
};

const Prepared& capsule() {
  static const Prepared p = [] {
    const std::filesystem::path dir = FGAD_FIXTURE_DIR;
    Prepared out;
    out.fx = synthetic::load_fixture(dir / "categories" / "capsule_fixture.json");
    out.spec.seed = 7;
    out.spec.noise_sigma = 0.1;
    const auto doc = mfsc::parse_document(read_file_bytes(dir / "mfsc" / (out.fx.mfsc_fixture + ".json")));
    out.set = prompts::build_prompt_set(doc, prompts::kDefaultAnomalyWords, 4, 7);
    const TextEncoder text(out.spec);
    prompts::encode_all(out.set, prompts::PromptParameters::initialize(out.set, text.embedding_dim(), 7), text);
    for (const auto& scene : synthetic::make_shots(out.fx, out.spec, 2, 7)) {
      const TokenGrid g = encode_scene(scene, out.spec);
      RegionMap hr;
      out.shots.push_back({g, pipeline::aggregate_regions(g, out.set, 1, &hr)});
    }
    return out;
  }();
  return p;
}

void BM_ScoreVad(benchmark::State& state) {
  Rng rng = derive_rng(1, "bench/vad");
  const int shots = static_cast<int>(state.range(0));
  std::vector<TokenGrid> grids;
  for (int s = 0; s < shots; ++s) grids.push_back(random_grid(rng, 15, 15, 512));
  const auto mem = scoring::build_memory(grids);
  const TokenGrid q = random_grid(rng, 15, 15, 512);
  for (auto _ : state) benchmark::DoNotOptimize(scoring::score_vad(q, mem));
  state.SetItemsProcessed(state.iterations() * q.token_count());
}
BENCHMARK(BM_ScoreVad)->Arg(1)->Arg(4)->Arg(8);

void BM_ClusterTwoStageHighres(benchmark::State& state) {
  const auto& p = capsule();
  const ImageEncoder image(p.spec);
  const auto scene = synthetic::make_shots(p.fx, p.spec, 1, 3).front();
  const TokenGrid hr = image.encode_scene_highres(scene, 4);
  std::vector<FeatVec> comps;
  for (int c = 0; c < p.set.component_count; ++c) {
    comps.push_back(p.set.bank(prompts::PromptLevel::component_level(c)).mean_normal);
  }
  const FeatVec& fg = p.set.bank(prompts::PromptLevel::foreground()).mean_normal;
  for (auto _ : state) benchmark::DoNotOptimize(cluster_two_stage(hr, fg, p.set.background_feature(), comps));
}
BENCHMARK(BM_ClusterTwoStageHighres)->Unit(benchmark::kMillisecond);

void BM_AlignmentLossAndGradient(benchmark::State& state) {
  const auto& p = capsule();
  auto set = p.set;
  const TextEncoder text(p.spec);
  const auto params = prompts::PromptParameters::initialize(set, text.embedding_dim(), 7);
  align::TrainConfig cfg;
  for (auto _ : state) {
    auto grads = params.zeros_like();
    benchmark::DoNotOptimize(align::alignment_loss(p.shots, set, params, text, cfg, &grads));
  }
}
BENCHMARK(BM_AlignmentLossAndGradient)->Unit(benchmark::kMillisecond);

void BM_QueryFormerForward(benchmark::State& state) {
  const auto& p = capsule();
  const auto banks = qf::family_banks(p.set);
  const auto params = qf::Params::initialize(static_cast<int>(banks.front().mean_normal.size()), static_cast<int>(banks.size()), 7);
  for (auto _ : state) benchmark::DoNotOptimize(qf::qf_forward(params, banks));
}
BENCHMARK(BM_QueryFormerForward);

}  // namespace

BENCHMARK_MAIN();
