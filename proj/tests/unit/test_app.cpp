// SPDX-License-Identifier: Apache-2.0
#include "fgad/bundle.hpp"
#include "fgad/feature_file.hpp"
#include "fgad/score_map_io.hpp"
#include "fgad_app/commands.hpp"
#include "fgad_app/run_config.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sstream>

namespace fgad::app {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "fgad");
  std::ostringstream out, err;
  Outcome r;
  r.code = run_command(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Flags for a quick run on the capsule fixture.
std::vector<std::string> quick(const testing::TempDir& dir, std::vector<std::string> cmd) {
  std::vector<std::string> a = {"--seed", "7", "--fixture", "capsule_fixture", "--fixtures-dir",
                                testing::fixture_dir().string(), "--cache-dir", (dir.path() / "cache").string(),
                                "--bundle-root", (dir.path() / "bundles").string(), "--noise-sigma", "0.2",
                                "--epochs", "2", "--qf-epochs", "5", "--shots", "1", "--suite-normal", "4",
                                "--suite-anomalous", "4", "--null-normal", "4", "--null-anomalous", "4"};
  a.insert(a.end(), cmd.begin(), cmd.end());
  return a;
}

TEST(RunConfigDefaults, MatchTheTrainingSettings) {
  const RunConfig c;
  const auto& a = c.pipeline.align;
  EXPECT_DOUBLE_EQ(a.epsilon, 1.0);
  EXPECT_DOUBLE_EQ(a.lambda_reg, 1.0);
  EXPECT_EQ(a.n_ab, 4);
  EXPECT_DOUBLE_EQ(a.gamma, 1.5);
  EXPECT_DOUBLE_EQ(a.learning_rate, 2e-3);
  EXPECT_EQ(c.grid_height, 15);
  EXPECT_EQ(c.grid_width, 15);
  EXPECT_EQ(c.pipeline.highres_factor, 4);
  EXPECT_DOUBLE_EQ(a.logit_scale.value(), 100.0);
  EXPECT_EQ(c.mode, Mode::Synthetic);
  EXPECT_EQ(c.pooling, eval::PixelPooling::Pooled);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfigJson, RoundTripsEveryField) {
  RunConfig c;
  c.set_seed(42);
  c.pipeline.align.epsilon = 0.5;
  c.pipeline.align.lambda_reg = 2.0;
  c.pipeline.align.gamma = 1.25;
  c.pipeline.align.n_ab = 3;
  c.pipeline.align.learning_rate = 1e-2;
  c.pipeline.align.epochs = 17;
  c.pipeline.align.logit_scale = LogitScale(50.0);
  c.pipeline.qf.epochs = 9;
  c.pipeline.qf.learning_rate = 0.1;
  c.pipeline.shots = 2;
  c.pipeline.highres_factor = 3;
  c.pipeline.anomaly_words = {"cracked"};
  c.pipeline.encoder.noise_sigma = 0.3;
  c.grid_height = 9;
  c.grid_width = 11;
  c.fixtures = {"pcb_fixture", "juice_fixture"};
  c.suite.null_normal_count = 7;
  c.suite.magnitude_sigmas = 2.5;
  c.pooling = eval::PixelPooling::PerImage;
  c.paths.fixtures = "/data/fx";
  c.paths.features = "/data/feat";
  c.captions.model_name = "m";
  c.captions.max_retries = 1;
  const RunConfig back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.pipeline.align, c.pipeline.align);
  EXPECT_EQ(back.pipeline.encoder, c.pipeline.encoder);
  EXPECT_EQ(back.paths.features, c.paths.features);
  EXPECT_EQ(back.pooling, eval::PixelPooling::PerImage);
  EXPECT_EQ(back.pipeline.anomaly_words, c.pipeline.anomaly_words);
  const auto snapshot = json::parse(c.to_json(false));
  EXPECT_FALSE(snapshot.contains("paths"));
}

TEST(RunConfigJson, PartialDocumentsAndRelativePaths) {
  const RunConfig c = RunConfig::from_json(R"({"seed": 3, "paths": {"fixtures": "fx", "cache": "/abs"}})", "/base");
  EXPECT_EQ(c.paths.fixtures, fs::path("/base/fx"));
  EXPECT_EQ(c.paths.cache, fs::path("/abs"));
  EXPECT_DOUBLE_EQ(c.pipeline.align.gamma, 1.5);
  EXPECT_THROW(RunConfig::from_json("[1]"), DomainError);
  EXPECT_THROW(RunConfig::from_json(R"({"mode": "video"})"), DomainError);
  EXPECT_THROW(RunConfig::from_json(R"({"pixel_pooling": "mean"})"), DomainError);
  EXPECT_THROW(RunConfig::from_json("{"), DomainError);
  RunConfig bad;
  bad.mode = Mode::FeatureImport;
  EXPECT_THROW(bad.validate(), DomainError);
  bad = RunConfig{};
  bad.fixtures.clear();
  EXPECT_THROW(bad.validate(), DomainError);
}

TEST(RunConfigSeeds, OneSeedReachesEveryStream) {
  RunConfig c;
  c.set_seed(99);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.pipeline.seed, 99u);
  EXPECT_EQ(c.pipeline.encoder.seed, 99u);
  EXPECT_EQ(c.pipeline.align.seed, 99u);
  EXPECT_EQ(c.pipeline.qf.seed, 99u);
  EXPECT_EQ(c.shot_seed(), 99u);
  EXPECT_NE(c.suite_seed(), c.null_suite_seed());
  EXPECT_NE(c.suite_seed(), c.shot_seed());
  RunConfig d;
  d.set_seed(99);
  EXPECT_EQ(d.suite_seed(), c.suite_seed());
  d.set_seed(100);
  EXPECT_NE(d.suite_seed(), c.suite_seed());
}

TEST(Cli, UsageErrorsExitTwo) {
  Outcome r = run({"frobnicate"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("captions"), std::string::npos);
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"captions"}).code, kExitUsage);
  EXPECT_EQ(run({"train", "--points", "-3"}).code, kExitUsage);
  EXPECT_EQ(run({"infer", "--fixtures-dir", testing::fixture_dir().string()}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST(Cli, CaptionsValidate) {
  const auto good = (testing::fixture_dir() / "mfsc" / "pcb_fixture.json").string();
  Outcome r = run({"captions", "validate", good});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find(": ok"), std::string::npos);
  testing::TempDir dir("cli-captions");
  const auto bad = (dir.path() / "bad.json").string();
  write_file_atomic(bad, R"({"category": "x"})");
  r = run({"captions", "validate", good, bad});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.err.find("violation"), std::string::npos);
}

TEST(Cli, CaptionsGenerateFromFixtures) {
  testing::TempDir dir("cli-gen");
  Outcome r = run(quick(dir, {"captions", "generate"}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(mfsc::parse_document(r.out), mfsc::parse_document(read_file_bytes(testing::fixture_dir() / "mfsc" / "capsule_fixture.json")));
}

TEST(Cli, GradCheckReportsJson) {
  Outcome r = run({"--seed", "3", "train", "--grad-check", "--points", "4"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_TRUE(j.is_object());
  EXPECT_NE(r.out.find("l_clip"), std::string::npos);
}

TEST(Cli, PromptsAndAggregate) {
  testing::TempDir dir("cli-prompts");
  Outcome r = run(quick(dir, {"prompts", "build", "--dump"}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NO_THROW(json::parse(r.out));
  r = run(quick(dir, {"aggregate", "--dump-map", (dir.path() / "maps").string()}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  bool pgm = false;
  for (const auto& e : fs::directory_iterator(dir.path() / "maps")) pgm = pgm || e.path().extension() == ".pgm";
  EXPECT_TRUE(pgm);
}

TEST(Cli, TrainInspectRetrainInfer) {
  testing::TempDir dir("cli-flow");
  Outcome r = run(quick(dir, {"train"}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const fs::path v1 = dir.path() / "bundles" / "capsule_fixture" / "v0001";
  EXPECT_TRUE(fs::is_directory(v1));
  const std::string v1_manifest = read_file_bytes(v1 / "manifest.json");

  r = run({"bundle", "inspect", v1.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(json::parse(r.out)["probe_reproduces"], true);

  r = run(quick(dir, {"qf-train"}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(fs::is_directory(v1.parent_path() / "v0002"));
  EXPECT_EQ(read_file_bytes(v1 / "manifest.json"), v1_manifest);

  const auto b = bundle::load_bundle(v1);
  const auto q = (dir.path() / "q.feat").string();
  save_feature_file(b.probe.query, q);
  const auto map = (dir.path() / "q.smap").string();
  r = run(quick(dir, {"infer", "--bundle", v1.string(), "--query", q, "--out", map, "--pgm",
                      (dir.path() / "q.pgm").string()}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_DOUBLE_EQ(json::parse(r.out)["m_img"].get<double>(), b.probe.m_img);
  EXPECT_EQ(decode_score_map(read_file_bytes(map)), b.probe.m_pix);
  EXPECT_TRUE(fs::exists(dir.path() / "q.pgm.json"));

  EncoderSpec spec = b.model.encoder;
  const auto fx = synthetic::load_fixture(testing::fixture_dir() / "categories" / "capsule_fixture.json");
  const auto scene = (dir.path() / "s.json").string();
  write_file_atomic(scene, scene_to_json(synthetic::make_normal_scene(fx, spec, 1, "cli", 0)));
  r = run(quick(dir, {"infer", "--scene", scene}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(json::parse(r.out)["height"], 15);

  r = run(quick(dir, {"eval", "--bundle", v1.string()}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(json::parse(r.out)["suites"].size(), 2u);
}

TEST(Cli, EvalIsReproducible) {
  testing::TempDir dir("cli-eval");
  const Outcome a = run(quick(dir, {"eval"}));
  ASSERT_EQ(a.code, kExitOk) << a.err;
  const Outcome b = run(quick(dir, {"eval"}));
  EXPECT_EQ(a.out, b.out);
  const auto j = json::parse(a.out);
  EXPECT_EQ(j["suites"][0]["suite"], "perturbed");
  EXPECT_EQ(j["suites"][1]["suite"], "null");
  EXPECT_FALSE(j["config"].contains("paths"));
  const Outcome t = run(quick(dir, {"eval", "--table"}));
  EXPECT_EQ(t.code, kExitOk);
  EXPECT_NE(t.out.find("suite: null"), std::string::npos);
}

}  // namespace
}  // namespace fgad::app
