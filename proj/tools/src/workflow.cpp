// SPDX-License-Identifier: Apache-2.0
#include "fgad_app/workflow.hpp"

#include "fgad/caption_client.hpp"
#include "fgad/feature_file.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

namespace fgad::app {
namespace fs = std::filesystem;

synthetic::CategoryFixture load_category(const RunConfig& cfg, const std::string& id) {
  const fs::path path = cfg.paths.fixtures / "categories" / (id + ".json");
  if (!fs::exists(path)) throw DomainError("no category fixture " + path.string());
  auto fx = synthetic::load_fixture(path);
  if (fx.height != cfg.grid_height || fx.width != cfg.grid_width) {
    throw DomainError("fixture " + id + " is " + std::to_string(fx.height) + "x" + std::to_string(fx.width) +
                      " but the run config expects a " + std::to_string(cfg.grid_height) + "x" +
                      std::to_string(cfg.grid_width) + " native grid");
  }
  return fx;
}

std::string caption_id(const RunConfig& cfg, const std::string& id) {
  const fs::path path = cfg.paths.fixtures / "categories" / (id + ".json");
  if (fs::exists(path)) return synthetic::load_fixture(path).mfsc_fixture;
  return id;
}

mfsc::MFSCDocument caption_document(const RunConfig& cfg, const std::string& id) {
  const captions::CaptionClient client(cfg.captions, nullptr, cfg.paths.cache,
                                       captions::FixtureRegistry::from_directory(cfg.paths.fixtures / "mfsc"));
  captions::CaptionRequest req;
  req.category = caption_id(cfg, id);
  req.scene_reference = req.category;
  return client.generate(req);
}

ShotGrids load_shots(const RunConfig& cfg, const std::string& id) {
  ShotGrids out;
  if (cfg.mode == Mode::Synthetic) {
    const auto fx = load_category(cfg, id);
    const auto& enc = cfg.pipeline.encoder;
    const ImageEncoder image(enc);
    for (const auto& s : synthetic::make_shots(fx, enc, cfg.pipeline.shots, cfg.shot_seed())) {
      out.native.push_back(image.encode_scene(s));
      out.highres.push_back(image.encode_scene_highres(s, cfg.pipeline.highres_factor));
      out.truth.push_back(s.layout());
      out.truth_highres.push_back(upsample_scene(s, cfg.pipeline.highres_factor).layout());
    }
    return out;
  }
  const fs::path dir = cfg.paths.features / id / "shots";
  if (!fs::is_directory(dir)) throw DomainError("no feature directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".feat") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DomainError("no .feat files in " + dir.string());
  if (static_cast<int>(files.size()) > cfg.pipeline.shots) files.resize(static_cast<std::size_t>(cfg.pipeline.shots));
  const fs::path hr_dir = cfg.paths.features / id / "highres";
  const bool has_highres = fs::is_directory(hr_dir);
  for (const auto& f : files) {
    TokenGrid g = load_feature_file(f);
    if (g.height != cfg.grid_height || g.width != cfg.grid_width) {
      throw DomainError(f.string() + ": grid does not match the configured native grid");
    }
    out.native.push_back(std::move(g));
    if (has_highres) {
      TokenGrid hr = load_feature_file(hr_dir / f.filename());
      hr.resolution = Resolution::HighRes;
      out.highres.push_back(std::move(hr));
    }
  }
  return out;
}

Trained train_category(const RunConfig& cfg, const std::string& id) {
  cfg.validate();
  Trained t;
  const auto doc = caption_document(cfg, id);
  const auto shots = load_shots(cfg, id);
  t.model = pipeline::train_model_from_grids(id, doc, shots.native, shots.highres, cfg.pipeline, &t.artifacts);
  return t;
}

TokenGrid probe_query(const RunConfig& cfg, const std::string& id, const pipeline::Model& model) {
  if (cfg.mode == Mode::Synthetic) {
    const auto fx = load_category(cfg, id);
    const auto& enc = model.encoder;
    const auto scene = synthetic::make_anomalous_scene(fx, enc, cfg.suite_seed(), "probe", 0,
                                                       cfg.suite.magnitude_sigmas * enc.noise_sigma);
    return ImageEncoder(enc).encode_scene(scene);
  }
  return load_shots(cfg, id).native.front();
}

std::string qf_trace_to_csv(const qf::TrainResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,loss\n0," << r.initial_loss << '\n';
  for (std::size_t i = 0; i < r.trace.size(); ++i) os << i + 1 << ',' << r.trace[i] << '\n';
  return os.str();
}

bundle::Bundle make_bundle(const RunConfig& cfg, const std::string& id, const Trained& t) {
  bundle::Bundle b;
  b.model = t.model;
  b.config_json = cfg.to_json(false);
  b.probe = bundle::make_probe(b.model, probe_query(cfg, id, b.model));
  b.extras["align_trace.csv"] = align::trace_to_csv(t.artifacts.align);
  b.extras["qf_trace.csv"] = qf_trace_to_csv(t.artifacts.qf);
  return b;
}

bundle::Bundle retrain_queryformer(const RunConfig& cfg, const bundle::Bundle& b) {
  bundle::Bundle out = b;
  auto& m = out.model;
  const auto banks = qf::family_banks(m.prompts);
  const auto init = qf::Params::initialize(m.encoder.feature_dim, qf::family_count(m.prompts.component_count), cfg.seed);
  qf::TrainConfig qcfg = cfg.pipeline.qf;
  qcfg.seed = cfg.seed;
  const auto result = qf::train_queryformer(banks, init, qcfg);
  m.qf = result.params;
  m.refresh();
  out.probe = bundle::make_probe(m, b.probe.query);
  out.extras["qf_trace.csv"] = qf_trace_to_csv(result);
  out.config_json = cfg.to_json(false);
  return out;
}

std::vector<synthetic::LabeledScene> make_suite(const RunConfig& cfg, const synthetic::CategoryFixture& fx,
                                                SuiteKind kind) {
  synthetic::SuiteConfig sc;
  if (kind == SuiteKind::Perturbed) {
    sc.normal_count = cfg.suite.normal_count;
    sc.anomalous_count = cfg.suite.anomalous_count;
    sc.magnitude_sigmas = cfg.suite.magnitude_sigmas;
    sc.seed = cfg.suite_seed();
  } else {
    sc.normal_count = cfg.suite.null_normal_count;
    sc.anomalous_count = cfg.suite.null_anomalous_count;
    sc.magnitude_sigmas = 0.0;
    sc.seed = cfg.null_suite_seed();
  }
  return synthetic::make_test_suite(fx, cfg.pipeline.encoder, sc);
}

eval::CategoryReport evaluate_category(const RunConfig& cfg, const pipeline::Model& model,
                                       const std::vector<synthetic::LabeledScene>& suite) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = pipeline::summarize(pipeline::score_scenes(model, suite), cfg.pooling);
  eval::CategoryReport c;
  c.category = model.category;
  c.image_auroc = r.image_auroc;
  c.pixel_auroc = r.pixel_auroc;
  c.per_seed.push_back({cfg.seed, r.image_auroc, r.pixel_auroc});
  c.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return c;
}

}  // namespace fgad::app
