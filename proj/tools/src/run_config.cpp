// SPDX-License-Identifier: Apache-2.0
#include "fgad_app/run_config.hpp"

#include "fgad/feature_file.hpp"
#include "fgad/rng.hpp"

#include <json.hpp>

namespace fgad::app {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

std::uint64_t derived_seed(std::uint64_t seed, std::string_view tag) {
  Rng rng = derive_rng(seed, tag);
  return rng();
}

}  // namespace

std::string_view to_string(Mode m) { return m == Mode::Synthetic ? "synthetic" : "feature-import"; }

Mode mode_from_string(std::string_view s) {
  if (s == "synthetic") return Mode::Synthetic;
  if (s == "feature-import") return Mode::FeatureImport;
  throw DomainError("unknown mode '" + std::string(s) + "' (expected synthetic or feature-import)");
}

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  pipeline.seed = s;
  pipeline.encoder.seed = s;
  pipeline.align.seed = s;
  pipeline.qf.seed = s;
}

std::uint64_t RunConfig::shot_seed() const { return seed; }
std::uint64_t RunConfig::suite_seed() const { return derived_seed(seed, "suite"); }
std::uint64_t RunConfig::null_suite_seed() const { return derived_seed(seed, "null-suite"); }

void RunConfig::validate() const {
  pipeline.validate();
  if (grid_height < 1 || grid_width < 1) throw DomainError("RunConfig: grid must be at least 1x1");
  if (fixtures.empty()) throw DomainError("RunConfig: no fixture ids");
  if (suite.normal_count < 1 || suite.anomalous_count < 1 || suite.null_normal_count < 1 ||
      suite.null_anomalous_count < 1) {
    throw DomainError("RunConfig: every suite needs at least one normal and one anomalous scene");
  }
  if (!(suite.magnitude_sigmas >= 0.0)) throw DomainError("RunConfig: magnitude_sigmas must be >= 0");
  if (mode == Mode::FeatureImport && paths.features.empty()) {
    throw DomainError("RunConfig: feature-import mode needs paths.features");
  }
  captions.validate(false);
}

std::string RunConfig::to_json(bool include_paths) const {
  const auto& a = pipeline.align;
  json j;
  j["seed"] = seed;
  j["mode"] = to_string(mode);
  j["fixtures"] = fixtures;
  j["grid"] = {{"height", grid_height}, {"width", grid_width}};
  j["train"] = {{"epsilon", a.epsilon},
                {"lambda_reg", a.lambda_reg},
                {"gamma", a.gamma},
                {"n_ab", a.n_ab},
                {"learning_rate", a.learning_rate},
                {"epochs", a.epochs},
                {"logit_scale", a.logit_scale.value()},
                {"shots", pipeline.shots},
                {"highres_factor", pipeline.highres_factor},
                {"anomaly_words", pipeline.anomaly_words}};
  j["query_former"] = {{"learning_rate", pipeline.qf.learning_rate}, {"epochs", pipeline.qf.epochs}};
  j["encoder"] = json::parse(encoder_spec_to_json(pipeline.encoder));
  j["captions"] = {{"base_url", captions.base_url},
                   {"model", captions.model_name},
                   {"timeout_seconds", captions.timeout_seconds},
                   {"max_retries", captions.max_retries},
                   {"temperature", captions.temperature}};
  j["suite"] = {{"normal_count", suite.normal_count},
                {"anomalous_count", suite.anomalous_count},
                {"magnitude_sigmas", suite.magnitude_sigmas},
                {"null_normal_count", suite.null_normal_count},
                {"null_anomalous_count", suite.null_anomalous_count}};
  j["pixel_pooling"] = pooling == eval::PixelPooling::Pooled ? "pooled" : "per-image";
  if (include_paths) {
    j["paths"] = {{"fixtures", paths.fixtures.string()},
                  {"cache", paths.cache.string()},
                  {"bundles", paths.bundles.string()},
                  {"features", paths.features.string()}};
  }
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(std::string_view text, const fs::path& base_dir) {
  RunConfig c;
  try {
    const json j = json::parse(text.begin(), text.end());
    if (!j.is_object()) throw DomainError("run config must be a JSON object");
    c.mode = mode_from_string(j.value("mode", std::string(to_string(c.mode))));
    c.fixtures = j.value("fixtures", c.fixtures);
    if (j.contains("grid")) {
      c.grid_height = j["grid"].value("height", c.grid_height);
      c.grid_width = j["grid"].value("width", c.grid_width);
    }
    if (j.contains("encoder")) c.pipeline.encoder = encoder_spec_from_json(j["encoder"].dump());
    if (j.contains("train")) {
      const json& t = j["train"];
      auto& a = c.pipeline.align;
      a.epsilon = t.value("epsilon", a.epsilon);
      a.lambda_reg = t.value("lambda_reg", a.lambda_reg);
      a.gamma = t.value("gamma", a.gamma);
      a.n_ab = t.value("n_ab", a.n_ab);
      a.learning_rate = t.value("learning_rate", a.learning_rate);
      a.epochs = t.value("epochs", a.epochs);
      a.logit_scale = LogitScale(t.value("logit_scale", a.logit_scale.value()));
      c.pipeline.shots = t.value("shots", c.pipeline.shots);
      c.pipeline.highres_factor = t.value("highres_factor", c.pipeline.highres_factor);
      c.pipeline.anomaly_words = t.value("anomaly_words", c.pipeline.anomaly_words);
    }
    if (j.contains("query_former")) {
      c.pipeline.qf.learning_rate = j["query_former"].value("learning_rate", c.pipeline.qf.learning_rate);
      c.pipeline.qf.epochs = j["query_former"].value("epochs", c.pipeline.qf.epochs);
    }
    if (j.contains("captions")) {
      const json& k = j["captions"];
      c.captions.base_url = k.value("base_url", c.captions.base_url);
      c.captions.model_name = k.value("model", c.captions.model_name);
      c.captions.timeout_seconds = k.value("timeout_seconds", c.captions.timeout_seconds);
      c.captions.max_retries = k.value("max_retries", c.captions.max_retries);
      c.captions.temperature = k.value("temperature", c.captions.temperature);
    }
    if (j.contains("suite")) {
      const json& s = j["suite"];
      c.suite.normal_count = s.value("normal_count", c.suite.normal_count);
      c.suite.anomalous_count = s.value("anomalous_count", c.suite.anomalous_count);
      c.suite.magnitude_sigmas = s.value("magnitude_sigmas", c.suite.magnitude_sigmas);
      c.suite.null_normal_count = s.value("null_normal_count", c.suite.null_normal_count);
      c.suite.null_anomalous_count = s.value("null_anomalous_count", c.suite.null_anomalous_count);
    }
    if (j.contains("pixel_pooling")) {
      const auto p = j["pixel_pooling"].get<std::string>();
      if (p == "pooled") {
        c.pooling = eval::PixelPooling::Pooled;
      } else if (p == "per-image") {
        c.pooling = eval::PixelPooling::PerImage;
      } else {
        throw DomainError("pixel_pooling must be pooled or per-image");
      }
    }
    if (j.contains("paths")) {
      const json& p = j["paths"];
      if (p.contains("fixtures")) c.paths.fixtures = resolve(base_dir, p["fixtures"].get<std::string>());
      if (p.contains("cache")) c.paths.cache = resolve(base_dir, p["cache"].get<std::string>());
      if (p.contains("bundles")) c.paths.bundles = resolve(base_dir, p["bundles"].get<std::string>());
      if (p.contains("features")) c.paths.features = resolve(base_dir, p["features"].get<std::string>());
    }
    c.set_seed(j.value("seed", std::uint64_t{0}));
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(std::string("run config: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  return from_json(read_file_bytes(path), path.parent_path());
}

}  // namespace fgad::app
