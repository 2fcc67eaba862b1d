// SPDX-License-Identifier: Apache-2.0
#include "fgad_app/commands.hpp"

#include "fgad/alignment.hpp"
#include "fgad/bundle.hpp"
#include "fgad/caption_client.hpp"
#include "fgad/feature_file.hpp"
#include "fgad/score_map_io.hpp"
#include "fgad_app/run_config.hpp"
#include "fgad_app/workflow.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <iostream>
#include <optional>

namespace fgad::app {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> fixtures;
  std::optional<std::string> mode;
  std::optional<std::string> fixtures_dir;
  std::optional<std::string> cache_dir;
  std::optional<std::string> bundle_root;
  std::optional<std::string> features_dir;
  std::optional<int> epochs;
  std::optional<int> qf_epochs;
  std::optional<double> learning_rate;
  std::optional<double> noise_sigma;
  std::optional<int> shots;
  std::optional<int> suite_normal;
  std::optional<int> suite_anomalous;
  std::optional<int> null_normal;
  std::optional<int> null_anomalous;

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : RunConfig::load(config);
    if (seed) cfg.set_seed(*seed);
    if (!fixtures.empty()) cfg.fixtures = fixtures;
    if (mode) cfg.mode = mode_from_string(*mode);
    if (fixtures_dir) cfg.paths.fixtures = *fixtures_dir;
    if (cache_dir) cfg.paths.cache = *cache_dir;
    if (bundle_root) cfg.paths.bundles = *bundle_root;
    if (features_dir) cfg.paths.features = *features_dir;
    if (epochs) cfg.pipeline.align.epochs = *epochs;
    if (qf_epochs) cfg.pipeline.qf.epochs = *qf_epochs;
    if (learning_rate) cfg.pipeline.align.learning_rate = *learning_rate;
    if (noise_sigma) cfg.pipeline.encoder.noise_sigma = *noise_sigma;
    if (shots) cfg.pipeline.shots = *shots;
    if (suite_normal) cfg.suite.normal_count = *suite_normal;
    if (suite_anomalous) cfg.suite.anomalous_count = *suite_anomalous;
    if (null_normal) cfg.suite.null_normal_count = *null_normal;
    if (null_anomalous) cfg.suite.null_anomalous_count = *null_anomalous;
    cfg.validate();
    return cfg;
  }
};

void write_output(const std::string& path, const std::string& bytes, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << bytes;
  } else {
    write_file_atomic(path, bytes);
  }
}

// ---- captions ----

int captions_generate(const RunConfig& cfg, const std::string& category, const std::string& image,
                      const std::string& media_type, const std::string& output, std::ostream& out) {
  const std::vector<std::string> ids = category.empty() ? cfg.fixtures : std::vector<std::string>{category};
  if (!output.empty() && ids.size() != 1) throw UsageError("--out needs exactly one category");
  for (const auto& id : ids) {
    mfsc::MFSCDocument doc;
    if (image.empty()) {
      doc = caption_document(cfg, id);
    } else {
      const captions::CaptionClient client(captions::EndpointConfig::with_environment_key(cfg.captions), nullptr,
                                           cfg.paths.cache, {});
      captions::CaptionRequest req;
      req.category = caption_id(cfg, id);
      req.image = captions::ImagePayload{read_file_bytes(image), media_type};
      doc = client.generate(req);
    }
    write_output(output, mfsc::serialize(doc), out);
  }
  return kExitOk;
}

int captions_validate(const std::vector<std::string>& files, std::ostream& out, std::ostream& err) {
  int status = kExitOk;
  for (const auto& f : files) {
    const auto report = mfsc::check_text(read_file_bytes(f));
    if (report.ok()) {
      out << f << ": ok\n";
    } else {
      err << f << ": " << report.violations.size() << " violation(s)\n" << report.to_text();
      status = kExitValidation;
    }
  }
  return status;
}

// ---- prompts ----

int prompts_build(const RunConfig& cfg, bool dump, const std::string& output, std::ostream& out) {
  if (dump && !output.empty() && cfg.fixtures.size() != 1) throw UsageError("--out needs exactly one fixture");
  const TextEncoder text(cfg.pipeline.encoder);
  json summary = json::array();
  for (const auto& id : cfg.fixtures) {
    const auto doc = caption_document(cfg, id);
    auto set = prompts::build_prompt_set(doc, cfg.pipeline.anomaly_words, cfg.pipeline.align.n_ab, cfg.seed);
    if (dump) {
      write_output(output, prompts::prompts_to_json(set), out);
      continue;
    }
    const auto params = prompts::PromptParameters::initialize(set, cfg.pipeline.encoder.token_embedding_dim, cfg.seed);
    prompts::encode_all(set, params, text);
    json levels = json::array();
    for (const auto& level : set.levels()) {
      levels.push_back({{"level", level.name()},
                        {"nhp", set.indices(level, prompts::Polarity::NormalHandcrafted).size()},
                        {"ahp", set.indices(level, prompts::Polarity::AbnormalHandcrafted).size()},
                        {"alp", set.indices(level, prompts::Polarity::AbnormalLearnable).size()}});
    }
    summary.push_back({{"category", id},
                       {"templates", set.templates.size()},
                       {"learnable_parameters", params.size()},
                       {"levels", levels}});
  }
  if (!dump) out << summary.dump(2) << '\n';
  return kExitOk;
}

// ---- aggregate ----

int aggregate(const RunConfig& cfg, const std::string& dump_dir, std::ostream& out) {
  const TextEncoder text(cfg.pipeline.encoder);
  json result = json::array();
  for (const auto& id : cfg.fixtures) {
    const auto doc = caption_document(cfg, id);
    auto set = prompts::build_prompt_set(doc, cfg.pipeline.anomaly_words, cfg.pipeline.align.n_ab, cfg.seed);
    const auto params = prompts::PromptParameters::initialize(set, cfg.pipeline.encoder.token_embedding_dim, cfg.seed);
    prompts::encode_all(set, params, text);
    const auto shots = load_shots(cfg, id);
    json per_shot = json::array();
    for (std::size_t i = 0; i < shots.native.size(); ++i) {
      RegionMap hr;
      RegionMap nat;
      if (shots.highres.empty()) {
        nat = pipeline::aggregate_regions(shots.native[i], set, 1, &hr);
      } else {
        nat = pipeline::aggregate_regions(shots.highres[i], set, shots.highres[i].height / shots.native[i].height, &hr);
      }
      json entry{{"shot", i}, {"foreground_tokens", nat.foreground_count()}};
      if (!shots.truth.empty()) {
        entry["native_accuracy"] = label_accuracy(nat, shots.truth[i]);
        entry["highres_accuracy"] = label_accuracy(hr, shots.truth_highres[i]);
      }
      per_shot.push_back(entry);
      if (!dump_dir.empty()) {
        fs::create_directories(dump_dir);
        const std::string stem = id + "_shot" + std::to_string(i);
        write_file_atomic(fs::path(dump_dir) / (stem + "_native.pgm"), region_map_to_pgm(nat));
        write_file_atomic(fs::path(dump_dir) / (stem + "_highres.pgm"), region_map_to_pgm(hr));
      }
    }
    result.push_back({{"category", id}, {"shots", per_shot}});
  }
  out << result.dump(2) << '\n';
  return kExitOk;
}

// ---- train / qf-train ----

int grad_check(const RunConfig& cfg, int points, std::ostream& out) {
  align::GradCheckOptions opt;
  opt.seed = cfg.seed;
  opt.points = points;
  opt.logit_scale = cfg.pipeline.align.logit_scale;
  const auto report = align::grad_check_all(opt);
  out << report.to_json();
  return report.passed() ? kExitOk : kExitValidation;
}

int train(const RunConfig& cfg, std::ostream& out) {
  for (const auto& id : cfg.fixtures) {
    const auto trained = train_category(cfg, id);
    const auto b = make_bundle(cfg, id, trained);
    const auto dir = bundle::next_version_dir(cfg.paths.bundles, id);
    bundle::save_bundle(b, dir);
    const auto& a = trained.artifacts.align;
    out << json{{"category", id},
                {"bundle", dir.string()},
                {"initial_loss", a.initial.total()},
                {"final_loss", a.trace.empty() ? a.initial.total() : a.trace.back().total()},
                {"initial_l_clip", a.initial.clip},
                {"final_l_clip", a.trace.empty() ? a.initial.clip : a.trace.back().clip},
                {"windowed_non_increasing", align::windowed_non_increasing(a)}}
               .dump()
        << '\n';
  }
  return kExitOk;
}

fs::path bundle_for(const RunConfig& cfg, const std::string& explicit_dir, const std::string& id) {
  if (!explicit_dir.empty()) return explicit_dir;
  return bundle::latest_version_dir(cfg.paths.bundles, id);
}

int qf_train(const RunConfig& cfg, const std::string& bundle_dir, std::ostream& out) {
  if (!bundle_dir.empty() && cfg.fixtures.size() != 1) throw UsageError("--bundle needs exactly one fixture");
  for (const auto& id : cfg.fixtures) {
    const auto src = bundle_for(cfg, bundle_dir, id);
    const auto b = retrain_queryformer(cfg, bundle::load_bundle(src));
    const auto dir = bundle::next_version_dir(cfg.paths.bundles, b.model.category);
    bundle::save_bundle(b, dir);
    out << json{{"category", b.model.category}, {"source", src.string()}, {"bundle", dir.string()}}.dump() << '\n';
  }
  return kExitOk;
}

// ---- infer / eval ----

int infer(const RunConfig& cfg, const std::string& bundle_dir, const std::string& query, const std::string& scene,
          const std::string& map_out, const std::string& pgm_out, std::ostream& out) {
  if (query.empty() == scene.empty()) throw UsageError("infer needs exactly one of --query or --scene");
  const auto b = bundle::load_bundle(bundle_for(cfg, bundle_dir, cfg.fixtures.front()));
  const TokenGrid grid =
      query.empty() ? ImageEncoder(b.model.encoder).encode_scene(scene_from_json(read_file_bytes(scene)))
                    : load_feature_file(query);
  const auto inf = b.model.infer(grid);
  if (!map_out.empty()) write_file_atomic(map_out, encode_score_map(inf.m_pix));
  if (!pgm_out.empty()) {
    const auto pgm = score_map_to_pgm(inf.m_pix);
    write_file_atomic(pgm_out, pgm.pgm);
    write_file_atomic(pgm_out + ".json", pgm.sidecar);
  }
  out << json{{"category", b.model.category},
              {"m_img", inf.m_img},
              {"s_i", inf.s_i},
              {"m_pix_max", inf.m_pix.max()},
              {"height", inf.m_pix.height()},
              {"width", inf.m_pix.width()}}
             .dump(2)
      << '\n';
  return kExitOk;
}

int evaluate(const RunConfig& cfg, const std::string& bundle_dir, bool timing, bool table, std::ostream& out) {
  if (cfg.mode != Mode::Synthetic) throw DomainError("eval needs labeled synthetic suites (mode synthetic)");
  if (!bundle_dir.empty() && cfg.fixtures.size() != 1) throw UsageError("--bundle needs exactly one fixture");
  eval::BenchmarkReport perturbed{"perturbed", {}};
  eval::BenchmarkReport null_suite{"null", {}};
  for (const auto& id : cfg.fixtures) {
    const auto fx = load_category(cfg, id);
    const auto t0 = std::chrono::steady_clock::now();
    pipeline::Model model =
        bundle_dir.empty() ? train_category(cfg, id).model : bundle::load_bundle(bundle_dir).model;
    const double train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto p = evaluate_category(cfg, model, make_suite(cfg, fx, SuiteKind::Perturbed));
    auto n = evaluate_category(cfg, model, make_suite(cfg, fx, SuiteKind::Null));
    p.wall_clock_seconds += train_seconds;
    perturbed.categories.push_back(p);
    null_suite.categories.push_back(n);
  }
  if (table) {
    out << "suite: perturbed\n" << perturbed.to_table() << "suite: null\n" << null_suite.to_table();
    return kExitOk;
  }
  const json report{{"config", json::parse(cfg.to_json(false))},
                    {"suites", json::array({json::parse(perturbed.to_json(timing)),
                                            json::parse(null_suite.to_json(timing))})}};
  out << report.dump(2) << '\n';
  return kExitOk;
}

int inspect(const std::string& dir, std::ostream& out, std::ostream& err) {
  const std::string summary = bundle::inspect(dir);
  out << summary;
  if (!json::parse(summary).at("probe_reproduces").get<bool>()) {
    err << "bundle " << dir << ": stored probe does not reproduce\n";
    return kExitValidation;
  }
  return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot anomaly detection with multi-level fine-grained semantic captions", "fgad"};
  app.fallthrough();
  app.require_subcommand(1);

  Overrides o;
  app.add_option("--config", o.config, "Run configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Seed for every random stream");
  app.add_option("--fixture", o.fixtures, "Fixture id (repeatable); replaces the configured list");
  app.add_option("--mode", o.mode, "synthetic or feature-import");
  app.add_option("--fixtures-dir", o.fixtures_dir, "Directory holding categories/ and mfsc/");
  app.add_option("--cache-dir", o.cache_dir, "Caption cache directory");
  app.add_option("--bundle-root", o.bundle_root, "Root of versioned model bundles");
  app.add_option("--features-dir", o.features_dir, "Feature-import root");
  app.add_option("--epochs", o.epochs, "Alignment epochs");
  app.add_option("--qf-epochs", o.qf_epochs, "Query Former epochs");
  app.add_option("--lr", o.learning_rate, "Alignment learning rate");
  app.add_option("--noise-sigma", o.noise_sigma, "Encoder noise sigma");
  app.add_option("--shots", o.shots, "Number of normal shots");
  app.add_option("--suite-normal", o.suite_normal, "Normal scenes in the perturbed suite");
  app.add_option("--suite-anomalous", o.suite_anomalous, "Anomalous scenes in the perturbed suite");
  app.add_option("--null-normal", o.null_normal, "Normal scenes in the null suite");
  app.add_option("--null-anomalous", o.null_anomalous, "Anomalous scenes in the null suite");

  auto* captions_cmd = app.add_subcommand("captions", "Generate or validate MFSC caption documents");
  captions_cmd->require_subcommand(1);
  auto* gen = captions_cmd->add_subcommand("generate", "Caption a category (fixture mode unless --image is given)");
  std::string category, image, media_type = "image/png", output;
  gen->add_option("--category", category, "Fixture id (default: every configured fixture)");
  gen->add_option("--image", image, "Image file to send to the live endpoint")->check(CLI::ExistingFile);
  gen->add_option("--media-type", media_type, "Media type of --image");
  gen->add_option("--out", output, "Output file (default stdout)");
  auto* validate = captions_cmd->add_subcommand("validate", "Validate MFSC JSON files");
  std::vector<std::string> files;
  validate->add_option("files", files, "MFSC JSON files")->required()->check(CLI::ExistingFile);

  auto* prompts_cmd = app.add_subcommand("prompts", "Prompt construction");
  prompts_cmd->require_subcommand(1);
  auto* build = prompts_cmd->add_subcommand("build", "Build the three-level prompt set");
  bool dump = false;
  build->add_flag("--dump", dump, "Write the prompt templates as JSON");
  build->add_option("--out", output, "Output file for --dump (default stdout)");

  auto* aggregate_cmd = app.add_subcommand("aggregate", "Language-guided region aggregation on the shots");
  std::string dump_map;
  aggregate_cmd->add_option("--dump-map", dump_map, "Directory for PGM region maps");

  auto* train_cmd = app.add_subcommand("train", "Train and write a new model bundle");
  bool do_grad_check = false;
  int points = 100;
  train_cmd->add_flag("--grad-check", do_grad_check, "Run the finite-difference gradient check instead");
  train_cmd->add_option("--points", points, "Random points per gradient term")->check(CLI::PositiveNumber);

  auto* qf_cmd = app.add_subcommand("qf-train", "Retrain the Query Former of a bundle into a new bundle");
  std::string bundle_dir;
  qf_cmd->add_option("--bundle", bundle_dir, "Source bundle (default: latest)");

  auto* infer_cmd = app.add_subcommand("infer", "Score one query");
  std::string query, scene, map_out, pgm_out;
  infer_cmd->add_option("--bundle", bundle_dir, "Bundle (default: latest for the first fixture)");
  infer_cmd->add_option("--query", query, "Feature file (FGADFEAT)")->check(CLI::ExistingFile);
  infer_cmd->add_option("--scene", scene, "Synthetic scene JSON")->check(CLI::ExistingFile);
  infer_cmd->add_option("--out", map_out, "Write M_pix as FGADSMAP");
  infer_cmd->add_option("--pgm", pgm_out, "Write M_pix as PGM with a JSON sidecar");

  auto* eval_cmd = app.add_subcommand("eval", "Benchmark on the perturbed and null synthetic suites");
  bool timing = false, table = false;
  eval_cmd->add_option("--bundle", bundle_dir, "Evaluate this bundle instead of training");
  eval_cmd->add_flag("--timing", timing, "Include wall-clock seconds in the JSON report");
  eval_cmd->add_flag("--table", table, "Print aligned text tables instead of JSON");

  auto* bundle_cmd = app.add_subcommand("bundle", "Model bundle tools");
  bundle_cmd->require_subcommand(1);
  auto* inspect_cmd = bundle_cmd->add_subcommand("inspect", "Verify and summarize a bundle");
  std::string inspect_dir;
  inspect_cmd->add_option("dir", inspect_dir, "Bundle directory")->required()->check(CLI::ExistingDirectory);

  std::vector<const char*> args;
  args.reserve(argv.size());
  for (const auto& a : argv) args.push_back(a.c_str());
  if (args.empty()) args.push_back("fgad");

  try {
    app.parse(static_cast<int>(args.size()), args.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) return captions_generate(o.resolve(), category, image, media_type, output, out);
    if (*validate) return captions_validate(files, out, err);
    if (*build) return prompts_build(o.resolve(), dump, output, out);
    if (*aggregate_cmd) return aggregate(o.resolve(), dump_map, out);
    if (*train_cmd) {
      const RunConfig cfg = o.resolve();
      return do_grad_check ? grad_check(cfg, points, out) : train(cfg, out);
    }
    if (*qf_cmd) return qf_train(o.resolve(), bundle_dir, out);
    if (*infer_cmd) return infer(o.resolve(), bundle_dir, query, scene, map_out, pgm_out, out);
    if (*eval_cmd) return evaluate(o.resolve(), bundle_dir, timing, table, out);
    if (*inspect_cmd) return inspect(inspect_dir, out, err);
  } catch (const UsageError& e) {
    err << "fgad: " << e.what() << '\n';
    return kExitUsage;
  } catch (const captions::SchemaError& e) {
    err << "fgad: " << e.what() << '\n' << e.report().to_text();
    return kExitValidation;
  } catch (const mfsc::DocumentError& e) {
    err << "fgad: " << e.what() << '\n' << e.report().to_text();
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "fgad: " << e.what() << '\n';
    return kExitValidation;
  }
  err << app.help();
  return kExitUsage;
}

int run_command(int argc, const char* const* argv) {
  return run_command(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace fgad::app
