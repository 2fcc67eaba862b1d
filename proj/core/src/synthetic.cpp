// SPDX-License-Identifier: Apache-2.0
#include "fgad/synthetic.hpp"

#include "fgad/feature_file.hpp"
#include "fgad/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace fgad::synthetic {
namespace {

using nlohmann::json;


Rng scene_rng(std::uint64_t seed, std::string_view role, int index, std::string_view what) {
  std::string tag = "scene/";
  tag.append(role).append("/").append(what);
  return derive_rng(seed, tag, {static_cast<std::uint64_t>(index)});
}

SyntheticScene base_scene(const CategoryFixture& fixture, const EncoderSpec& spec, std::uint64_t seed,
                          std::string_view role, int index) {
  fixture.validate();
  Rng rng = scene_rng(seed, role, index, "layout");
  std::uniform_int_distribution<int> shift(-fixture.jitter, fixture.jitter);
  const int dr = shift(rng);
  const int dc = shift(rng);
  const auto layout = layout_for(fixture, dr, dc);

  SyntheticScene s;
  s.category = fixture.category;
  s.height = fixture.height;
  s.width = fixture.width;
  s.components = fixture.components;
  Rng noise = scene_rng(seed, role, index, "noise-seed");
  s.noise_seed = noise();
  s.cells.resize(layout.size());
  std::normal_distribution<double> attr(0.0, fixture.attribute_stddev);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    s.cells[i].component_id = layout[i];
    FeatVec a(spec.attribute_dim);
    for (int k = 0; k < spec.attribute_dim; ++k) a[k] = attr(rng);
    s.cells[i].attribute_vector = std::move(a);
  }
  return s;
}

}  // namespace

void CategoryFixture::validate() const {
  if (category.empty()) throw DomainError("CategoryFixture: empty category");
  if (height <= 0 || width <= 0) throw DomainError("CategoryFixture: empty grid");
  if (components.size() < 2) throw DomainError("CategoryFixture: need a background and at least one component");
  if (jitter < 0) throw DomainError("CategoryFixture: negative jitter");
  if (!(attribute_stddev >= 0.0)) throw DomainError("CategoryFixture: negative attribute_stddev");
  if (defect_semantic_weight < 0.0 || defect_semantic_weight > 1.0) {
    throw DomainError("CategoryFixture: defect_semantic_weight outside [0,1]");
  }
  if (defect_min < 1 || defect_max < defect_min || defect_max > std::min(height, width)) {
    throw DomainError("CategoryFixture: bad defect size range");
  }
  for (const auto& r : regions) {
    if (r.component < 1 || r.component >= static_cast<int>(components.size())) {
      throw DomainError("CategoryFixture: region references unknown component");
    }
    if (r.rows < 1 || r.cols < 1 || r.row < 0 || r.col < 0 || r.row + r.rows > height || r.col + r.cols > width) {
      throw DomainError("CategoryFixture: region outside the grid");
    }
  }
  const auto layout = layout_for(*this, 0, 0);
  for (int c = 1; c < static_cast<int>(components.size()); ++c) {
    if (std::find(layout.begin(), layout.end(), c) == layout.end()) {
      throw DomainError("CategoryFixture: component " + std::to_string(c) + " is not visible in the layout");
    }
  }
}

std::vector<int> layout_for(const CategoryFixture& fixture, int dr, int dc) {
  std::vector<int> out(static_cast<std::size_t>(fixture.height) * fixture.width, 0);
  for (const auto& r : fixture.regions) {
    for (int i = r.row; i < r.row + r.rows; ++i) {
      for (int j = r.col; j < r.col + r.cols; ++j) {
        const int ii = i + dr;
        const int jj = j + dc;
        if (ii < 0 || jj < 0 || ii >= fixture.height || jj >= fixture.width) continue;
        out[static_cast<std::size_t>(ii) * fixture.width + jj] = r.component;
      }
    }
  }
  return out;
}

CategoryFixture fixture_from_json(std::string_view text) {
  CategoryFixture f;
  try {
    const json j = json::parse(text.begin(), text.end());
    f.category = j.at("category").get<std::string>();
    f.mfsc_fixture = j.value("mfsc", f.category);
    f.height = j.value("height", f.height);
    f.width = j.value("width", f.width);
    for (const auto& c : j.at("components")) {
      f.components.push_back({c.at("name").get<std::string>(),
                              c.value("attribute_words", std::vector<std::string>{})});
    }
    for (const auto& r : j.at("regions")) {
      f.regions.push_back({r.at("component").get<int>(), r.at("row").get<int>(), r.at("col").get<int>(),
                           r.at("rows").get<int>(), r.at("cols").get<int>()});
    }
    f.jitter = j.value("jitter", f.jitter);
    f.attribute_stddev = j.value("attribute_stddev", f.attribute_stddev);
    f.defect_words = j.value("defect_words", f.defect_words);
    f.defect_semantic_weight = j.value("defect_semantic_weight", f.defect_semantic_weight);
    f.defect_min = j.value("defect_min", f.defect_min);
    f.defect_max = j.value("defect_max", f.defect_max);
  } catch (const json::exception& e) {
    throw DomainError(std::string("category fixture JSON: ") + e.what());
  }
  f.validate();
  return f;
}

std::string fixture_to_json(const CategoryFixture& f) {
  json comps = json::array();
  for (const auto& c : f.components) comps.push_back(json{{"name", c.name}, {"attribute_words", c.attribute_words}});
  json regions = json::array();
  for (const auto& r : f.regions) {
    regions.push_back(json{{"component", r.component}, {"row", r.row}, {"col", r.col}, {"rows", r.rows}, {"cols", r.cols}});
  }
  json j{{"category", f.category},
         {"mfsc", f.mfsc_fixture},
         {"height", f.height},
         {"width", f.width},
         {"components", comps},
         {"regions", regions},
         {"jitter", f.jitter},
         {"attribute_stddev", f.attribute_stddev},
         {"defect_words", f.defect_words},
         {"defect_semantic_weight", f.defect_semantic_weight},
         {"defect_min", f.defect_min},
         {"defect_max", f.defect_max}};
  return j.dump(2) + "\n";
}

CategoryFixture load_fixture(const std::filesystem::path& path) { return fixture_from_json(read_file_bytes(path)); }

SyntheticScene make_normal_scene(const CategoryFixture& fixture, const EncoderSpec& spec, std::uint64_t seed,
                                 std::string_view role, int index) {
  return base_scene(fixture, spec, seed, role, index);
}

SyntheticScene make_anomalous_scene(const CategoryFixture& fixture, const EncoderSpec& spec, std::uint64_t seed,
                                    std::string_view role, int index, double magnitude) {
  if (!(magnitude >= 0.0)) throw DomainError("make_anomalous_scene: negative magnitude");
  SyntheticScene s = base_scene(fixture, spec, seed, role, index);
  Rng rng = scene_rng(seed, role, index, "defect");
  std::uniform_int_distribution<int> size_dist(fixture.defect_min, fixture.defect_max);
  const int side = size_dist(rng);
  std::uniform_int_distribution<int> row_dist(0, fixture.height - 1);
  std::uniform_int_distribution<int> col_dist(0, fixture.width - 1);
  const int r0 = row_dist(rng);
  const int c0 = col_dist(rng);

  const int d = spec.feature_dim;
  std::normal_distribution<double> g(0.0, 1.0);
  FeatVec random_dir(d);
  for (int k = 0; k < d; ++k) random_dir[k] = g(rng);
  random_dir.normalize();
  FeatVec direction = random_dir;
  if (fixture.defect_semantic_weight > 0.0 && !fixture.defect_words.empty()) {
    const TextEncoder text(spec);
    FeatVec semantic = FeatVec::Zero(d);
    for (const auto& phrase : fixture.defect_words)
      for (const auto& w : tokenize_words(phrase)) semantic += text.concept_vector(w);
    if (semantic.norm() > 0.0) {
      direction = fixture.defect_semantic_weight * semantic.normalized() +
                  (1.0 - fixture.defect_semantic_weight) * random_dir;
      direction.normalize();
    }
  }
  // The patch wraps around the grid edges, so every cell is equally likely to be hit.
  for (int i = r0; i < r0 + side; ++i) {
    for (int j = c0; j < c0 + side; ++j) {
      SceneCell& cell = s.cell(i % fixture.height, j % fixture.width);
      cell.anomaly_flag = true;
      cell.anomaly_perturbation = magnitude * direction;
    }
  }
  return s;
}

std::vector<SyntheticScene> make_shots(const CategoryFixture& fixture, const EncoderSpec& spec, int k,
                                       std::uint64_t seed) {
  if (k < 1) throw DomainError("make_shots: k must be >= 1");
  std::vector<SyntheticScene> out;
  for (int i = 0; i < k; ++i) out.push_back(make_normal_scene(fixture, spec, seed, "shot", i));
  return out;
}

std::vector<LabeledScene> make_test_suite(const CategoryFixture& fixture, const EncoderSpec& spec,
                                          const SuiteConfig& cfg) {
  if (cfg.normal_count < 0 || cfg.anomalous_count < 0) throw DomainError("make_test_suite: negative count");
  const double magnitude = cfg.magnitude_sigmas * spec.noise_sigma;
  std::vector<LabeledScene> out;
  out.reserve(static_cast<std::size_t>(cfg.normal_count + cfg.anomalous_count));
  for (int i = 0; i < cfg.normal_count; ++i) {
    out.push_back({make_normal_scene(fixture, spec, cfg.seed, "test-normal", i), false});
  }
  for (int i = 0; i < cfg.anomalous_count; ++i) {
    out.push_back({make_anomalous_scene(fixture, spec, cfg.seed, "test-anomalous", i, magnitude), true});
  }
  return out;
}

}  // namespace fgad::synthetic
