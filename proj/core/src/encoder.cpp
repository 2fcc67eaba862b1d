// SPDX-License-Identifier: Apache-2.0
#include "fgad/encoder.hpp"

#include "fgad/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>
#include <unordered_map>

namespace fgad {
namespace {

FeatVec gaussian_vector(Rng& rng, int n, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  FeatVec v(n);
  for (int i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

Eigen::MatrixXd gaussian_matrix(Rng& rng, int rows, int cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  // Fill in row-major order so the stream layout does not depend on Eigen's storage.
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

FeatVec mean_rows_normalized(const FeatMat& rows) {
  return l2_normalize(rows.colwise().mean().transpose());
}

}  // namespace

void EncoderSpec::validate() const {
  if (feature_dim < 8 || token_embedding_dim < 8) {
    throw DomainError("EncoderSpec: feature_dim and token_embedding_dim must be >= 8");
  }
  if (attribute_dim < 1) throw DomainError("EncoderSpec: attribute_dim must be >= 1");
  if (!(noise_sigma >= 0.0)) throw DomainError("EncoderSpec: noise_sigma must be >= 0");
  if (token_embedding_dim > feature_dim) throw DomainError("EncoderSpec: token_embedding_dim must be <= feature_dim");
  if (!(defect_contrast >= 0.0) || !(defect_axis_weight >= 0.0)) {
    throw DomainError("EncoderSpec: defect_contrast and defect_axis_weight must be >= 0");
  }
}

std::string encoder_spec_to_json(const EncoderSpec& spec) {
  const nlohmann::json j{{"seed", spec.seed},
                         {"feature_dim", spec.feature_dim},
                         {"token_embedding_dim", spec.token_embedding_dim},
                         {"attribute_dim", spec.attribute_dim},
                         {"noise_sigma", spec.noise_sigma},
                         {"text_bias", spec.text_bias},
                         {"image_offset", spec.image_offset},
                         {"attribute_visibility", spec.attribute_visibility},
                         {"defect_words", spec.defect_words},
                         {"defect_axis_weight", spec.defect_axis_weight},
                         {"defect_contrast", spec.defect_contrast}};
  return j.dump(2) + "\n";
}

EncoderSpec encoder_spec_from_json(std::string_view text) {
  EncoderSpec s;
  try {
    const auto j = nlohmann::json::parse(text.begin(), text.end());
    s.seed = j.value("seed", s.seed);
    s.feature_dim = j.value("feature_dim", s.feature_dim);
    s.token_embedding_dim = j.value("token_embedding_dim", s.token_embedding_dim);
    s.attribute_dim = j.value("attribute_dim", s.attribute_dim);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.text_bias = j.value("text_bias", s.text_bias);
    s.image_offset = j.value("image_offset", s.image_offset);
    s.attribute_visibility = j.value("attribute_visibility", s.attribute_visibility);
    s.defect_words = j.value("defect_words", s.defect_words);
    s.defect_axis_weight = j.value("defect_axis_weight", s.defect_axis_weight);
    s.defect_contrast = j.value("defect_contrast", s.defect_contrast);
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(std::string("encoder spec JSON: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    std::size_t b = 0;
    std::size_t e = current.size();
    auto punct = [](unsigned char ch) { return std::ispunct(ch) && ch != '-' && ch != '_'; };
    while (b < e && punct(static_cast<unsigned char>(current[b]))) ++b;
    while (e > b && punct(static_cast<unsigned char>(current[e - 1]))) --e;
    if (e > b) words.push_back(current.substr(b, e - b));
    current.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return words;
}

void TokenGrid::validate(double tol) const {
  if (height <= 0 || width <= 0) throw DomainError("TokenGrid: empty grid");
  if (tokens.rows() != static_cast<Eigen::Index>(height) * width) {
    throw DomainError("TokenGrid: token count != h*w");
  }
  if (class_token.size() != tokens.cols()) throw DomainError("TokenGrid: class token dimension mismatch");
  for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
    if (std::abs(tokens.row(i).norm() - 1.0) > tol) throw DomainError("TokenGrid: token not unit norm");
  }
  if (!is_unit_norm(class_token, tol)) throw DomainError("TokenGrid: class token not unit norm");
}

bool TokenGrid::operator==(const TokenGrid& o) const {
  return height == o.height && width == o.width && resolution == o.resolution &&
         tokens.rows() == o.tokens.rows() && tokens.cols() == o.tokens.cols() && tokens == o.tokens &&
         class_token.size() == o.class_token.size() && class_token == o.class_token;
}

struct TextEncoder::Cache {
  std::mutex mutex;
  std::unordered_map<std::string, FeatVec> embeddings;
};

TextEncoder::TextEncoder(const EncoderSpec& spec) : spec_(spec), cache_(std::make_shared<Cache>()) {
  spec_.validate();
  const int d = spec_.feature_dim;
  const int e = spec_.token_embedding_dim;
  Rng proj_rng = derive_rng(spec_.seed, "text/projection");
  const Eigen::MatrixXd g = gaussian_matrix(proj_rng, d, e, 1.0);
  projection_ = g.householderQr().householderQ() * Eigen::MatrixXd::Identity(d, e);
  Rng axis_rng = derive_rng(spec_.seed, "text/defect-axis");
  defect_axis_ = l2_normalize(gaussian_vector(axis_rng, e, 1.0));
  defect_direction_ = projection_ * defect_axis_;
  Rng dir_rng = derive_rng(spec_.seed, "shared-direction");
  FeatVec u = gaussian_vector(dir_rng, d, 1.0);
  u -= defect_direction_ * defect_direction_.dot(u);
  shared_direction_ = l2_normalize(u);
  bias_ = spec_.text_bias * shared_direction_;
}

bool TextEncoder::is_defect_word(const std::string& word) const {
  return std::find(spec_.defect_words.begin(), spec_.defect_words.end(), word) != spec_.defect_words.end();
}

FeatVec TextEncoder::embedding(const std::string& word) const {
  {
    std::lock_guard lock(cache_->mutex);
    auto it = cache_->embeddings.find(word);
    if (it != cache_->embeddings.end()) return it->second;
  }
  Rng rng = derive_rng(spec_.seed ^ 0x5eedULL, "word/" + word);
  FeatVec v = gaussian_vector(rng, spec_.token_embedding_dim,
                              1.0 / std::sqrt(static_cast<double>(spec_.token_embedding_dim)));
  v -= defect_axis_ * defect_axis_.dot(v);
  if (is_defect_word(word)) v += spec_.defect_axis_weight * defect_axis_;
  std::lock_guard lock(cache_->mutex);
  return cache_->embeddings.emplace(word, std::move(v)).first->second;
}

FeatVec TextEncoder::concept_vector(const std::string& word) const { return projection_ * embedding(word); }

TextEncoder::Forward TextEncoder::forward(const std::vector<FeatVec>& sequence) const {
  if (sequence.empty()) throw DomainError("encode_text: empty token sequence");
  Forward f;
  f.length = sequence.size();
  f.mean = FeatVec::Zero(spec_.token_embedding_dim);
  for (const auto& x : sequence) {
    if (x.size() != spec_.token_embedding_dim) {
      throw DomainError("encode_text: token embedding dimension mismatch");
    }
    f.mean += x;
  }
  f.mean /= static_cast<double>(sequence.size());
  f.pre_norm = projection_ * f.mean + bias_;
  f.norm = f.pre_norm.norm();
  if (!(f.norm > 0.0) || !std::isfinite(f.norm)) throw DomainError("encode_text: degenerate encoding");
  f.output = f.pre_norm / f.norm;
  return f;
}

FeatVec TextEncoder::jvp_mean(const Forward& fwd, const FeatVec& d_mean) const {
  const FeatVec du = projection_ * d_mean;
  return (du - fwd.output * fwd.output.dot(du)) / fwd.norm;
}

FeatVec TextEncoder::vjp_mean(const Forward& fwd, const FeatVec& grad_output) const {
  const FeatVec gu = (grad_output - fwd.output * fwd.output.dot(grad_output)) / fwd.norm;
  return projection_.transpose() * gu;
}

bool SceneCell::operator==(const SceneCell& o) const {
  if (component_id != o.component_id || anomaly_flag != o.anomaly_flag) return false;
  if (attribute_vector.size() != o.attribute_vector.size() || attribute_vector != o.attribute_vector) return false;
  if (anomaly_perturbation.has_value() != o.anomaly_perturbation.has_value()) return false;
  if (anomaly_perturbation) {
    return anomaly_perturbation->size() == o.anomaly_perturbation->size() &&
           *anomaly_perturbation == *o.anomaly_perturbation;
  }
  return true;
}

void SyntheticScene::validate() const {
  if (height <= 0 || width <= 0) throw DomainError("SyntheticScene: empty grid");
  if (cells.size() != static_cast<std::size_t>(height) * width) {
    throw DomainError("SyntheticScene: cell count != height*width");
  }
  if (components.empty()) throw DomainError("SyntheticScene: component 0 (background) is required");
  for (const auto& c : cells) {
    if (c.component_id < 0 || c.component_id >= static_cast<int>(components.size())) {
      throw DomainError("SyntheticScene: component id outside 0..Nc");
    }
    if (c.anomaly_flag != c.anomaly_perturbation.has_value()) {
      throw DomainError("SyntheticScene: anomaly_perturbation must be present iff anomaly_flag");
    }
  }
}

std::vector<int> SyntheticScene::layout() const {
  std::vector<int> out;
  out.reserve(cells.size());
  for (const auto& c : cells) out.push_back(c.component_id);
  return out;
}

std::vector<bool> SyntheticScene::anomaly_mask() const {
  std::vector<bool> out;
  out.reserve(cells.size());
  for (const auto& c : cells) out.push_back(c.anomaly_flag);
  return out;
}

std::string scene_to_json(const SyntheticScene& scene) {
  using nlohmann::json;
  json comps = json::array();
  for (const auto& c : scene.components) {
    comps.push_back(json{{"name", c.name}, {"attribute_words", c.attribute_words}});
  }
  json ids = json::array();
  json attrs = json::array();
  json anomalies = json::array();
  for (std::size_t i = 0; i < scene.cells.size(); ++i) {
    const auto& c = scene.cells[i];
    ids.push_back(c.component_id);
    attrs.push_back(std::vector<double>(c.attribute_vector.data(), c.attribute_vector.data() + c.attribute_vector.size()));
    if (c.anomaly_flag) {
      const FeatVec& p = *c.anomaly_perturbation;
      anomalies.push_back(json{{"cell", i}, {"perturbation", std::vector<double>(p.data(), p.data() + p.size())}});
    }
  }
  json j{{"category", scene.category},     {"height", scene.height},   {"width", scene.width},
         {"noise_seed", scene.noise_seed}, {"components", comps},      {"component_ids", ids},
         {"attribute_vectors", attrs},     {"anomalies", anomalies}};
  return j.dump() + "\n";
}

SyntheticScene scene_from_json(std::string_view text) {
  using nlohmann::json;
  SyntheticScene s;
  try {
    const json j = json::parse(text.begin(), text.end());
    s.category = j.at("category").get<std::string>();
    s.height = j.at("height").get<int>();
    s.width = j.at("width").get<int>();
    s.noise_seed = j.at("noise_seed").get<std::uint64_t>();
    for (const auto& c : j.at("components")) {
      s.components.push_back({c.at("name").get<std::string>(), c.at("attribute_words").get<std::vector<std::string>>()});
    }
    const auto ids = j.at("component_ids").get<std::vector<int>>();
    const auto attrs = j.at("attribute_vectors").get<std::vector<std::vector<double>>>();
    if (ids.size() != attrs.size()) throw DomainError("scene: component_ids and attribute_vectors differ in length");
    s.cells.resize(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      s.cells[i].component_id = ids[i];
      s.cells[i].attribute_vector = Eigen::Map<const FeatVec>(attrs[i].data(), static_cast<Eigen::Index>(attrs[i].size()));
    }
    for (const auto& a : j.at("anomalies")) {
      const auto idx = a.at("cell").get<std::size_t>();
      if (idx >= s.cells.size()) throw DomainError("scene: anomaly cell index out of range");
      const auto p = a.at("perturbation").get<std::vector<double>>();
      s.cells[idx].anomaly_flag = true;
      s.cells[idx].anomaly_perturbation = Eigen::Map<const FeatVec>(p.data(), static_cast<Eigen::Index>(p.size()));
    }
  } catch (const json::exception& e) {
    throw DomainError(std::string("scene JSON: ") + e.what());
  }
  s.validate();
  return s;
}

ImageEncoder::ImageEncoder(const EncoderSpec& spec)
    : ImageEncoder(spec, std::make_shared<const TextEncoder>(spec)) {}

ImageEncoder::ImageEncoder(const EncoderSpec& spec, std::shared_ptr<const TextEncoder> text)
    : spec_(spec), text_(std::move(text)) {
  spec_.validate();
  Rng rng = derive_rng(spec_.seed, "image/attribute-projection");
  attribute_projection_ = gaussian_matrix(rng, spec_.feature_dim, spec_.attribute_dim,
                                          1.0 / std::sqrt(static_cast<double>(spec_.feature_dim)));
  const FeatVec& f = text_->defect_direction();
  attribute_projection_ -= f * (f.transpose() * attribute_projection_);
}

FeatVec ImageEncoder::prototype(const SceneComponent& component, int component_id) const {
  FeatVec p = FeatVec::Zero(spec_.feature_dim);
  for (const auto& w : tokenize_words(component.name)) p += text_->concept_vector(w);
  for (const auto& attr : component.attribute_words) {
    for (const auto& w : tokenize_words(attr)) p += spec_.attribute_visibility * text_->concept_vector(w);
  }
  if (p.norm() == 0.0) {
    Rng rng = derive_rng(spec_.seed, "image/anonymous-component", {static_cast<std::uint64_t>(component_id)});
    p = gaussian_vector(rng, spec_.feature_dim, 1.0);
  }
  return l2_normalize(p);
}

TokenGrid ImageEncoder::encode_with_noise_seed(const SyntheticScene& scene, std::uint64_t noise_seed) const {
  scene.validate();
  const int d = spec_.feature_dim;
  std::vector<FeatVec> prototypes;
  prototypes.reserve(scene.components.size());
  for (std::size_t c = 0; c < scene.components.size(); ++c) {
    prototypes.push_back(prototype(scene.components[c], static_cast<int>(c)));
  }
  const FeatVec offset = spec_.image_offset * text_->shared_direction() - spec_.defect_contrast * text_->defect_direction();
  const double noise_std = spec_.noise_sigma / std::sqrt(static_cast<double>(d));

  TokenGrid grid;
  grid.height = scene.height;
  grid.width = scene.width;
  grid.resolution = Resolution::Native;
  grid.tokens.resize(static_cast<Eigen::Index>(scene.cells.size()), d);
  for (std::size_t i = 0; i < scene.cells.size(); ++i) {
    const SceneCell& cell = scene.cells[i];
    if (cell.attribute_vector.size() != spec_.attribute_dim) {
      throw DomainError("encode_scene: attribute vector dimension mismatch");
    }
    FeatVec v = offset + prototypes[static_cast<std::size_t>(cell.component_id)] +
                attribute_projection_ * cell.attribute_vector;
    if (cell.anomaly_flag) {
      if (cell.anomaly_perturbation->size() != d) {
        throw DomainError("encode_scene: anomaly perturbation dimension mismatch");
      }
      v += *cell.anomaly_perturbation;
    }
    if (noise_std > 0.0) {
      Rng rng = derive_rng(spec_.seed, "image/noise", {noise_seed, static_cast<std::uint64_t>(i)});
      v += gaussian_vector(rng, d, noise_std);
    }
    grid.tokens.row(static_cast<Eigen::Index>(i)) = l2_normalize(v).transpose();
  }
  grid.class_token = mean_rows_normalized(grid.tokens);
  return grid;
}

TokenGrid ImageEncoder::encode_scene(const SyntheticScene& scene) const {
  return encode_with_noise_seed(scene, scene.noise_seed);
}

SyntheticScene upsample_scene(const SyntheticScene& scene, int factor) {
  if (factor < 1) throw DomainError("upsample_scene: factor must be >= 1");
  SyntheticScene up;
  up.category = scene.category;
  up.height = scene.height * factor;
  up.width = scene.width * factor;
  up.noise_seed = scene.noise_seed;
  up.components = scene.components;
  up.cells.reserve(static_cast<std::size_t>(up.height) * up.width);
  for (int r = 0; r < up.height; ++r) {
    for (int c = 0; c < up.width; ++c) up.cells.push_back(scene.cell(r / factor, c / factor));
  }
  return up;
}

TokenGrid ImageEncoder::encode_scene_highres(const SyntheticScene& scene, int factor) const {
  if (factor < 1) throw DomainError("encode_scene_highres: factor must be >= 1");
  if (factor == 1) return encode_scene(scene);
  scene.validate();
  const SyntheticScene up = upsample_scene(scene, factor);
  const int h = scene.height;
  const int w = scene.width;
  TokenGrid grid;
  grid.height = up.height;
  grid.width = up.width;
  grid.resolution = Resolution::HighRes;
  grid.tokens.resize(static_cast<Eigen::Index>(up.height) * up.width, spec_.feature_dim);
  FeatMat tile_classes(factor * factor, spec_.feature_dim);

  for (int ti = 0; ti < factor; ++ti) {
    for (int tj = 0; tj < factor; ++tj) {
      SyntheticScene tile;
      tile.category = scene.category;
      tile.height = h;
      tile.width = w;
      tile.components = scene.components;
      tile.cells.reserve(static_cast<std::size_t>(h) * w);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) tile.cells.push_back(up.cell(ti * h + r, tj * w + c));
      Rng seed_rng = derive_rng(scene.noise_seed, "image/tile",
                                {static_cast<std::uint64_t>(ti), static_cast<std::uint64_t>(tj)});
      const TokenGrid encoded = encode_with_noise_seed(tile, seed_rng());
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          grid.tokens.row(static_cast<Eigen::Index>(ti * h + r) * up.width + tj * w + c) =
              encoded.tokens.row(static_cast<Eigen::Index>(r) * w + c);
        }
      }
      tile_classes.row(ti * factor + tj) = encoded.class_token.transpose();
    }
  }
  grid.class_token = mean_rows_normalized(tile_classes);
  return grid;
}

TokenGrid encode_scene(const SyntheticScene& scene, const EncoderSpec& spec) {
  return ImageEncoder(spec).encode_scene(scene);
}

TokenGrid encode_scene_highres(const SyntheticScene& scene, const EncoderSpec& spec, int factor) {
  return ImageEncoder(spec).encode_scene_highres(scene, factor);
}

FeatVec encode_text(const std::vector<FeatVec>& sequence, const EncoderSpec& spec) {
  return TextEncoder(spec).encode(sequence);
}

}  // namespace fgad
