// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic synthetic encoder pair. Text and image sides share one
// concept space: a word's concept vector is W * embedding(word), and a scene
// component's visual prototype is built from the concept vectors of the
// words that describe it. This gives desk-scale experiments a ground truth
// in which captions and image regions are genuinely related.

#include "fgad/numeric.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fgad {

struct EncoderSpec {
  std::uint64_t seed = 0;
  int feature_dim = 512;          ///< d
  int token_embedding_dim = 128;  ///< e
  int attribute_dim = 8;          ///< a, length of per-cell attribute vectors
  double noise_sigma = 0.0;       ///< expected norm of per-token noise

  // Synthetic-world shape. Both modalities carry a shared direction u; the
  // text bias is text_bias*u and every image token gets image_offset*u.
  double text_bias = 0.35;
  double image_offset = 0.6;
  double attribute_visibility = 0.15;  ///< weight of attribute words in a visual prototype
  // Defect axis: a reserved embedding direction carried only by defect_words
  // (with weight defect_axis_weight). Every other word embedding is orthogonal
  // to it, and normal image tokens sit at -defect_contrast along its image in
  // feature space.
  std::vector<std::string> defect_words = {"damaged", "broken", "defect", "flaw", "abnormal", "without"};
  double defect_axis_weight = 1.0;
  double defect_contrast = 0.5;

  void validate() const;
  bool operator==(const EncoderSpec&) const = default;
};

std::string encoder_spec_to_json(const EncoderSpec& spec);
/// Missing keys keep their defaults.
EncoderSpec encoder_spec_from_json(std::string_view text);

/// Lowercases, splits on whitespace and strips surrounding punctuation.
std::vector<std::string> tokenize_words(std::string_view text);

enum class Resolution { Native, HighRes };

struct TokenGrid {
  int height = 0;
  int width = 0;
  FeatMat tokens;  ///< (height*width) x d, row-major token order
  FeatVec class_token;
  Resolution resolution = Resolution::Native;

  int token_count() const noexcept { return height * width; }
  int dim() const noexcept { return static_cast<int>(tokens.cols()); }
  FeatVec token(int index) const { return tokens.row(index).transpose(); }
  FeatVec token(int row, int col) const { return token(row * width + col); }

  /// Throws DomainError if shapes disagree or any vector is off the unit sphere.
  void validate(double tol = 1e-6) const;

  bool operator==(const TokenGrid& other) const;
};

/// Frozen text encoder: output = l2_normalize(W * mean(sequence) + b), with W
/// having orthonormal columns.
class TextEncoder {
 public:
  explicit TextEncoder(const EncoderSpec& spec);

  const EncoderSpec& spec() const noexcept { return spec_; }
  int feature_dim() const noexcept { return spec_.feature_dim; }
  int embedding_dim() const noexcept { return spec_.token_embedding_dim; }

  /// Fixed token embedding of a word (seeded, norm close to 1).
  FeatVec embedding(const std::string& word) const;
  /// W * embedding(word): where the word lives in feature space.
  FeatVec concept_vector(const std::string& word) const;

  const Eigen::MatrixXd& projection() const noexcept { return projection_; }
  const FeatVec& bias() const noexcept { return bias_; }
  const FeatVec& shared_direction() const noexcept { return shared_direction_; }
  /// Unit feature direction of the defect axis (W times the embedding axis).
  const FeatVec& defect_direction() const noexcept { return defect_direction_; }
  bool is_defect_word(const std::string& word) const;

  struct Forward {
    FeatVec mean;      ///< e
    FeatVec pre_norm;  ///< W*mean + b
    double norm = 0.0;
    FeatVec output;    ///< unit feature
    std::size_t length = 0;
  };

  Forward forward(const std::vector<FeatVec>& sequence) const;
  FeatVec encode(const std::vector<FeatVec>& sequence) const { return forward(sequence).output; }

  /// d(output)/d(mean) applied to a tangent of the mean embedding.
  FeatVec jvp_mean(const Forward& fwd, const FeatVec& d_mean) const;
  /// Gradient with respect to the mean embedding given dL/d(output).
  FeatVec vjp_mean(const Forward& fwd, const FeatVec& grad_output) const;

 private:
  EncoderSpec spec_;
  Eigen::MatrixXd projection_;  ///< d x e
  FeatVec bias_;
  FeatVec shared_direction_;
  FeatVec defect_axis_;  ///< unit, embedding space
  FeatVec defect_direction_;

  struct Cache;
  std::shared_ptr<Cache> cache_;
};

/// One scene component (index = component id, 0 = background).
struct SceneComponent {
  std::string name;
  std::vector<std::string> attribute_words;

  bool operator==(const SceneComponent&) const = default;
};

struct SceneCell {
  int component_id = 0;
  FeatVec attribute_vector;
  bool anomaly_flag = false;
  std::optional<FeatVec> anomaly_perturbation;

  bool operator==(const SceneCell& o) const;
};

struct SyntheticScene {
  std::string category;
  int height = 0;
  int width = 0;
  std::uint64_t noise_seed = 0;
  std::vector<SceneComponent> components;
  std::vector<SceneCell> cells;  ///< row-major

  const SceneCell& cell(int row, int col) const { return cells[static_cast<std::size_t>(row) * width + col]; }
  SceneCell& cell(int row, int col) { return cells[static_cast<std::size_t>(row) * width + col]; }
  int foreground_component_count() const noexcept { return static_cast<int>(components.size()) - 1; }

  void validate() const;
  /// Ground-truth component id per cell.
  std::vector<int> layout() const;
  /// Anomaly flag per cell.
  std::vector<bool> anomaly_mask() const;

  bool operator==(const SyntheticScene&) const = default;
};

std::string scene_to_json(const SyntheticScene& scene);
SyntheticScene scene_from_json(std::string_view text);

/// Synthetic image encoder producing unit-norm token grids.
class ImageEncoder {
 public:
  explicit ImageEncoder(const EncoderSpec& spec);
  ImageEncoder(const EncoderSpec& spec, std::shared_ptr<const TextEncoder> text);

  const EncoderSpec& spec() const noexcept { return spec_; }

  TokenGrid encode_scene(const SyntheticScene& scene) const;
  /// Nearest-neighbor upsample by factor, encode factor x factor tiles
  /// independently and reassemble.
  TokenGrid encode_scene_highres(const SyntheticScene& scene, int factor = 4) const;

  /// Unit-norm visual prototype of a component.
  FeatVec prototype(const SceneComponent& component, int component_id) const;

 private:
  TokenGrid encode_with_noise_seed(const SyntheticScene& scene, std::uint64_t noise_seed) const;

  EncoderSpec spec_;
  std::shared_ptr<const TextEncoder> text_;
  Eigen::MatrixXd attribute_projection_;  ///< d x a
};

TokenGrid encode_scene(const SyntheticScene& scene, const EncoderSpec& spec);
TokenGrid encode_scene_highres(const SyntheticScene& scene, const EncoderSpec& spec, int factor = 4);
FeatVec encode_text(const std::vector<FeatVec>& sequence, const EncoderSpec& spec);

/// Nearest-neighbor upsampling of a scene's cell grid. Used for high-res
/// encoding and for high-res ground truth.
SyntheticScene upsample_scene(const SyntheticScene& scene, int factor);

}  // namespace fgad
