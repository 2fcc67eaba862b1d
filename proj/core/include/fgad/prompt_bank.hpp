// SPDX-License-Identifier: Apache-2.0
#pragma once

// Three-level prompt construction from an MFSC document, learnable
// placeholder parameters with per-slot Attr-MoE gates, and prompt encoding
// through the frozen text encoder.

#include "fgad/encoder.hpp"
#include "fgad/mfsc.hpp"
#include "fgad/numeric.hpp"

#include <compare>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace fgad::prompts {

struct PromptLevel {
  enum class Kind { Image = 0, Foreground = 1, Background = 2, Component = 3 };

  Kind kind = Kind::Image;
  int component = -1;  ///< valid only for Kind::Component

  static PromptLevel image() { return {Kind::Image, -1}; }
  static PromptLevel foreground() { return {Kind::Foreground, -1}; }
  static PromptLevel background() { return {Kind::Background, -1}; }
  static PromptLevel component_level(int index) { return {Kind::Component, index}; }

  bool is_component() const noexcept { return kind == Kind::Component; }
  std::string name() const;

  auto operator<=>(const PromptLevel&) const = default;
};

enum class Polarity { NormalHandcrafted, AbnormalHandcrafted, AbnormalLearnable };

std::string_view to_string(Polarity p);

struct FixedWord {
  std::string word;
  bool operator==(const FixedWord&) const = default;
};

struct Placeholder {
  int slot_id = 0;
  bool operator==(const Placeholder&) const = default;
};

using PromptToken = std::variant<FixedWord, Placeholder>;

struct PromptTemplate {
  std::vector<PromptToken> tokens;
  PromptLevel level;
  Polarity polarity = Polarity::NormalHandcrafted;
  std::string origin;  ///< how it was derived, e.g. "concat:broken" or "replace:color"

  std::vector<int> slots() const;
  /// Words joined by spaces, placeholders rendered as "[P<slot>]".
  std::string text() const;

  bool operator==(const PromptTemplate&) const = default;
};

/// Feature bank for one level, filled by encode_all.
struct LevelBank {
  std::vector<FeatVec> normal;      ///< NHP features
  std::vector<FeatVec> handcrafted; ///< AHP features
  std::vector<FeatVec> learnable;   ///< ALP features
  FeatVec mean_normal;              ///< normalized mean of NHPs
  FeatVec mean_abnormal;            ///< normalized mean of AHPs and ALPs
};

inline const std::vector<std::string> kDefaultAnomalyWords = {"damaged", "broken", "with defect", "with flaw",
                                                              "abnormal"};
inline constexpr int kDefaultAbnormalLearnable = 4;

struct PromptSet {
  std::vector<PromptTemplate> templates;
  int n_ab = kDefaultAbnormalLearnable;
  int component_count = 0;
  std::map<PromptLevel, LevelBank> banks;

  /// Every level that carries prompts: image, foreground, background, components.
  std::vector<PromptLevel> levels() const;
  /// Levels that have abnormal prompts (all except background).
  std::vector<PromptLevel> trained_levels() const;
  std::vector<std::size_t> indices(const PromptLevel& level, Polarity polarity) const;
  const LevelBank& bank(const PromptLevel& level) const;
  bool encoded() const noexcept { return !banks.empty(); }
  /// The single background NHP feature.
  const FeatVec& background_feature() const;
};

/// Deterministic given its inputs. Throws DomainError on empty components,
/// empty anomaly words or n_ab < 1. A level caption without words falls back
/// to the category, the component name or the level keyword.
PromptSet build_prompt_set(const mfsc::MFSCDocument& doc, const std::vector<std::string>& anomaly_words, int n_ab,
                           std::uint64_t seed);

/// Learnable parameters: placeholder embeddings for every slot and raw
/// Attr-MoE gates for component-level slots (effective gate = sigmoid(raw)).
/// Flat ordering is embeddings by ascending slot, then gates by ascending slot.
struct PromptParameters {
  std::map<int, FeatVec> embeddings;
  std::map<int, double> raw_gates;

  static constexpr double kInitStddev = 0.02;

  static PromptParameters initialize(const PromptSet& set, int embedding_dim, std::uint64_t seed);
  PromptParameters zeros_like() const;

  std::size_t size() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  /// Human-readable name of flat coordinate i ("slot[3][17]" / "gate[5]").
  std::string coordinate_name(std::size_t i) const;
  /// this += alpha * other (same structure).
  void add_scaled(const PromptParameters& other, double alpha);
  bool all_finite() const;

  bool operator==(const PromptParameters&) const = default;
};

/// Forward trace kept for backpropagation.
struct EncodedPrompt {
  TextEncoder::Forward forward;
  FeatVec feature() const { return forward.output; }
};

EncodedPrompt encode_prompt_traced(const PromptTemplate& t, const PromptParameters& params, const TextEncoder& enc);
FeatVec encode_prompt(const PromptTemplate& t, const PromptParameters& params, const TextEncoder& enc);

/// Accumulates dL/d(params) into grads given dL/d(feature of t).
void backprop_prompt(const PromptTemplate& t, const EncodedPrompt& encoded, const PromptParameters& params,
                     const TextEncoder& enc, const FeatVec& grad_feature, PromptParameters& grads);

/// Fills every level bank and the level means.
void encode_all(PromptSet& set, const PromptParameters& params, const TextEncoder& enc);
/// Same as encode_all, also returning the per-template traces (index-aligned with set.templates).
std::vector<EncodedPrompt> encode_all_traced(PromptSet& set, const PromptParameters& params, const TextEncoder& enc);

std::string prompts_to_json(const PromptSet& set);
PromptSet prompts_from_json(std::string_view text);

std::string parameters_to_json(const PromptParameters& params);
PromptParameters parameters_from_json(std::string_view text);

}  // namespace fgad::prompts
