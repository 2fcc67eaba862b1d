// SPDX-License-Identifier: Apache-2.0
#include "fgad/prompt_bank.hpp"

#include "fgad/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace fgad::prompts {
namespace {

using nlohmann::json;

struct Occurrence {
  int component = 0;
  std::string attribute;
  std::string value;
  std::size_t start = 0;
  std::size_t length = 0;
  bool found = true;
  const std::vector<std::string>* vocabulary = nullptr;
  std::vector<std::string> current_values;
};

std::vector<PromptToken> fixed_tokens(const std::vector<std::string>& words) {
  std::vector<PromptToken> out;
  out.reserve(words.size());
  for (const auto& w : words) out.emplace_back(FixedWord{w});
  return out;
}

// Every base-value span of the component's attributes inside the text.
// Earlier claims win when spans overlap.
void find_spans(const std::vector<std::string>& words, int component_index, const mfsc::MFSCDocument& doc,
                std::vector<bool>& claimed, std::vector<Occurrence>& out) {
  const auto& component = doc.components[static_cast<std::size_t>(component_index)];
  for (const auto& [attr, value] : component.attributes) {
    auto vocab = doc.attribute_vocabulary.find(attr);
    for (const auto& base : value.base_values) {
      const auto needle = tokenize_words(base);
      if (needle.empty() || needle.size() > words.size()) continue;
      for (std::size_t s = 0; s + needle.size() <= words.size(); ++s) {
        bool match = true;
        for (std::size_t k = 0; k < needle.size() && match; ++k) {
          match = !claimed[s + k] && words[s + k] == needle[k];
        }
        if (!match) continue;
        for (std::size_t k = 0; k < needle.size(); ++k) claimed[s + k] = true;
        out.push_back({component_index, attr, base, s, needle.size(), true,
                       vocab == doc.attribute_vocabulary.end() ? nullptr : &vocab->second, value.base_values});
        break;
      }
    }
  }
}

std::vector<Occurrence> spans_for(const std::vector<std::string>& words, const PromptLevel& level,
                                  const mfsc::MFSCDocument& doc) {
  std::vector<bool> claimed(words.size(), false);
  std::vector<Occurrence> out;
  if (level.is_component()) {
    find_spans(words, level.component, doc, claimed, out);
  } else {
    for (int c = 0; c < static_cast<int>(doc.components.size()); ++c) find_spans(words, c, doc, claimed, out);
  }
  std::sort(out.begin(), out.end(), [](const Occurrence& a, const Occurrence& b) { return a.start < b.start; });
  return out;
}

// One replacement target per attribute: its first span in the text. A
// component-level attribute whose value never appears in the caption still
// gets a target, marked not found.
std::vector<Occurrence> replacement_targets(const std::vector<Occurrence>& spans, const PromptLevel& level,
                                            const mfsc::MFSCDocument& doc) {
  std::vector<Occurrence> out;
  auto seen = [&](int c, const std::string& attr) {
    return std::any_of(out.begin(), out.end(),
                       [&](const Occurrence& o) { return o.component == c && o.attribute == attr; });
  };
  for (const auto& s : spans) {
    if (!seen(s.component, s.attribute)) out.push_back(s);
  }
  if (level.is_component()) {
    const auto& component = doc.components[static_cast<std::size_t>(level.component)];
    for (const auto& [attr, value] : component.attributes) {
      if (seen(level.component, attr)) continue;
      auto vocab = doc.attribute_vocabulary.find(attr);
      Occurrence o{level.component, attr, value.base_values.front(), 0, 0, false,
                   vocab == doc.attribute_vocabulary.end() ? nullptr : &vocab->second, value.base_values};
      out.push_back(o);
    }
    std::stable_sort(out.begin(), out.end(), [](const Occurrence& a, const Occurrence& b) {
      return a.attribute < b.attribute;
    });
  }
  return out;
}

std::string replacement_for(const Occurrence& occ, std::uint64_t seed, const PromptLevel& level, std::size_t index) {
  std::vector<std::string> candidates;
  if (occ.vocabulary) {
    for (const auto& v : *occ.vocabulary) {
      if (std::find(occ.current_values.begin(), occ.current_values.end(), v) == occ.current_values.end()) {
        candidates.push_back(v);
      }
    }
  }
  if (candidates.empty()) return "without " + occ.value;
  Rng rng = derive_rng(seed, "replace/" + level.name() + "/" + std::to_string(occ.component) + "/" + occ.attribute, {index});
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

// Words of a level's caption. An empty or punctuation-only caption falls
// back to the category (image, foreground), the component name, or the bare
// level keyword.
std::vector<std::string> level_words(const PromptLevel& level, const std::string& text, const mfsc::MFSCDocument& doc) {
  auto words = tokenize_words(text);
  if (!words.empty()) return words;
  switch (level.kind) {
    case PromptLevel::Kind::Image:
    case PromptLevel::Kind::Foreground: words = tokenize_words(doc.category); break;
    case PromptLevel::Kind::Component:
      words = tokenize_words(doc.components[static_cast<std::size_t>(level.component)].name);
      break;
    case PromptLevel::Kind::Background: break;
  }
  if (!words.empty()) return words;
  static constexpr const char* kKeywords[] = {"image", "foreground", "background", "component"};
  return {kKeywords[static_cast<int>(level.kind)]};
}

void add_level(PromptSet& set, const PromptLevel& level, const std::string& text, const mfsc::MFSCDocument& doc,
               const std::vector<std::vector<std::string>>& anomaly_words, int n_ab, std::uint64_t seed,
               int& next_slot) {
  const auto words = level_words(level, text, doc);

  set.templates.push_back({fixed_tokens(words), level, Polarity::NormalHandcrafted, "caption"});
  if (level.kind == PromptLevel::Kind::Background) return;

  for (std::size_t i = 0; i < anomaly_words.size(); ++i) {
    auto extended = words;
    extended.insert(extended.end(), anomaly_words[i].begin(), anomaly_words[i].end());
    std::string tag;
    for (const auto& w : anomaly_words[i]) tag += (tag.empty() ? "" : " ") + w;
    set.templates.push_back({fixed_tokens(extended), level, Polarity::AbnormalHandcrafted, "concat:" + tag});
  }

  const auto spans = spans_for(words, level, doc);
  const auto targets = replacement_targets(spans, level, doc);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& occ = targets[i];
    const auto replacement = tokenize_words(replacement_for(occ, seed, level, i));
    std::vector<std::string> replaced;
    if (occ.found) {
      replaced.assign(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(occ.start));
      replaced.insert(replaced.end(), replacement.begin(), replacement.end());
      replaced.insert(replaced.end(), words.begin() + static_cast<std::ptrdiff_t>(occ.start + occ.length),
                      words.end());
    } else {
      replaced = words;
      replaced.insert(replaced.end(), replacement.begin(), replacement.end());
    }
    set.templates.push_back({fixed_tokens(replaced), level, Polarity::AbnormalHandcrafted, "replace:" + occ.attribute});
  }

  for (int k = 0; k < n_ab; ++k) {
    std::vector<PromptToken> tokens;
    std::size_t pos = 0;
    for (const auto& occ : spans) {
      for (; pos < occ.start; ++pos) tokens.emplace_back(FixedWord{words[pos]});
      tokens.emplace_back(Placeholder{next_slot++});
      pos = occ.start + occ.length;
    }
    for (; pos < words.size(); ++pos) tokens.emplace_back(FixedWord{words[pos]});
    if (spans.empty()) tokens.emplace_back(Placeholder{next_slot++});
    set.templates.push_back({std::move(tokens), level, Polarity::AbnormalLearnable, "learnable"});
  }
}

FeatVec normalized_mean(const std::vector<const FeatVec*>& vs) {
  FeatVec m = FeatVec::Zero(vs.front()->size());
  for (const auto* v : vs) m += *v;
  return l2_normalize(m / static_cast<double>(vs.size()));
}

json level_to_json(const PromptLevel& l) {
  static constexpr const char* kNames[] = {"image", "foreground", "background", "component"};
  json j{{"kind", kNames[static_cast<int>(l.kind)]}};
  if (l.is_component()) j["component"] = l.component;
  return j;
}

PromptLevel level_from_json(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "image") return PromptLevel::image();
  if (kind == "foreground") return PromptLevel::foreground();
  if (kind == "background") return PromptLevel::background();
  if (kind == "component") return PromptLevel::component_level(j.at("component").get<int>());
  throw DomainError("unknown prompt level kind: " + kind);
}

Polarity polarity_from_string(const std::string& s) {
  if (s == "normal_handcrafted") return Polarity::NormalHandcrafted;
  if (s == "abnormal_handcrafted") return Polarity::AbnormalHandcrafted;
  if (s == "abnormal_learnable") return Polarity::AbnormalLearnable;
  throw DomainError("unknown polarity: " + s);
}

}  // namespace

std::string PromptLevel::name() const {
  switch (kind) {
    case Kind::Image: return "image";
    case Kind::Foreground: return "foreground";
    case Kind::Background: return "background";
    case Kind::Component: return "component[" + std::to_string(component) + "]";
  }
  return "?";
}

std::string_view to_string(Polarity p) {
  switch (p) {
    case Polarity::NormalHandcrafted: return "normal_handcrafted";
    case Polarity::AbnormalHandcrafted: return "abnormal_handcrafted";
    case Polarity::AbnormalLearnable: return "abnormal_learnable";
  }
  return "?";
}

std::vector<int> PromptTemplate::slots() const {
  std::vector<int> out;
  for (const auto& t : tokens) {
    if (const auto* p = std::get_if<Placeholder>(&t)) out.push_back(p->slot_id);
  }
  return out;
}

std::string PromptTemplate::text() const {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    if (const auto* w = std::get_if<FixedWord>(&t)) {
      out += w->word;
    } else {
      out += "[P" + std::to_string(std::get<Placeholder>(t).slot_id) + "]";
    }
  }
  return out;
}

std::vector<PromptLevel> PromptSet::levels() const {
  std::vector<PromptLevel> out = {PromptLevel::image(), PromptLevel::foreground(), PromptLevel::background()};
  for (int c = 0; c < component_count; ++c) out.push_back(PromptLevel::component_level(c));
  return out;
}

std::vector<PromptLevel> PromptSet::trained_levels() const {
  std::vector<PromptLevel> out = {PromptLevel::image(), PromptLevel::foreground()};
  for (int c = 0; c < component_count; ++c) out.push_back(PromptLevel::component_level(c));
  return out;
}

std::vector<std::size_t> PromptSet::indices(const PromptLevel& level, Polarity polarity) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < templates.size(); ++i) {
    if (templates[i].level == level && templates[i].polarity == polarity) out.push_back(i);
  }
  return out;
}

const LevelBank& PromptSet::bank(const PromptLevel& level) const {
  auto it = banks.find(level);
  if (it == banks.end()) throw DomainError("PromptSet: no encoded bank for level " + level.name());
  return it->second;
}

const FeatVec& PromptSet::background_feature() const {
  const auto& b = bank(PromptLevel::background());
  if (b.normal.size() != 1) throw DomainError("PromptSet: expected exactly one background NHP");
  return b.normal.front();
}

PromptSet build_prompt_set(const mfsc::MFSCDocument& doc, const std::vector<std::string>& anomaly_words, int n_ab,
                           std::uint64_t seed) {
  if (doc.components.empty()) throw DomainError("build_prompt_set: document has no components");
  if (anomaly_words.empty()) throw DomainError("build_prompt_set: anomaly word list is empty");
  if (n_ab < 1) throw DomainError("build_prompt_set: N_ab must be >= 1");
  std::vector<std::vector<std::string>> tokenized;
  for (const auto& w : anomaly_words) {
    auto t = tokenize_words(w);
    if (t.empty()) throw DomainError("build_prompt_set: blank anomaly word");
    tokenized.push_back(std::move(t));
  }

  PromptSet set;
  set.n_ab = n_ab;
  set.component_count = static_cast<int>(doc.components.size());
  int next_slot = 0;
  add_level(set, PromptLevel::image(), doc.summary, doc, tokenized, n_ab, seed, next_slot);
  add_level(set, PromptLevel::foreground(), doc.foreground.relation_text, doc, tokenized, n_ab, seed, next_slot);
  add_level(set, PromptLevel::background(), doc.background, doc, tokenized, n_ab, seed, next_slot);
  for (int c = 0; c < set.component_count; ++c) {
    add_level(set, PromptLevel::component_level(c), doc.components[static_cast<std::size_t>(c)].caption_text, doc,
              tokenized, n_ab, seed, next_slot);
  }
  return set;
}

PromptParameters PromptParameters::initialize(const PromptSet& set, int embedding_dim, std::uint64_t seed) {
  PromptParameters p;
  for (const auto& t : set.templates) {
    for (int slot : t.slots()) {
      Rng rng = derive_rng(seed, "placeholder", {static_cast<std::uint64_t>(slot)});
      std::normal_distribution<double> dist(0.0, kInitStddev);
      FeatVec e(embedding_dim);
      for (int k = 0; k < embedding_dim; ++k) e[k] = dist(rng);
      p.embeddings[slot] = std::move(e);
      if (t.level.is_component()) p.raw_gates[slot] = 0.0;
    }
  }
  return p;
}

PromptParameters PromptParameters::zeros_like() const {
  PromptParameters z;
  for (const auto& [slot, e] : embeddings) z.embeddings[slot] = FeatVec::Zero(e.size());
  for (const auto& [slot, g] : raw_gates) z.raw_gates[slot] = 0.0;
  return z;
}

std::size_t PromptParameters::size() const {
  std::size_t n = raw_gates.size();
  for (const auto& [_, e] : embeddings) n += static_cast<std::size_t>(e.size());
  return n;
}

std::vector<double> PromptParameters::flatten() const {
  std::vector<double> out;
  out.reserve(size());
  for (const auto& [_, e] : embeddings) out.insert(out.end(), e.data(), e.data() + e.size());
  for (const auto& [_, g] : raw_gates) out.push_back(g);
  return out;
}

void PromptParameters::assign(std::span<const double> flat) {
  if (flat.size() != size()) throw DomainError("PromptParameters::assign: size mismatch");
  std::size_t i = 0;
  for (auto& [_, e] : embeddings)
    for (Eigen::Index k = 0; k < e.size(); ++k) e[k] = flat[i++];
  for (auto& [_, g] : raw_gates) g = flat[i++];
}

std::string PromptParameters::coordinate_name(std::size_t i) const {
  for (const auto& [slot, e] : embeddings) {
    if (i < static_cast<std::size_t>(e.size())) return "slot[" + std::to_string(slot) + "][" + std::to_string(i) + "]";
    i -= static_cast<std::size_t>(e.size());
  }
  for (const auto& [slot, _] : raw_gates) {
    if (i == 0) return "gate[" + std::to_string(slot) + "]";
    --i;
  }
  return "out-of-range";
}

void PromptParameters::add_scaled(const PromptParameters& other, double alpha) {
  for (auto& [slot, e] : embeddings) e += alpha * other.embeddings.at(slot);
  for (auto& [slot, g] : raw_gates) g += alpha * other.raw_gates.at(slot);
}

bool PromptParameters::all_finite() const {
  for (const auto& [_, e] : embeddings)
    if (!e.allFinite()) return false;
  for (const auto& [_, g] : raw_gates)
    if (!std::isfinite(g)) return false;
  return true;
}

EncodedPrompt encode_prompt_traced(const PromptTemplate& t, const PromptParameters& params, const TextEncoder& enc) {
  std::vector<FeatVec> sequence;
  sequence.reserve(t.tokens.size());
  for (const auto& tok : t.tokens) {
    if (const auto* w = std::get_if<FixedWord>(&tok)) {
      sequence.push_back(enc.embedding(w->word));
      continue;
    }
    const int slot = std::get<Placeholder>(tok).slot_id;
    auto it = params.embeddings.find(slot);
    if (it == params.embeddings.end()) throw DomainError("encode_prompt: missing placeholder slot " + std::to_string(slot));
    if (it->second.size() != enc.embedding_dim()) throw DomainError("encode_prompt: placeholder dimension mismatch");
    double gate = 1.0;
    if (t.level.is_component()) {
      auto g = params.raw_gates.find(slot);
      if (g == params.raw_gates.end()) throw DomainError("encode_prompt: missing gate for slot " + std::to_string(slot));
      gate = stable_sigmoid(g->second);
    }
    sequence.push_back(gate * it->second);
  }
  return {enc.forward(sequence)};
}

FeatVec encode_prompt(const PromptTemplate& t, const PromptParameters& params, const TextEncoder& enc) {
  return encode_prompt_traced(t, params, enc).forward.output;
}

void backprop_prompt(const PromptTemplate& t, const EncodedPrompt& encoded, const PromptParameters& params,
                     const TextEncoder& enc, const FeatVec& grad_feature, PromptParameters& grads) {
  const auto slots = t.slots();
  if (slots.empty()) return;
  const FeatVec grad_mean = enc.vjp_mean(encoded.forward, grad_feature);
  const double inv_len = 1.0 / static_cast<double>(encoded.forward.length);
  for (int slot : slots) {
    const FeatVec& emb = params.embeddings.at(slot);
    if (t.level.is_component()) {
      const double raw = params.raw_gates.at(slot);
      const double gate = stable_sigmoid(raw);
      grads.embeddings.at(slot) += (gate * inv_len) * grad_mean;
      grads.raw_gates.at(slot) += gate * (1.0 - gate) * inv_len * emb.dot(grad_mean);
    } else {
      grads.embeddings.at(slot) += inv_len * grad_mean;
    }
  }
}

std::vector<EncodedPrompt> encode_all_traced(PromptSet& set, const PromptParameters& params, const TextEncoder& enc) {
  std::vector<EncodedPrompt> traces;
  traces.reserve(set.templates.size());
  for (const auto& t : set.templates) traces.push_back(encode_prompt_traced(t, params, enc));

  set.banks.clear();
  for (std::size_t i = 0; i < set.templates.size(); ++i) {
    LevelBank& bank = set.banks[set.templates[i].level];
    const FeatVec& f = traces[i].forward.output;
    switch (set.templates[i].polarity) {
      case Polarity::NormalHandcrafted: bank.normal.push_back(f); break;
      case Polarity::AbnormalHandcrafted: bank.handcrafted.push_back(f); break;
      case Polarity::AbnormalLearnable: bank.learnable.push_back(f); break;
    }
  }
  for (auto& [level, bank] : set.banks) {
    if (bank.normal.empty()) throw DomainError("encode_all: level " + level.name() + " has no NHP");
    std::vector<const FeatVec*> normal;
    for (const auto& f : bank.normal) normal.push_back(&f);
    bank.mean_normal = normalized_mean(normal);
    std::vector<const FeatVec*> abnormal;
    for (const auto& f : bank.handcrafted) abnormal.push_back(&f);
    for (const auto& f : bank.learnable) abnormal.push_back(&f);
    if (!abnormal.empty()) bank.mean_abnormal = normalized_mean(abnormal);
  }
  return traces;
}

void encode_all(PromptSet& set, const PromptParameters& params, const TextEncoder& enc) {
  encode_all_traced(set, params, enc);
}

std::string prompts_to_json(const PromptSet& set) {
  json templates = json::array();
  for (const auto& t : set.templates) {
    json tokens = json::array();
    for (const auto& tok : t.tokens) {
      if (const auto* w = std::get_if<FixedWord>(&tok)) {
        tokens.push_back(json{{"word", w->word}});
      } else {
        tokens.push_back(json{{"slot", std::get<Placeholder>(tok).slot_id}});
      }
    }
    templates.push_back(json{{"level", level_to_json(t.level)},
                             {"polarity", std::string(to_string(t.polarity))},
                             {"origin", t.origin},
                             {"text", t.text()},
                             {"tokens", tokens}});
  }
  json j{{"n_ab", set.n_ab}, {"component_count", set.component_count}, {"templates", templates}};
  return j.dump(2) + "\n";
}

PromptSet prompts_from_json(std::string_view text) {
  PromptSet set;
  try {
    const json j = json::parse(text.begin(), text.end());
    set.n_ab = j.at("n_ab").get<int>();
    set.component_count = j.at("component_count").get<int>();
    for (const auto& tj : j.at("templates")) {
      PromptTemplate t;
      t.level = level_from_json(tj.at("level"));
      t.polarity = polarity_from_string(tj.at("polarity").get<std::string>());
      t.origin = tj.at("origin").get<std::string>();
      for (const auto& tok : tj.at("tokens")) {
        if (tok.contains("word")) {
          t.tokens.emplace_back(FixedWord{tok.at("word").get<std::string>()});
        } else {
          t.tokens.emplace_back(Placeholder{tok.at("slot").get<int>()});
        }
      }
      set.templates.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw DomainError(std::string("prompt set JSON: ") + e.what());
  }
  return set;
}

std::string parameters_to_json(const PromptParameters& params) {
  json emb = json::object();
  for (const auto& [slot, e] : params.embeddings) {
    emb[std::to_string(slot)] = std::vector<double>(e.data(), e.data() + e.size());
  }
  json gates = json::object();
  for (const auto& [slot, g] : params.raw_gates) gates[std::to_string(slot)] = g;
  return json{{"embeddings", emb}, {"raw_gates", gates}}.dump() + "\n";
}

PromptParameters parameters_from_json(std::string_view text) {
  PromptParameters p;
  try {
    const json j = json::parse(text.begin(), text.end());
    for (const auto& [slot, values] : j.at("embeddings").items()) {
      const auto v = values.get<std::vector<double>>();
      p.embeddings[std::stoi(slot)] = Eigen::Map<const FeatVec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    for (const auto& [slot, g] : j.at("raw_gates").items()) p.raw_gates[std::stoi(slot)] = g.get<double>();
  } catch (const json::exception& e) {
    throw DomainError(std::string("parameter JSON: ") + e.what());
  }
  return p;
}

}  // namespace fgad::prompts
