// SPDX-License-Identifier: Apache-2.0
#include "fgad/feature_file.hpp"
#include "fgad/prompt_bank.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

namespace fgad::prompts {
namespace {

using mfsc::MFSCDocument;

MFSCDocument one_component_doc() {
  return mfsc::parse_document(R"({
    "mfsc_version": 1,
    "category": "bottle",
    "summary": "a red glass bottle",
    "background": "a white table",
    "foreground": {"counts": {"cap": 1}, "relation_text": "a cap on top of the bottle"},
    "components": [
      {"name": "cap",
       "attributes": {"color": {"values": ["red"], "connector": "single"},
                      "shape": {"values": ["round"], "connector": "single"}},
       "caption_text": "a red round cap"}
    ],
    "vocabulary": {"color": ["red", "blue", "green"], "shape": ["round", "square"]}
  })");
}

MFSCDocument pcb_doc() {
  return mfsc::parse_document(read_file_bytes(testing::fixture_dir() / "mfsc" / "pcb_fixture.json"));
}

EncoderSpec small_spec() {
  EncoderSpec s;
  s.seed = 3;
  return s;
}

std::vector<std::string> words_of(const PromptTemplate& t) {
  std::vector<std::string> out;
  for (const auto& tok : t.tokens) {
    if (const auto* w = std::get_if<FixedWord>(&tok)) out.push_back(w->word);
  }
  return out;
}

std::string join(const std::vector<std::string>& w, std::size_t from, std::size_t to) {
  std::string s;
  for (std::size_t i = from; i < to; ++i) s += (s.empty() ? "" : " ") + w[i];
  return s;
}

std::string canon(const std::string& v) {
  const auto w = tokenize_words(v);
  return join(w, 0, w.size());
}

// Counts by construction: 1 NHP, |anomaly words| + |attributes| AHPs, n_ab ALPs.
TEST(Build, ComponentLevelCountsFollowConstructionRule) {
  const auto set = build_prompt_set(one_component_doc(), {"damaged", "broken", "abnormal"}, 4, 1);
  const auto c0 = PromptLevel::component_level(0);
  EXPECT_EQ(set.indices(c0, Polarity::NormalHandcrafted).size(), 1u);
  EXPECT_EQ(set.indices(c0, Polarity::AbnormalHandcrafted).size(), 5u);
  EXPECT_EQ(set.indices(c0, Polarity::AbnormalLearnable).size(), 4u);
  EXPECT_EQ(set.indices(PromptLevel::background(), Polarity::NormalHandcrafted).size(), 1u);
  EXPECT_TRUE(set.indices(PromptLevel::background(), Polarity::AbnormalHandcrafted).empty());
  EXPECT_TRUE(set.indices(PromptLevel::background(), Polarity::AbnormalLearnable).empty());
}

TEST(Build, DefaultsMatchConfiguredSetting) {
  EXPECT_EQ(kDefaultAbnormalLearnable, 4);
  EXPECT_EQ(kDefaultAnomalyWords,
            (std::vector<std::string>{"damaged", "broken", "with defect", "with flaw", "abnormal"}));
  EXPECT_EQ(PromptParameters::kInitStddev, 0.02);
}

TEST(Build, DeterministicAndSeedSensitive) {
  const auto a = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 5);
  const auto b = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 5);
  EXPECT_EQ(a.templates, b.templates);
  EXPECT_EQ(prompts_to_json(a), prompts_to_json(b));
  bool differs = false;
  for (std::uint64_t s = 6; s < 16 && !differs; ++s) {
    differs = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, s).templates != a.templates;
  }
  EXPECT_TRUE(differs);
}

TEST(Build, ArgumentErrors) {
  auto doc = one_component_doc();
  EXPECT_THROW(build_prompt_set(doc, {}, 4, 0), DomainError);
  EXPECT_THROW(build_prompt_set(doc, {"broken"}, 0, 0), DomainError);
  EXPECT_THROW(build_prompt_set(doc, {" . "}, 1, 0), DomainError);
  doc.components.clear();
  EXPECT_THROW(build_prompt_set(doc, {"broken"}, 1, 0), DomainError);
}

TEST(Build, ConcatenationAppendsAnomalyWords) {
  const auto set = build_prompt_set(one_component_doc(), {"with defect"}, 1, 0);
  const auto idx = set.indices(PromptLevel::image(), Polarity::AbnormalHandcrafted);
  ASSERT_FALSE(idx.empty());
  EXPECT_EQ(set.templates[idx[0]].text(), "a red glass bottle with defect");
  EXPECT_EQ(set.templates[idx[0]].origin, "concat:with defect");
}

TEST(Build, SingleValueVocabularyFallsBackToNegation) {
  auto doc = one_component_doc();
  doc.attribute_vocabulary["shape"] = {"round"};
  const auto set = build_prompt_set(doc, {"broken"}, 1, 0);
  bool found = false;
  for (auto i : set.indices(PromptLevel::component_level(0), Polarity::AbnormalHandcrafted)) {
    if (set.templates[i].origin == "replace:shape") {
      EXPECT_EQ(set.templates[i].text(), "a red without round cap");
      found = true;
    }
  }
  EXPECT_TRUE(found);
}

TEST(Build, AlpsReplaceEveryAttributeValueWithUniqueSlots) {
  const auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  std::set<int> all_slots;
  for (const auto& t : set.templates) {
    const auto slots = t.slots();
    if (t.polarity == Polarity::AbnormalLearnable) {
      EXPECT_GE(slots.size(), 1u) << t.text();
    } else {
      EXPECT_TRUE(slots.empty());
    }
    for (int s : slots) EXPECT_TRUE(all_slots.insert(s).second) << "slot " << s << " reused";
  }
  // "a black cylindrical capacitor" -> "a [P] [P] capacitor"
  const auto idx = set.indices(PromptLevel::component_level(0), Polarity::AbnormalLearnable);
  ASSERT_EQ(idx.size(), 4u);
  const auto& t = set.templates[idx[0]];
  ASSERT_EQ(t.tokens.size(), 4u);
  EXPECT_EQ(std::get<FixedWord>(t.tokens[0]).word, "a");
  EXPECT_TRUE(std::holds_alternative<Placeholder>(t.tokens[1]));
  EXPECT_TRUE(std::holds_alternative<Placeholder>(t.tokens[2]));
  EXPECT_EQ(std::get<FixedWord>(t.tokens[3]).word, "capacitor");
}

// String-level oracle: a replacement AHP equals its NHP with one span swapped
// (or, if the value never occurs in the caption, one phrase appended). The
// removed span is a current value of the named attribute and the inserted
// phrase is a different vocabulary value or "without <value>".
void check_replacements(const PromptSet& set, const MFSCDocument& doc) {
  for (const auto& level : set.trained_levels()) {
    const auto nhp_idx = set.indices(level, Polarity::NormalHandcrafted);
    ASSERT_EQ(nhp_idx.size(), 1u);
    const auto nhp = words_of(set.templates[nhp_idx[0]]);
    for (auto i : set.indices(level, Polarity::AbnormalHandcrafted)) {
      const auto& t = set.templates[i];
      if (t.origin.rfind("replace:", 0) != 0) continue;
      const std::string attr = t.origin.substr(8);
      const auto ahp = words_of(t);
      std::size_t pre = 0;
      while (pre < nhp.size() && pre < ahp.size() && nhp[pre] == ahp[pre]) ++pre;
      std::size_t suf = 0;
      while (suf < nhp.size() - pre && suf < ahp.size() - pre &&
             nhp[nhp.size() - 1 - suf] == ahp[ahp.size() - 1 - suf])
        ++suf;
      const std::string removed = join(nhp, pre, nhp.size() - suf);
      const std::string inserted = join(ahp, pre, ahp.size() - suf);
      ASSERT_FALSE(inserted.empty()) << t.text();
      const bool negation = inserted.find("without") != std::string::npos;
      // some component carrying attr lost one of its values and gained a
      // vocabulary value it does not already have
      bool is_other_value = false;
      bool removed_known = removed.empty();
      for (const auto& c : doc.components) {
        auto it = c.attributes.find(attr);
        if (it == c.attributes.end()) continue;
        std::set<std::string> current;
        for (const auto& v : it->second.base_values) current.insert(canon(v));
        bool lost = removed.empty();
        for (const auto& v : current) lost = lost || removed.find(v) != std::string::npos;
        if (!lost) continue;
        removed_known = true;
        for (const auto& v : doc.attribute_vocabulary.at(attr)) {
          if (!current.count(canon(v)) && inserted.find(canon(v)) != std::string::npos) is_other_value = true;
        }
      }
      ASSERT_TRUE(removed_known) << "removed '" << removed << "' is not a value of " << attr << " in " << t.text();
      ASSERT_TRUE(is_other_value || negation) << "inserted '" << inserted << "' in " << t.text();
    }
  }
}

TEST(Property, ReplacementDiffersInOneAttributeValue) {
  check_replacements(build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0), pcb_doc());
  Rng rng = derive_rng(12, "prompt-replace");
  for (int trial = 0; trial < 300; ++trial) {
    auto doc = testing::random_document(rng);
    // captions that mention attribute values exercise the in-place path
    for (auto& c : doc.components) {
      for (const auto& [attr, v] : c.attributes) {
        if (testing::uniform_int(rng, 0, 1) == 0) c.caption_text += " " + v.base_values.front();
      }
    }
    const auto set = build_prompt_set(doc, {"broken"}, 2, static_cast<std::uint64_t>(trial));
    check_replacements(set, doc);
    if (HasFatalFailure()) FAIL() << mfsc::serialize(doc);
  }
}

TEST(Property, EveryValidDocumentBuildsAndEncodes) {
  Rng rng = derive_rng(13, "prompt-any-doc");
  const TextEncoder enc(small_spec());
  for (int trial = 0; trial < 200; ++trial) {
    const auto doc = testing::random_document(rng);
    auto set = build_prompt_set(doc, kDefaultAnomalyWords, 2, 0);
    const auto params = PromptParameters::initialize(set, enc.embedding_dim(), 1);
    encode_all(set, params, enc);
    EXPECT_EQ(set.bank(PromptLevel::background()).normal.size(), 1u);
    EXPECT_EQ(static_cast<std::size_t>(set.component_count), doc.components.size());
  }
}

TEST(Encode, NoPlaceholdersIgnoresParameters) {
  auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const TextEncoder enc(small_spec());
  const auto p1 = PromptParameters::initialize(set, enc.embedding_dim(), 1);
  auto p2 = PromptParameters::initialize(set, enc.embedding_dim(), 2);
  for (auto& [_, g] : p2.raw_gates) g = 3.0;
  for (const auto& t : set.templates) {
    if (!t.slots().empty()) continue;
    EXPECT_EQ(encode_prompt(t, p1, enc), encode_prompt(t, p2, enc)) << t.text();
  }
  EXPECT_EQ(encode_prompt(set.templates[0], p1, enc), encode_prompt(set.templates[0], p1, enc));
}

TEST(Encode, MatchesClosedFormWithGates) {
  const auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const TextEncoder enc(small_spec());
  auto params = PromptParameters::initialize(set, enc.embedding_dim(), 1);
  const auto idx = set.indices(PromptLevel::component_level(1), Polarity::AbnormalLearnable);
  const auto& t = set.templates[idx[0]];
  params.raw_gates.at(t.slots()[0]) = 0.7;
  FeatVec sum = FeatVec::Zero(enc.embedding_dim());
  for (const auto& tok : t.tokens) {
    if (const auto* w = std::get_if<FixedWord>(&tok)) {
      sum += enc.embedding(w->word);
    } else {
      const int slot = std::get<Placeholder>(tok).slot_id;
      sum += (1.0 / (1.0 + std::exp(-params.raw_gates.at(slot)))) * params.embeddings.at(slot);
    }
  }
  const FeatVec expect =
      (enc.projection() * (sum / static_cast<double>(t.tokens.size())) + enc.bias()).normalized();
  EXPECT_LE((encode_prompt(t, params, enc) - expect).norm(), 1e-12);
}

// Gated-out placeholders still count in the mean, so the limit is the
// fixed-word encoding exactly when the text bias is zero.
TEST(Encode, ClosedGateRemovesPlaceholderContribution) {
  EncoderSpec spec = small_spec();
  spec.text_bias = 0.0;
  const TextEncoder enc(spec);
  const auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  auto params = PromptParameters::initialize(set, enc.embedding_dim(), 1);
  const auto& t = set.templates[set.indices(PromptLevel::component_level(0), Polarity::AbnormalLearnable)[0]];
  for (int s : t.slots()) params.raw_gates.at(s) = -1e4;
  std::vector<FeatVec> fixed;
  for (const auto& tok : t.tokens)
    if (const auto* w = std::get_if<FixedWord>(&tok)) fixed.push_back(enc.embedding(w->word));
  EXPECT_LE((encode_prompt(t, params, enc) - enc.encode(fixed)).norm(), 1e-12);
}

TEST(Encode, MissingSlotAndDimensionMismatchThrow) {
  const auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const TextEncoder enc(small_spec());
  const auto& t = set.templates[set.indices(PromptLevel::image(), Polarity::AbnormalLearnable)[0]];
  auto params = PromptParameters::initialize(set, enc.embedding_dim(), 1);
  auto missing = params;
  missing.embeddings.erase(t.slots()[0]);
  EXPECT_THROW(encode_prompt(t, missing, enc), DomainError);
  auto wrong = params;
  wrong.embeddings.at(t.slots()[0]) = FeatVec::Zero(enc.embedding_dim() + 1);
  EXPECT_THROW(encode_prompt(t, wrong, enc), DomainError);
}

TEST(EncodeAll, BanksAreUnitNormAndSized) {
  auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const TextEncoder enc(small_spec());
  encode_all(set, PromptParameters::initialize(set, enc.embedding_dim(), 1), enc);
  std::size_t component_alps = 0;
  for (const auto& level : set.levels()) {
    const auto& bank = set.bank(level);
    for (const auto* group : {&bank.normal, &bank.handcrafted, &bank.learnable})
      for (const auto& f : *group) EXPECT_NEAR(f.norm(), 1.0, 1e-6);
    if (level.is_component()) component_alps += bank.learnable.size();
    // oracle means
    FeatVec n = FeatVec::Zero(enc.feature_dim());
    for (const auto& f : bank.normal) n += f;
    EXPECT_LE((bank.mean_normal - n.normalized()).norm(), 1e-12);
    if (level.kind == PromptLevel::Kind::Background) continue;
    FeatVec a = FeatVec::Zero(enc.feature_dim());
    for (const auto& f : bank.handcrafted) a += f;
    for (const auto& f : bank.learnable) a += f;
    EXPECT_LE((bank.mean_abnormal - a.normalized()).norm(), 1e-12);
  }
  EXPECT_EQ(component_alps, 12u);
  EXPECT_NEAR(set.background_feature().norm(), 1.0, 1e-12);
}

TEST(EncodeAll, ParameterUpdateChangesOnlyLearnableEntries) {
  auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const TextEncoder enc(small_spec());
  auto params = PromptParameters::initialize(set, enc.embedding_dim(), 1);
  encode_all(set, params, enc);
  const auto before = set.banks;
  Rng rng = derive_rng(4, "param-update");
  for (auto& [_, e] : params.embeddings) e += testing::gaussian_vec(rng, enc.embedding_dim(), 0.1);
  for (auto& [_, g] : params.raw_gates) g += 0.5;
  encode_all(set, params, enc);
  for (const auto& [level, bank] : set.banks) {
    const auto& old = before.at(level);
    EXPECT_EQ(bank.normal, old.normal);
    EXPECT_EQ(bank.handcrafted, old.handcrafted);
    for (std::size_t i = 0; i < bank.learnable.size(); ++i) EXPECT_NE(bank.learnable[i], old.learnable[i]);
  }
}

TEST(EncodeAll, GatePerturbationIsLocalToItsPrompt) {
  auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const TextEncoder enc(small_spec());
  auto params = PromptParameters::initialize(set, enc.embedding_dim(), 1);
  encode_all(set, params, enc);
  const auto before = set.banks;
  const auto target = PromptLevel::component_level(2);
  const auto alp = set.indices(target, Polarity::AbnormalLearnable);
  params.raw_gates.at(set.templates[alp[1]].slots()[0]) += 1.0;
  encode_all(set, params, enc);
  for (const auto& [level, bank] : set.banks) {
    const auto& old = before.at(level);
    EXPECT_EQ(bank.normal, old.normal);
    EXPECT_EQ(bank.handcrafted, old.handcrafted);
    for (std::size_t i = 0; i < bank.learnable.size(); ++i) {
      if (level == target && i == 1) {
        EXPECT_NE(bank.learnable[i], old.learnable[i]);
      } else {
        EXPECT_EQ(bank.learnable[i], old.learnable[i]) << level.name() << " " << i;
      }
    }
    if (level != target) {
      EXPECT_EQ(bank.mean_abnormal, old.mean_abnormal);
    }
  }
}

TEST(Parameters, GatesOnlyForComponentSlotsStartAtHalf) {
  const auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const auto params = PromptParameters::initialize(set, 128, 9);
  for (const auto& t : set.templates) {
    for (int s : t.slots()) {
      EXPECT_EQ(params.raw_gates.count(s), t.level.is_component() ? 1u : 0u);
      if (t.level.is_component()) {
        EXPECT_EQ(stable_sigmoid(params.raw_gates.at(s)), 0.5);
      }
    }
  }
  // init stddev: sample std of all embedding coordinates
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& [_, e] : params.embeddings) {
    sq += e.squaredNorm();
    n += static_cast<std::size_t>(e.size());
  }
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(n)), 0.02, 0.002);
}

TEST(Parameters, EnumerationIsStableAndFlatRoundTrips) {
  const auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const auto a = PromptParameters::initialize(set, 16, 9);
  const auto b = PromptParameters::initialize(set, 16, 9);
  EXPECT_EQ(a, b);
  const auto flat = a.flatten();
  EXPECT_EQ(flat.size(), a.size());
  EXPECT_EQ(a.size(), a.embeddings.size() * 16 + a.raw_gates.size());
  auto z = a.zeros_like();
  z.assign(flat);
  EXPECT_EQ(z, a);
  EXPECT_EQ(a.coordinate_name(0), "slot[" + std::to_string(a.embeddings.begin()->first) + "][0]");
  EXPECT_EQ(a.coordinate_name(a.size() - 1), "gate[" + std::to_string(a.raw_gates.rbegin()->first) + "]");
  EXPECT_THROW(z.assign(std::vector<double>(3)), DomainError);
  auto c = a;
  c.add_scaled(a, -1.0);
  EXPECT_EQ(c, a.zeros_like());
}

TEST(Backprop, MatchesFiniteDifferences) {
  const auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const TextEncoder enc(small_spec());
  const auto params = PromptParameters::initialize(set, enc.embedding_dim(), 1);
  Rng rng = derive_rng(2, "backprop-fd");
  for (const auto level : {PromptLevel::image(), PromptLevel::component_level(0)}) {
    const auto& t = set.templates[set.indices(level, Polarity::AbnormalLearnable)[0]];
    const FeatVec g = testing::gaussian_vec(rng, enc.feature_dim());
    auto grads = params.zeros_like();
    backprop_prompt(t, encode_prompt_traced(t, params, enc), params, enc, g, grads);
    const auto flat = params.flatten();
    const auto analytic = grads.flatten();
    for (std::size_t i = 0; i < flat.size(); ++i) {
      if (analytic[i] == 0.0 && testing::uniform_int(rng, 0, 20) != 0) continue;
      auto plus = flat, minus = flat;
      plus[i] += 1e-6;
      minus[i] -= 1e-6;
      auto pp = params, pm = params;
      pp.assign(plus);
      pm.assign(minus);
      const double fd = (g.dot(encode_prompt(t, pp, enc)) - g.dot(encode_prompt(t, pm, enc))) / 2e-6;
      EXPECT_NEAR(analytic[i], fd, 1e-7 + 1e-5 * std::abs(fd)) << params.coordinate_name(i);
    }
  }
}

TEST(Json, TemplatesAndParametersRoundTrip) {
  const auto set = build_prompt_set(pcb_doc(), kDefaultAnomalyWords, 4, 0);
  const auto back = prompts_from_json(prompts_to_json(set));
  EXPECT_EQ(back.templates, set.templates);
  EXPECT_EQ(back.n_ab, 4);
  EXPECT_EQ(back.component_count, 3);
  const auto params = PromptParameters::initialize(set, 128, 1);
  EXPECT_EQ(parameters_from_json(parameters_to_json(params)), params);
}

}  // namespace
}  // namespace fgad::prompts
