// SPDX-License-Identifier: Apache-2.0
#include "fgad/feature_file.hpp"
#include "fgad/synthetic.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>

namespace fgad::synthetic {
namespace {

CategoryFixture shipped(const std::string& name) {
  return load_fixture(testing::fixture_dir() / "categories" / (name + ".json"));
}

CategoryFixture tiny() {
  CategoryFixture f;
  f.category = "tiny";
  f.mfsc_fixture = "tiny";
  f.height = 4;
  f.width = 5;
  f.components = {{"background", {}}, {"a", {"red"}}, {"b", {}}};
  f.regions = {{1, 0, 0, 2, 2}, {2, 1, 1, 2, 3}};
  f.defect_min = 1;
  f.defect_max = 2;
  return f;
}

TEST(Fixtures, ShippedFixturesLoadAndRoundTrip) {
  for (const char* name : {"pcb_fixture", "capsule_fixture", "juice_fixture"}) {
    const auto f = shipped(name);
    EXPECT_NO_THROW(f.validate());
    EXPECT_EQ(f.height, 15);
    EXPECT_EQ(f.width, 15);
    EXPECT_EQ(fixture_from_json(fixture_to_json(f)), f) << name;
    EXPECT_TRUE(std::filesystem::exists(testing::fixture_dir() / "mfsc" / (f.mfsc_fixture + ".json")));
  }
  EXPECT_EQ(shipped("capsule_fixture").foreground_component_count(), 1);
}

TEST(Fixtures, PartialJsonKeepsDefaults) {
  const auto f = fixture_from_json(R"({"category":"x","components":[{"name":"bg"},{"name":"c"}],
                                       "regions":[{"component":1,"row":2,"col":2,"rows":3,"cols":3}]})");
  EXPECT_EQ(f.mfsc_fixture, "x");
  EXPECT_EQ(f.jitter, 1);
  EXPECT_EQ(f.defect_words, (std::vector<std::string>{"damaged", "broken"}));
}

TEST(Fixtures, ValidationErrors) {
  auto f = tiny();
  f.regions.push_back({3, 0, 0, 1, 1});
  EXPECT_THROW(f.validate(), DomainError);
  f = tiny();
  f.regions[0].rows = 9;
  EXPECT_THROW(f.validate(), DomainError);
  f = tiny();
  f.regions.pop_back();
  EXPECT_THROW(f.validate(), DomainError);  // component b never painted
  f = tiny();
  f.defect_max = 6;
  EXPECT_THROW(f.validate(), DomainError);
  f = tiny();
  f.defect_semantic_weight = 1.5;
  EXPECT_THROW(f.validate(), DomainError);
  EXPECT_THROW(fixture_from_json("{"), DomainError);
  EXPECT_THROW(fixture_from_json(R"({"category":"x"})"), DomainError);
}

TEST(Layout, PaintsInOrderAndShifts) {
  const auto f = tiny();
  // clang-format off
  const std::vector<int> expect = {1, 1, 0, 0, 0,
                                   1, 2, 2, 2, 0,
                                   0, 2, 2, 2, 0,
                                   0, 0, 0, 0, 0};
  // clang-format on
  EXPECT_EQ(layout_for(f, 0, 0), expect);
  const auto shifted = layout_for(f, 1, -1);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) {
      const int si = i - 1, sj = j + 1;
      const int src = (si >= 0 && sj < 5) ? expect[static_cast<std::size_t>(si * 5 + sj)] : 0;
      EXPECT_EQ(shifted[static_cast<std::size_t>(i * 5 + j)], src);
    }
}

TEST(Scenes, DeterministicPerStream) {
  const auto f = shipped("pcb_fixture");
  EncoderSpec spec;
  spec.seed = 3;
  const auto a = make_normal_scene(f, spec, 9, "shot", 0);
  EXPECT_EQ(a, make_normal_scene(f, spec, 9, "shot", 0));
  EXPECT_NE(a, make_normal_scene(f, spec, 9, "shot", 1));
  EXPECT_NE(a, make_normal_scene(f, spec, 10, "shot", 0));
  EXPECT_NE(a, make_normal_scene(f, spec, 9, "test-normal", 0));
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.height * a.width, static_cast<int>(a.cells.size()));
  const auto mask = a.anomaly_mask();
  EXPECT_EQ(std::count(mask.begin(), mask.end(), true), 0);
  const auto shots = make_shots(f, spec, 3, 9);
  ASSERT_EQ(shots.size(), 3u);
  EXPECT_EQ(shots[0], a);
  EXPECT_THROW(make_shots(f, spec, 0, 9), DomainError);
}

TEST(Scenes, LayoutIsAJitteredFixtureLayout) {
  const auto f = shipped("juice_fixture");
  EncoderSpec spec;
  for (int i = 0; i < 20; ++i) {
    const auto layout = make_normal_scene(f, spec, 1, "shot", i).layout();
    bool found = false;
    for (int dr = -f.jitter; dr <= f.jitter && !found; ++dr)
      for (int dc = -f.jitter; dc <= f.jitter && !found; ++dc) found = layout == layout_for(f, dr, dc);
    EXPECT_TRUE(found) << i;
  }
}

TEST(Scenes, AnomalousPatchIsSquareWithFixedNorm) {
  const auto f = shipped("pcb_fixture");
  EncoderSpec spec;
  spec.noise_sigma = 0.2;
  for (int i = 0; i < 30; ++i) {
    const auto s = make_anomalous_scene(f, spec, 4, "test-anomalous", i, 0.6);
    const auto base = make_normal_scene(f, spec, 4, "test-anomalous", i);
    EXPECT_EQ(s.layout(), base.layout());
    const auto mask = s.anomaly_mask();
    const auto n = std::count(mask.begin(), mask.end(), true);
    EXPECT_TRUE(n == 4 || n == 9) << n;
    for (const auto& c : s.cells) {
      if (c.anomaly_flag) {
        ASSERT_TRUE(c.anomaly_perturbation.has_value());
        EXPECT_NEAR(c.anomaly_perturbation->norm(), 0.6, 1e-12);
      } else {
        EXPECT_FALSE(c.anomaly_perturbation.has_value());
      }
    }
  }
  EXPECT_THROW(make_anomalous_scene(f, spec, 4, "x", 0, -1.0), DomainError);
}

TEST(Suite, CountsLabelsAndMagnitude) {
  const auto f = shipped("capsule_fixture");
  EncoderSpec spec;
  spec.noise_sigma = 0.2;
  const auto suite = make_test_suite(f, spec, {5, 7, 3.0, 11});
  ASSERT_EQ(suite.size(), 12u);
  for (std::size_t i = 0; i < suite.size(); ++i) {
    EXPECT_EQ(suite[i].anomalous, i >= 5);
    for (const auto& c : suite[i].scene.cells)
      if (c.anomaly_perturbation) {
        EXPECT_NEAR(c.anomaly_perturbation->norm(), 0.6, 1e-12);
      }
  }
  EXPECT_EQ(suite[0].scene, make_normal_scene(f, spec, 11, "test-normal", 0));
  EXPECT_THROW(make_test_suite(f, spec, {-1, 1, 3.0, 0}), DomainError);
}

}  // namespace
}  // namespace fgad::synthetic
