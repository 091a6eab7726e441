#include <gtest/gtest.h>

#include "support/fixtures.hpp"

using namespace saerase;
using fixtures::TempDir;

namespace {

ConceptProfile profile_of(std::vector<double> s) {
  ConceptProfile p;
  p.s_c = Eigen::Map<Vector<double>>(s.data(), static_cast<Eigen::Index>(s.size()));
  p.concept_label = "c";
  return p;
}

}  // namespace

TEST(FeatureSet, SortedUniqueAndRangeChecked) {
  const FeatureSet f({5, 1, 5, 3}, 8, Provenance::per_concept, "x");
  EXPECT_EQ(std::vector<std::uint32_t>(f.indices().begin(), f.indices().end()), (std::vector<std::uint32_t>{1, 3, 5}));
  EXPECT_TRUE(f.contains(3));
  EXPECT_FALSE(f.contains(4));
  EXPECT_THROW(FeatureSet({8}, 8, Provenance::per_concept), DataError);
}

TEST(FeatureSet, JsonRoundTrip) {
  TempDir dir("fs");
  const FeatureSet f({2, 7}, 16, Provenance::contrastive, "dog");
  save_feature_set(dir / "f.json", f);
  EXPECT_EQ(load_feature_set(dir / "f.json"), f);
  std::ofstream(dir / "bad.json") << "{\"indices\": [1]}";
  EXPECT_THROW(load_feature_set(dir / "bad.json"), DataError);
}

TEST(Select, ProfileIsMaxOverTokens) {
  const auto atoms = fixtures::orthonormal_atoms(8, 8, 31);
  const auto p = fixtures::oracle_sae(atoms, 2);
  RowMatrix<double> rows(3, 8);
  rows.row(0) = 1.0 * atoms.row(0) + 0.4 * atoms.row(5);
  rows.row(1) = 2.0 * atoms.row(0);
  rows.row(2) = 0.3 * atoms.row(6) + 0.2 * atoms.row(5);
  const auto prof = concept_profile(p, rows, "c");
  EXPECT_NEAR(prof.s_c[0], 2.0, 1e-12);
  EXPECT_NEAR(prof.s_c[5], 0.4, 1e-12);
  EXPECT_NEAR(prof.s_c[6], 0.3, 1e-12);
  EXPECT_EQ(prof.s_c[1], 0.0);
  EXPECT_EQ(prof.token_count, 3u);
  EXPECT_THROW(concept_profile(p, RowMatrix<double>(0, 8), "empty"), DataError);
}

TEST(Select, TopKSelNeverPicksZerosAndBreaksTiesLow) {
  const auto f = select_features(profile_of({0.0, 3.0, 1.0, 3.0, 0.0, 2.0}), 3);
  EXPECT_EQ(std::vector<std::uint32_t>(f.indices().begin(), f.indices().end()), (std::vector<std::uint32_t>{1, 3, 5}));
  const auto few = select_features(profile_of({0.0, 1.0, 0.0}), 3);
  EXPECT_EQ(few.size(), 1u);
  EXPECT_THROW(select_features(profile_of({1.0}), 2), ConfigError);
}

TEST(Select, ContrastRemovesRetainFeaturesAndUnionLabels) {
  const FeatureSet t1({1, 2, 3, 4}, 10, Provenance::per_concept, "t1");
  const FeatureSet t2({4, 5, 9}, 10, Provenance::per_concept, "t2");
  const std::vector<FeatureSet> retain{FeatureSet({2, 9}, 10, Provenance::per_concept, "r1"),
                                       FeatureSet({4}, 10, Provenance::per_concept, "r2")};
  const auto h1 = contrast_select(t1, retain);
  const auto h2 = contrast_select(t2, retain);
  EXPECT_EQ(std::vector<std::uint32_t>(h1.indices().begin(), h1.indices().end()), (std::vector<std::uint32_t>{1, 3}));
  EXPECT_EQ(h1.provenance(), Provenance::contrastive);
  const std::vector<FeatureSet> hats{h2, h1};
  const auto e = union_erase_set(hats);
  EXPECT_EQ(std::vector<std::uint32_t>(e.indices().begin(), e.indices().end()), (std::vector<std::uint32_t>{1, 3, 5}));
  EXPECT_EQ(e.label(), "t1,t2");
  EXPECT_EQ(erase_set_labels(e), (std::vector<std::string>{"t1", "t2"}));
  for (const auto& r : retain) EXPECT_EQ(overlap(e, r), 0u);

  const std::vector<FeatureSet> mismatched{FeatureSet({1}, 11, Provenance::per_concept)};
  EXPECT_THROW(contrast_select(t1, mismatched), DataError);
}

TEST(Select, RetainSetCoveringTargetGivesEmptyContrast) {
  const FeatureSet t({1, 2}, 4, Provenance::per_concept, "t");
  const std::vector<FeatureSet> retain{FeatureSet({1, 2, 3}, 4, Provenance::per_concept, "r")};
  EXPECT_TRUE(contrast_select(t, retain).empty());
}

TEST(Select, RandomInstancesMatchBruteForce) {
  Rng rng(77);
  // profile: per-coordinate max over the densified codes of 5 random tokens
  const auto p = fixtures::random_params(10, 32, 4, 78);
  const auto rows = fixtures::random_rows(5, 10, 79);
  const auto prof = concept_profile(p, rows, "c");
  for (Eigen::Index r = 0; r < 32; ++r) {
    double m = 0;
    for (Eigen::Index i = 0; i < 5; ++i) m = std::max(m, encode(p, Vector<double>(rows.row(i).transpose())).dense()[r]);
    EXPECT_EQ(prof.s_c[r], m) << r;
  }

  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(64, 0.0);
    for (auto& x : s) x = rng.uniform01() < 0.6 ? std::floor(rng.uniform01() * 20) : 0.0;  // ties on purpose
    std::vector<std::uint32_t> order(64);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return s[a] > s[b]; });
    std::vector<std::uint32_t> expect;
    for (auto i : order) {
      if (expect.size() < 9 && s[i] > 0) expect.push_back(i);
    }
    std::sort(expect.begin(), expect.end());
    const auto f = select_features(profile_of(s), 9);
    EXPECT_EQ(std::vector<std::uint32_t>(f.indices().begin(), f.indices().end()), expect);
  }

  auto random_set = [&](const std::string& label) {
    std::vector<std::uint32_t> idx;
    for (std::uint32_t i = 0; i < 40; ++i) {
      if (rng.uniform01() < 0.2) idx.push_back(i);
    }
    return FeatureSet(idx, 40, Provenance::per_concept, label);
  };
  std::vector<FeatureSet> hats;
  std::set<std::uint32_t> all;
  for (int c = 0; c < 50; ++c) {
    const auto target = random_set("t" + std::to_string(c));
    const std::vector<FeatureSet> retain{random_set("a"), random_set("b"), random_set("c")};
    std::vector<std::uint32_t> kept;
    std::size_t shared = 0;
    for (auto i : target.indices()) {
      const bool in_retain = std::any_of(retain.begin(), retain.end(), [&](const auto& r) { return r.contains(i); });
      if (in_retain) {
        ++shared;
      } else {
        kept.push_back(i);
      }
    }
    const auto hat = contrast_select(target, retain);
    EXPECT_EQ(std::vector<std::uint32_t>(hat.indices().begin(), hat.indices().end()), kept);
    EXPECT_EQ(overlap(target, union_erase_set(retain)), shared);
    all.insert(kept.begin(), kept.end());
    hats.push_back(hat);
  }
  const auto e = union_erase_set(hats);
  EXPECT_EQ(std::vector<std::uint32_t>(e.indices().begin(), e.indices().end()),
            std::vector<std::uint32_t>(all.begin(), all.end()));
}
