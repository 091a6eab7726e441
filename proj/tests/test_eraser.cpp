#include <cstring>

#include <gtest/gtest.h>

#include "support/fixtures.hpp"

using namespace saerase;

namespace {

struct OracleSetup {
  RowMatrix<double> atoms = fixtures::orthonormal_atoms(12, 16, 41);
  SaeParams<double> params = fixtures::oracle_sae(atoms, 3);
  FeatureSet erase{{0, 1}, 12, Provenance::erase_union, "t"};

  // token with a target atom (0) and two background atoms
  Vector<double> target_token(double c = 1.0) const {
    return c * atoms.row(0).transpose() + 0.8 * atoms.row(5).transpose() + 0.6 * atoms.row(7).transpose();
  }
  Vector<double> normal_token() const { return 0.9 * atoms.row(4).transpose() + 0.5 * atoms.row(8).transpose(); }

  EraseConfig config(double strength, double threshold) const {
    EraseConfig c;
    c.erase_set = erase;
    c.strength = strength;
    c.threshold = threshold;
    return c;
  }
};

}  // namespace

TEST(Deactivate, ScalesOnlyEraseFeatures) {
  SparseActivation<double> z;
  z.d_hid = 12;
  z.indices = {0, 3};
  z.values = {2.0, 1.5};
  const FeatureSet f({0}, 12, Provenance::erase_union);
  const auto d = deactivate(z, f, -2.0);
  EXPECT_EQ(d.indices, z.indices);
  EXPECT_EQ(d.values, (std::vector<double>{-4.0, 1.5}));
  EXPECT_EQ(deactivate(z, f, 0.0).indices, (std::vector<std::uint32_t>{3}));
}

TEST(EraseReconstruct, MseIsOneMinusLambdaSquaredTimesErasedEnergy) {
  const OracleSetup o;
  const auto e = o.target_token(1.3);
  for (double lambda : {1.0, 0.0, -2.0, -4.0, -8.0}) {
    const auto r = erase_reconstruct(o.params, e, o.config(lambda, 0));
    EXPECT_NEAR(r.mse, (1 - lambda) * (1 - lambda) * 1.3 * 1.3, 1e-10) << lambda;
  }
  EXPECT_NEAR(erase_reconstruct(o.params, o.normal_token(), o.config(-2, 0)).mse, 0.0, 1e-20);
}

TEST(Classify, ThresholdIsInclusiveAndAggregatesMaxOrMean) {
  EraseConfig c;
  c.threshold = 2.0;
  EXPECT_TRUE(classify({1.0, 2.0}, c));
  c.token_aggregate = TokenAggregate::mean;
  EXPECT_FALSE(classify({1.0, 2.0}, c));
  EXPECT_TRUE(classify({2.0, 2.0}, c));
  EXPECT_THROW(classify({}, c), DataError);
}

TEST(Block, NormalPromptPassesThroughBitIdentical) {
  const OracleSetup o;
  RowMatrix<float> prompt(3, 16);
  for (int h = 0; h < 3; ++h) prompt.row(h) = (o.normal_token() * (1.0 + 0.1 * h)).cast<float>().transpose();
  prompt(1, 4) += 0.013f;  // something the SAE cannot reproduce exactly
  const auto out = deactivation_block(o.params, prompt, o.config(-2, 0.5));
  EXPECT_FALSE(out.flagged);
  ASSERT_EQ(out.output_rows.size(), prompt.size());
  EXPECT_EQ(std::memcmp(out.output_rows.data(), prompt.data(), sizeof(float) * prompt.size()), 0);
}

TEST(Block, FlaggedPromptIsReplacedByErasedReconstruction) {
  const OracleSetup o;
  RowMatrix<double> prompt(2, 16);
  prompt.row(0) = o.normal_token().transpose();
  prompt.row(1) = o.target_token().transpose();
  const auto cfg = o.config(-2, 1.0);
  const auto out = deactivation_block(o.params, prompt, cfg);
  EXPECT_TRUE(out.flagged);
  EXPECT_NEAR(out.aggregate_mse, 9.0, 1e-10);
  for (int h = 0; h < 2; ++h) {
    const auto expect = erase_reconstruct(o.params, prompt.row(h).transpose(), cfg).e_hat;
    EXPECT_LT((out.output_rows.row(h).transpose() - expect).norm(), 1e-12);
  }
}

TEST(Block, TokenGranularityOnlyReplacesFlaggedTokens) {
  const OracleSetup o;
  RowMatrix<double> prompt(2, 16);
  prompt.row(0) = o.normal_token().transpose();
  prompt.row(0)[3] += 0.01;
  prompt.row(1) = o.target_token().transpose();
  auto cfg = o.config(-2, 1.0);
  cfg.granularity = Granularity::token;
  const auto out = deactivation_block(o.params, prompt, cfg);
  EXPECT_EQ(out.token_flagged, (std::vector<bool>{false, true}));
  EXPECT_EQ(out.output_rows.row(0), prompt.row(0));
  EXPECT_NE(out.output_rows.row(1), prompt.row(1));
}

TEST(Block, RejectsMismatchedShapes) {
  const OracleSetup o;
  EXPECT_THROW(deactivation_block(o.params, RowMatrix<double>(2, 5), o.config(-2, 1)), DataError);
  EXPECT_THROW(deactivation_block(o.params, RowMatrix<double>(0, 16), o.config(-2, 1)), DataError);
  auto cfg = o.config(-2, 1);
  cfg.erase_set = FeatureSet({0}, 13, Provenance::erase_union);
  EXPECT_THROW(DeactivationBlock<double>(o.params, cfg), DataError);
}

TEST(Calibrate, ThresholdIsMarginTimesMaxRetainMse) {
  const OracleSetup o;
  RowMatrix<double> rows(4, 16);
  rows.row(0) = o.normal_token().transpose();
  rows.row(1) = (0.2 * o.atoms.row(1) + o.atoms.row(4)).eval();  // weak erase feature: mse 9 * 0.04
  rows.row(2).setZero();  // all-zero tokens reconstruct exactly
  rows.row(3).setZero();
  const std::vector<PromptSpan> prompts{{0, 0, 2, std::nullopt, Split::retain}, {1, 2, 2, std::nullopt, Split::retain}};
  const auto cal = calibrate_threshold(o.params, rows, prompts, o.config(-2, 0));
  EXPECT_NEAR(cal.max_retain_mse, 0.36, 1e-10);
  EXPECT_NEAR(cal.threshold, 0.54, 1e-10);
  EXPECT_FALSE(cal.degenerate);
  EXPECT_EQ(cal.retain_mse.size(), 2u);

  const std::vector<PromptSpan> clean{{1, 2, 2, std::nullopt, Split::retain}};
  EXPECT_TRUE(calibrate_threshold(o.params, rows, clean, o.config(-2, 0)).degenerate);
  EXPECT_THROW(calibrate_threshold(o.params, rows, {}, o.config(-2, 0)), DataError);
}

TEST(Throughput, ReportsBothConfigurations) {
  const OracleSetup o;
  auto a = o.config(-2, 1);
  auto b = o.config(-2, 1);
  b.erase_set = FeatureSet({0, 1, 2, 3, 4, 5}, 12, Provenance::erase_union);
  const auto rep = throughput_probe(o.params, a, b, 20, 4, 1, 3);
  EXPECT_EQ(rep.n_prompts, 20u);
  EXPECT_GT(rep.seconds_per_prompt_a, 0.0);
  EXPECT_GT(rep.ratio, 0.0);
  EXPECT_THROW(throughput_probe(o.params, a, b, 0, 4, 1), ConfigError);
}

TEST(Throughput, DoublingPromptLengthAtMostDoublesTheCost) {
  const auto p = fixtures::random_params(64, 512, 16, 42);
  EraseConfig c;
  c.erase_set = FeatureSet({1, 2, 3}, 512, Provenance::erase_union);
  c.threshold = 1.0;
  const auto short_prompts = throughput_probe(p, c, c, 300, 16, 5, 5);
  const auto long_prompts = throughput_probe(p, c, c, 300, 32, 5, 5);
  EXPECT_LE(long_prompts.seconds_per_prompt_a / short_prompts.seconds_per_prompt_a, 2.2);
}
