#include <gtest/gtest.h>

#include <saerase/train.hpp>

#include "support/fixtures.hpp"

using namespace saerase;

namespace {

SynthResult small_corpus(std::uint64_t seed, std::size_t prompts = 120) {
  const auto dict = make_dictionary(16, 24, {{"a", 2}}, 0.01, seed);
  std::vector<PromptSpec> specs;
  for (std::size_t i = 0; i < prompts; ++i) specs.push_back({std::nullopt, 10, Split::train});
  specs.push_back({"a", 10, Split::target});
  return synth_generate(dict, specs, 3, seed + 1);
}

TrainConfig small_config() {
  TrainConfig c;
  c.k = 3;
  c.d_hid = 32;
  c.k_aux = 8;
  c.learning_rate = 1e-2;
  c.batch_size_prompts = 10;
  c.dead_window = 500;
  c.steps = 150;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Train, DefaultsMatchTheDocumentedHyperparameters) {
  const TrainConfig c;
  EXPECT_EQ(c.k, 64u);
  EXPECT_EQ(c.k_aux, 256u);
  EXPECT_EQ(c.d_hid, 1u << 19);
  EXPECT_DOUBLE_EQ(c.alpha, 1.0 / 32);
  EXPECT_DOUBLE_EQ(c.learning_rate, 5e-5);
  EXPECT_EQ(c.batch_size_prompts, 50u);
  EXPECT_EQ(to_json(c).at("schedule"), "constant");
}

TEST(Train, ConfigInvariantsAreEnforced) {
  auto c = small_config();
  c.k_aux = c.k;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.alpha = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Train, DeterministicAndReducesReconstruction) {
  const auto data = small_corpus(3);
  const auto a = train(data.dump, small_config());
  const auto b = train(data.dump, small_config());
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.report.loss_curve, b.report.loss_curve);
  ASSERT_EQ(a.report.recon_curve.size(), 150u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += a.report.recon_curve[i];
    tail += a.report.recon_curve[140 + i];
  }
  EXPECT_LT(tail, 0.5 * head);
  EXPECT_EQ(a.report.tokens_seen, 150u * 100u);

  auto other = small_config();
  other.seed = 6;
  EXPECT_NE(train(data.dump, other).params, a.params);
}

TEST(Train, SmoothedLossCurveDecreases) {
  const auto data = small_corpus(7);
  const auto r = train(data.dump, small_config());
  std::vector<double> smoothed;
  for (std::size_t i = 0; i + 10 <= r.report.loss_curve.size(); i += 10) {
    double s = 0;
    for (std::size_t j = i; j < i + 10; ++j) s += r.report.loss_curve[j];
    smoothed.push_back(s / 10);
  }
  ASSERT_EQ(smoothed.size(), 15u);
  for (std::size_t i = 1; i < smoothed.size(); ++i) EXPECT_LE(smoothed[i], smoothed[i - 1]) << i;
}

TEST(Train, OnlySelectedSplitsAreUsed) {
  auto data = small_corpus(4, 3);
  auto c = small_config();
  c.steps = 2;
  c.splits = {Split::retain};
  EXPECT_THROW(train(data.dump, c), DataError);
  c.splits = {Split::target};
  EXPECT_EQ(train(data.dump, c).report.tokens_seen, 20u);  // one 10-token prompt per step
}

TEST(Train, NonFiniteDataAbortsWithNumericalError) {
  auto data = small_corpus(5, 20);
  data.dump.rows(3, 2) = std::numeric_limits<float>::infinity();
  auto c = small_config();
  c.batch_size_prompts = 21;
  EXPECT_THROW(train(data.dump, c), NumericalError);
}
