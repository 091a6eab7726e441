#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <vector>

#include <json.hpp>

#include "adam.hpp"
#include "embdump.hpp"
#include "objective.hpp"
#include "rng.hpp"

namespace saerase {

/// Production defaults follow the reference setup (K=64, d_hid=2^19,
/// K_aux=256, alpha=1/32, Adam lr 5e-5 constant, 50 prompts per batch).
struct TrainConfig {
  std::size_t k = 64;
  std::size_t d_hid = std::size_t{1} << 19;
  std::size_t k_aux = 256;
  double alpha = 1.0 / 32.0;
  double learning_rate = 5e-5;
  std::size_t batch_size_prompts = 50;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t dead_window = 1'000'000;
  std::size_t steps = 1;
  std::uint64_t seed = 0;
  std::set<Split> splits{Split::train};  // rows used for training

  void validate() const {
    if (k == 0) throw ConfigError("k must be positive");
    if (d_hid < k) throw ConfigError("d_hid must be >= k");
    if (k_aux <= k) throw ConfigError("k_aux must exceed k");
    if (!(alpha >= 0)) throw ConfigError("alpha must be >= 0");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size_prompts == 0) throw ConfigError("batch_size_prompts must be positive");
    if (dead_window == 0) throw ConfigError("dead_window must be positive");
    if (steps == 0) throw ConfigError("steps must be >= 1");
    if (splits.empty()) throw ConfigError("no training splits selected");
  }

  ObjectiveSettings objective() const { return {alpha, k_aux}; }
  AdamSettings adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_eps}; }
};

struct TrainReport {
  std::size_t steps = 0;
  std::uint64_t tokens_seen = 0;
  double final_loss = 0;
  double final_recon = 0;
  double dead_fraction = 0;
  std::vector<double> loss_curve;   // mean total loss per step
  std::vector<double> recon_curve;  // mean reconstruction loss per step
};

inline nlohmann::json to_json(const TrainConfig& c) {
  std::vector<std::string> splits;
  for (auto s : c.splits) splits.push_back(to_string(s));
  return {{"k", c.k},
          {"d_hid", c.d_hid},
          {"k_aux", c.k_aux},
          {"alpha", c.alpha},
          {"learning_rate", c.learning_rate},
          {"schedule", "constant"},
          {"batch_size_prompts", c.batch_size_prompts},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"dead_window", c.dead_window},
          {"steps", c.steps},
          {"seed", c.seed},
          {"splits", splits}};
}

inline nlohmann::json to_json(const TrainReport& r) {
  return {{"steps", r.steps},
          {"tokens_seen", r.tokens_seen},
          {"final_loss", r.final_loss},
          {"final_recon", r.final_recon},
          {"dead_fraction", r.dead_fraction},
          {"loss_curve", r.loss_curve},
          {"recon_curve", r.recon_curve}};
}

template <typename Scalar>
struct TrainResult {
  SaeParams<Scalar> params;
  TrainReport report;
};

using StepCallback = std::function<void(std::size_t step, double loss, double recon, double dead_fraction)>;

/// Trains a K-sparse autoencoder on the rows of `data` whose split is in
/// config.splits. Batches are whole prompts; prompt order is reshuffled each
/// epoch from the seed, so results are a pure function of (data, config).
template <typename Scalar = double>
TrainResult<Scalar> train(const EmbeddingDump& data, const TrainConfig& config, const StepCallback& on_step = {}) {
  config.validate();
  std::vector<PromptSpan> prompts;
  for (const auto& p : group_prompts(data.records)) {
    if (config.splits.contains(p.split)) prompts.push_back(p);
  }
  if (prompts.empty()) throw DataError("no training rows in the selected splits");
  const auto d_in = static_cast<std::size_t>(data.header.d_in);
  if (config.d_hid < d_in) throw ConfigError("d_hid must be >= d_in");

  std::size_t n_rows = 0;
  for (const auto& p : prompts) n_rows += p.row_count;
  RowMatrix<Scalar> all(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(d_in));
  {
    Eigen::Index r = 0;
    for (const auto& p : prompts) {
      for (std::size_t i = 0; i < p.row_count; ++i) {
        all.row(r++) = data.rows.row(static_cast<Eigen::Index>(p.first_row + i)).template cast<Scalar>();
      }
    }
  }

  TrainResult<Scalar> result;
  auto& params = result.params;
  params = init_params<Scalar>(d_in, config.d_hid, config.k, all, derive_seed(config.seed, "init"));
  auto state = AdamState<Scalar>::zeros_like(params);
  DeadFeatureTracker tracker(config.d_hid, config.dead_window);
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));

  std::vector<std::size_t> order(prompts.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto objective = config.objective();
  const auto adam = config.adam();

  RowMatrix<Scalar> batch;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<const PromptSpan*> chosen;
    std::size_t batch_rows = 0;
    while (chosen.size() < std::min(config.batch_size_prompts, prompts.size())) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.index(i)]);
        cursor = 0;
      }
      chosen.push_back(&prompts[order[cursor++]]);
      batch_rows += chosen.back()->row_count;
    }
    batch.resize(static_cast<Eigen::Index>(batch_rows), static_cast<Eigen::Index>(d_in));
    Eigen::Index r = 0;
    for (const auto* p : chosen) {
      for (std::size_t i = 0; i < p->row_count; ++i) {
        batch.row(r++) = data.rows.row(static_cast<Eigen::Index>(p->first_row + i)).template cast<Scalar>();
      }
    }

    const auto dead = tracker.dead_indices();
    Gradients<Scalar> g;
    const auto eval = evaluate_batch(params, batch, std::span<const std::uint32_t>(dead), objective, &g);
    if (!std::isfinite(static_cast<double>(eval.loss))) {
      throw NumericalError("non-finite loss at step " + std::to_string(step));
    }
    adam_step(params, std::move(g), state, adam);
    tracker.update(eval.fire_counts, batch_rows);

    result.report.loss_curve.push_back(static_cast<double>(eval.loss));
    result.report.recon_curve.push_back(static_cast<double>(eval.recon));
    if (on_step) on_step(step, static_cast<double>(eval.loss), static_cast<double>(eval.recon), tracker.dead_fraction());
  }
  auto& rep = result.report;
  rep.steps = config.steps;
  rep.tokens_seen = tracker.tokens_seen();
  rep.final_loss = rep.loss_curve.back();
  rep.final_recon = rep.recon_curve.back();
  rep.dead_fraction = tracker.dead_fraction();
  return result;
}

}  // namespace saerase
