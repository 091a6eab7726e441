#pragma once

// Deactivation block: encode, scale the erase-set activations by `strength`,
// decode, then use the reconstruction error against the deactivated
// reconstruction as a zero-shot detector. Prompts judged normal pass through
// untouched; flagged prompts are replaced by their deactivated reconstruction.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <vector>

#include "conceptsel.hpp"
#include "density.hpp"
#include "rng.hpp"
#include "sae.hpp"

namespace saerase {

enum class TokenAggregate { max, mean };
enum class Granularity { prompt, token };

inline std::string to_string(TokenAggregate a) { return a == TokenAggregate::max ? "max" : "mean"; }
inline std::string to_string(Granularity g) { return g == Granularity::prompt ? "prompt" : "token"; }

struct EraseConfig {
  FeatureSet erase_set;
  double strength = -2.0;  // lambda; -4 is the preset for explicit content
  double threshold = 0.0;  // tau; flagged iff aggregate mse >= tau
  TokenAggregate token_aggregate = TokenAggregate::max;
  Granularity granularity = Granularity::prompt;
};

inline constexpr double kDefaultStrength = -2.0;
inline constexpr double kExplicitContentStrength = -4.0;

template <typename InScalar>
struct EraseOutcome {
  std::vector<double> per_token_mse;
  std::vector<bool> token_flagged;  // per-token decision (token granularity) or the prompt decision repeated
  bool flagged = false;
  double aggregate_mse = 0;
  RowMatrix<InScalar> output_rows;
};

/// Multiplies activations on erase-set features by `strength`. Entries that
/// become exactly zero are dropped (0 * f_rho contributes nothing to decode).
template <typename Scalar>
SparseActivation<Scalar> deactivate(const SparseActivation<Scalar>& z, const FeatureSet& erase_set, double strength) {
  detail::require_dims(z.d_hid == erase_set.d_hid(), "code width vs erase set d_hid");
  SparseActivation<Scalar> out;
  out.d_hid = z.d_hid;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const Scalar v = erase_set.contains(z.indices[i]) ? z.values[i] * static_cast<Scalar>(strength) : z.values[i];
    if (v != Scalar(0)) {
      out.indices.push_back(z.indices[i]);
      out.values.push_back(v);
    }
  }
  return out;
}

template <typename Scalar>
struct ErasedReconstruction {
  Vector<Scalar> e_hat;
  Scalar mse = 0;
};

template <typename Scalar, typename Derived>
ErasedReconstruction<Scalar> erase_reconstruct(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& e,
                                               const EraseConfig& config) {
  ErasedReconstruction<Scalar> out;
  out.e_hat = decode(params, deactivate(encode(params, e), config.erase_set, config.strength));
  out.mse = recon_loss(e.template cast<Scalar>(), out.e_hat);
  return out;
}

inline double aggregate_mse(const std::vector<double>& per_token, TokenAggregate how) {
  if (per_token.empty()) throw DataError("classify: empty per-token mse list");
  if (how == TokenAggregate::max) return *std::max_element(per_token.begin(), per_token.end());
  double s = 0;
  for (const double v : per_token) s += v;
  return s / static_cast<double>(per_token.size());
}

/// Target detected iff the aggregated mse reaches the threshold.
inline bool classify(const std::vector<double>& per_token_mse, const EraseConfig& config) {
  return aggregate_mse(per_token_mse, config.token_aggregate) >= config.threshold;
}

/// Block with the erase-set membership precomputed as a dense mask, so the
/// per-token cost does not depend on how many concepts were merged into it.
template <typename Scalar>
class DeactivationBlock {
 public:
  DeactivationBlock(SaeParams<Scalar> params, EraseConfig config)
      : params_(std::move(params)), config_(std::move(config)), mask_(params_.d_hid(), 0) {
    params_.validate();
    detail::require_dims(config_.erase_set.d_hid() == params_.d_hid(), "erase set d_hid vs model d_hid");
    for (auto rho : config_.erase_set.indices()) mask_[rho] = 1;
  }

  const EraseConfig& config() const { return config_; }
  const SaeParams<Scalar>& params() const { return params_; }

  template <typename Derived>
  EraseOutcome<typename Derived::Scalar> run(const Eigen::MatrixBase<Derived>& rows) const {
    using InScalar = typename Derived::Scalar;
    if (rows.rows() == 0) throw DataError("deactivation_block: empty prompt");
    detail::require_dims(static_cast<std::size_t>(rows.cols()) == params_.d_in(), "prompt row width vs d_in");
    const auto n = rows.rows();
    const RowMatrix<Scalar> input = rows.template cast<Scalar>();
    const RowMatrix<Scalar> pre = (input.rowwise() - params_.b_pre.transpose()) * params_.w_enc.transpose();
    const auto strength = static_cast<Scalar>(config_.strength);

    EraseOutcome<InScalar> out;
    out.per_token_mse.resize(static_cast<std::size_t>(n));
    RowMatrix<Scalar> erased(n, input.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto z = topk(pre.row(i).transpose(), params_.k);
      auto row = erased.row(i);
      row = params_.b_pre.transpose();
      for (std::size_t j = 0; j < z.size(); ++j) {
        const Scalar v = mask_[z.indices[j]] ? z.values[j] * strength : z.values[j];
        row.noalias() += v * params_.feature(z.indices[j]).transpose();
      }
      out.per_token_mse[static_cast<std::size_t>(i)] = static_cast<double>((input.row(i) - row).squaredNorm());
    }
    out.aggregate_mse = aggregate_mse(out.per_token_mse, config_.token_aggregate);
    out.flagged = out.aggregate_mse >= config_.threshold;

    out.output_rows = rows;  // exact copy; flagged rows overwritten below
    out.token_flagged.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool use_erased = config_.granularity == Granularity::prompt
                                  ? out.flagged
                                  : out.per_token_mse[static_cast<std::size_t>(i)] >= config_.threshold;
      out.token_flagged[static_cast<std::size_t>(i)] = use_erased;
      if (use_erased) out.output_rows.row(i) = erased.row(i).template cast<InScalar>();
    }
    return out;
  }

 private:
  SaeParams<Scalar> params_;
  EraseConfig config_;
  std::vector<std::uint8_t> mask_;
};

template <typename Scalar, typename Derived>
EraseOutcome<typename Derived::Scalar> deactivation_block(const SaeParams<Scalar>& params,
                                                          const Eigen::MatrixBase<Derived>& prompt_rows,
                                                          const EraseConfig& config) {
  return DeactivationBlock<Scalar>(params, config).run(prompt_rows);
}

struct Calibration {
  double threshold = 0;
  double max_retain_mse = 0;
  std::vector<double> retain_mse;  // aggregate mse per retain prompt
  bool degenerate = false;         // every retain prompt reconstructs exactly; threshold is 0
};

/// threshold = margin * (largest aggregate mse over the retain prompts).
/// `prompts` are row ranges into `rows`.
template <typename Scalar, typename Derived>
Calibration calibrate_threshold(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& rows,
                                const std::vector<PromptSpan>& prompts, EraseConfig config,
                                double safety_margin = 1.5) {
  if (prompts.empty()) throw DataError("calibrate_threshold: no retain prompts");
  if (!(safety_margin > 0)) throw ConfigError("safety margin must be positive");
  config.threshold = 0;
  const DeactivationBlock<Scalar> block(params, std::move(config));
  Calibration cal;
  for (const auto& p : prompts) {
    const auto o = block.run(rows.middleRows(static_cast<Eigen::Index>(p.first_row),
                                             static_cast<Eigen::Index>(p.row_count)));
    cal.retain_mse.push_back(o.aggregate_mse);
  }
  cal.max_retain_mse = *std::max_element(cal.retain_mse.begin(), cal.retain_mse.end());
  cal.threshold = safety_margin * cal.max_retain_mse;
  cal.degenerate = cal.max_retain_mse == 0.0;
  return cal;
}

struct ThroughputReport {
  std::size_t n_prompts = 0;
  std::size_t token_len = 0;
  std::size_t rounds = 0;
  double seconds_per_prompt_a = 0;  // median over rounds
  double seconds_per_prompt_b = 0;
  double ratio = 0;                 // b / a
};

/// Times the block on the same random prompts under two configurations,
/// interleaving the two in every round and reporting per-prompt medians.
template <typename Scalar>
ThroughputReport throughput_probe(const SaeParams<Scalar>& params, const EraseConfig& config_a,
                                  const EraseConfig& config_b, std::size_t n_prompts, std::size_t token_len,
                                  std::uint64_t seed, std::size_t rounds = 5) {
  if (n_prompts == 0) throw ConfigError("throughput_probe: n_prompts must be >= 1");
  if (token_len == 0) throw ConfigError("throughput_probe: token_len must be >= 1");
  rounds = std::max<std::size_t>(rounds, 1);
  const DeactivationBlock<Scalar> block_a(params, config_a);
  const DeactivationBlock<Scalar> block_b(params, config_b);
  Rng rng(seed);
  RowMatrix<float> data(static_cast<Eigen::Index>(n_prompts * token_len), static_cast<Eigen::Index>(params.d_in()));
  for (Eigen::Index i = 0; i < data.size(); ++i) data.data()[i] = static_cast<float>(rng.normal());

  auto time_block = [&](const DeactivationBlock<Scalar>& block) {
    double sink = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t p = 0; p < n_prompts; ++p) {
      const auto o = block.run(data.middleRows(static_cast<Eigen::Index>(p * token_len),
                                               static_cast<Eigen::Index>(token_len)));
      sink += o.aggregate_mse;
    }
    const auto t1 = std::chrono::steady_clock::now();
    if (std::isnan(sink)) throw NumericalError("throughput probe produced NaN");
    return std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(n_prompts);
  };

  time_block(block_a);  // warm-up
  std::vector<double> ta, tb;
  for (std::size_t r = 0; r < rounds; ++r) {
    if (r % 2 == 0) {
      ta.push_back(time_block(block_a));
      tb.push_back(time_block(block_b));
    } else {
      tb.push_back(time_block(block_b));
      ta.push_back(time_block(block_a));
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  ThroughputReport rep;
  rep.n_prompts = n_prompts;
  rep.token_len = token_len;
  rep.rounds = rounds;
  rep.seconds_per_prompt_a = median(ta);
  rep.seconds_per_prompt_b = median(tb);
  rep.ratio = rep.seconds_per_prompt_b / rep.seconds_per_prompt_a;
  return rep;
}

}  // namespace saerase
