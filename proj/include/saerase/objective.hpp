#pragma once

// Training objective: mean over a batch of
//   ||e - e_hat||^2 + alpha * ||(e - e_hat) - W_dec z_aux||^2
// where z_aux is the TopK_aux code restricted to currently dead features.
// Gradients are exact for this piecewise-smooth loss; TopK passes gradient
// only through the kept indices.

#include <cstdint>
#include <span>
#include <vector>

#include "sae.hpp"

namespace saerase {

/// Tokens elapsed since each feature last fired in the main TopK code.
class DeadFeatureTracker {
 public:
  DeadFeatureTracker(std::size_t d_hid, std::uint64_t dead_window)
      : last_fired_(d_hid, 0), window_(dead_window) {}

  std::size_t d_hid() const { return last_fired_.size(); }
  std::uint64_t tokens_seen() const { return tokens_seen_; }
  std::uint64_t window() const { return window_; }
  std::span<const std::uint64_t> last_fired() const { return last_fired_; }

  bool is_dead(std::size_t rho) const { return last_fired_[rho] >= window_; }

  std::vector<std::uint32_t> dead_indices() const {
    std::vector<std::uint32_t> out;
    for (std::size_t r = 0; r < last_fired_.size(); ++r) {
      if (is_dead(r)) out.push_back(static_cast<std::uint32_t>(r));
    }
    return out;
  }

  double dead_fraction() const {
    return last_fired_.empty() ? 0.0
                               : static_cast<double>(dead_indices().size()) / static_cast<double>(last_fired_.size());
  }

  /// `fired[rho]` nonzero if rho fired anywhere in a batch of `tokens` rows.
  void update(std::span<const std::uint32_t> fired, std::uint64_t tokens) {
    detail::require_dims(fired.size() == last_fired_.size(), "tracker update width");
    for (std::size_t r = 0; r < fired.size(); ++r) last_fired_[r] = fired[r] ? 0 : last_fired_[r] + tokens;
    tokens_seen_ += tokens;
  }

 private:
  std::vector<std::uint64_t> last_fired_;
  std::uint64_t window_;
  std::uint64_t tokens_seen_ = 0;
};

template <typename Scalar>
struct Gradients {
  RowMatrix<Scalar> w_enc;
  ColMatrix<Scalar> w_dec;
  Vector<Scalar> b_pre;

  static Gradients zeros_like(const SaeParams<Scalar>& p) {
    return {RowMatrix<Scalar>::Zero(p.w_enc.rows(), p.w_enc.cols()),
            ColMatrix<Scalar>::Zero(p.w_dec.rows(), p.w_dec.cols()), Vector<Scalar>::Zero(p.b_pre.size())};
  }
};

struct ObjectiveSettings {
  double alpha = 1.0 / 32.0;
  std::size_t k_aux = 256;
};

template <typename Scalar>
struct BatchEvaluation {
  Scalar loss = 0;   // mean total loss
  Scalar recon = 0;  // mean ||e - e_hat||^2
  Scalar aux = 0;    // mean auxiliary loss (unscaled)
  std::vector<std::uint32_t> fire_counts;  // per feature, rows where it was in the main code
};

/// Auxiliary loss for one token given its main reconstruction e_hat.
/// Returns 0 when no feature is dead.
template <typename Scalar, typename E, typename EH>
Scalar aux_loss(const SaeParams<Scalar>& params, const Eigen::MatrixBase<E>& e, const Eigen::MatrixBase<EH>& e_hat,
                std::span<const std::uint32_t> dead, std::size_t k_aux) {
  if (k_aux <= params.k) throw ConfigError("k_aux must exceed k");
  detail::require_dims(static_cast<std::size_t>(e_hat.size()) == params.d_in(), "aux_loss reconstruction width");
  if (dead.empty()) return Scalar(0);
  const Vector<Scalar> pre = preactivations(params, e);
  const auto z_aux = topk_among(pre, dead, k_aux);
  Vector<Scalar> residual = e.template cast<Scalar>() - e_hat.template cast<Scalar>();
  for (std::size_t i = 0; i < z_aux.size(); ++i) residual.noalias() -= z_aux.values[i] * params.feature(z_aux.indices[i]);
  return residual.squaredNorm();
}

template <typename Scalar, typename E, typename EH>
Scalar aux_loss(const SaeParams<Scalar>& params, const Eigen::MatrixBase<E>& e, const Eigen::MatrixBase<EH>& e_hat,
                const DeadFeatureTracker& tracker, std::size_t k_aux) {
  const auto dead = tracker.dead_indices();
  return aux_loss(params, e, e_hat, std::span<const std::uint32_t>(dead), k_aux);
}

/// Loss (and optionally its gradient) of the mean total loss over `batch`.
template <typename Scalar, typename Derived>
BatchEvaluation<Scalar> evaluate_batch(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& batch,
                                       std::span<const std::uint32_t> dead, const ObjectiveSettings& settings,
                                       Gradients<Scalar>* grads) {
  if (batch.rows() == 0) throw DataError("empty batch");
  detail::require_dims(static_cast<std::size_t>(batch.cols()) == params.d_in(), "batch width vs d_in");
  if (!dead.empty() && settings.k_aux <= params.k) throw ConfigError("k_aux must exceed k");

  const auto n = batch.rows();
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  const Scalar alpha = static_cast<Scalar>(settings.alpha);
  const bool use_aux = !dead.empty() && settings.alpha != 0.0;

  const RowMatrix<Scalar> centered = batch.template cast<Scalar>().rowwise() - params.b_pre.transpose();
  const RowMatrix<Scalar> pre = centered * params.w_enc.transpose();  // n x d_hid

  BatchEvaluation<Scalar> out;
  out.fire_counts.assign(params.d_hid(), 0);
  if (grads) *grads = Gradients<Scalar>::zeros_like(params);

  Vector<Scalar> e_hat(params.d_in()), aux_hat(params.d_in()), g_main(params.d_in()), g_aux(params.d_in());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto pre_i = pre.row(i).transpose();
    const auto z = topk(pre_i, params.k);
    for (auto r : z.indices) ++out.fire_counts[r];

    e_hat = params.b_pre;
    for (std::size_t j = 0; j < z.size(); ++j) e_hat.noalias() += z.values[j] * params.feature(z.indices[j]);
    const Vector<Scalar> diff = e_hat - batch.row(i).transpose().template cast<Scalar>();  // e_hat - e
    const Scalar recon = diff.squaredNorm();
    out.recon += recon * inv_n;

    SparseActivation<Scalar> z_aux;
    Vector<Scalar> aux_diff;
    if (use_aux) {
      z_aux = topk_among(pre_i, dead, settings.k_aux);
      aux_hat.setZero();
      for (std::size_t j = 0; j < z_aux.size(); ++j) aux_hat.noalias() += z_aux.values[j] * params.feature(z_aux.indices[j]);
      aux_diff = aux_hat + diff;  // W_dec z_aux - (e - e_hat)
      out.aux += aux_diff.squaredNorm() * inv_n;
    }

    if (!grads) continue;
    g_main = Scalar(2) * inv_n * diff;
    if (use_aux) {
      g_aux = Scalar(2) * inv_n * alpha * aux_diff;
      g_main += g_aux;  // e_hat also enters the aux residual
    }
    grads->b_pre += g_main;
    const auto x_i = centered.row(i);
    auto backprop = [&](const SparseActivation<Scalar>& code, const Vector<Scalar>& g_out) {
      for (std::size_t j = 0; j < code.size(); ++j) {
        const auto rho = static_cast<Eigen::Index>(code.indices[j]);
        grads->w_dec.col(rho).noalias() += code.values[j] * g_out;
        const Scalar d_pre = params.w_dec.col(rho).dot(g_out);
        grads->w_enc.row(rho).noalias() += d_pre * x_i;
        grads->b_pre.noalias() -= d_pre * params.w_enc.row(rho).transpose();
      }
    };
    backprop(z, g_main);
    if (use_aux) backprop(z_aux, g_aux);
  }
  out.loss = out.recon + (use_aux ? alpha * out.aux : Scalar(0));
  return out;
}

template <typename Scalar, typename Derived>
Gradients<Scalar> grad(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& batch,
                       std::span<const std::uint32_t> dead, const ObjectiveSettings& settings) {
  Gradients<Scalar> g;
  evaluate_batch(params, batch, dead, settings, &g);
  return g;
}

template <typename Scalar, typename Derived>
Scalar total_loss(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& batch,
                  std::span<const std::uint32_t> dead, const ObjectiveSettings& settings) {
  return evaluate_batch<Scalar>(params, batch, dead, settings, nullptr).loss;
}

}  // namespace saerase
