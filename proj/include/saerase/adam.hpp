#pragma once

#include <cmath>
#include <cstdint>

#include "objective.hpp"

namespace saerase {

struct AdamSettings {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  Gradients<Scalar> m;
  Gradients<Scalar> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const SaeParams<Scalar>& p) {
    return {Gradients<Scalar>::zeros_like(p), Gradients<Scalar>::zeros_like(p), 0};
  }
};

namespace detail {

template <typename P, typename G, typename M, typename V>
void adam_update(P& param, const G& g, M& m, V& v, double bc1, double bc2, const AdamSettings& s) {
  using Scalar = typename P::Scalar;
  const auto b1 = static_cast<Scalar>(s.beta1);
  const auto b2 = static_cast<Scalar>(s.beta2);
  m = b1 * m + (Scalar(1) - b1) * g;
  v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
  param.array() -= static_cast<Scalar>(s.learning_rate) * (m.array() / static_cast<Scalar>(bc1)) /
                   ((v.array() / static_cast<Scalar>(bc2)).sqrt() + static_cast<Scalar>(s.eps));
}

}  // namespace detail

/// Unit-normalizes every decoder column.
template <typename Scalar>
void normalize_decoder(SaeParams<Scalar>& params) {
  for (Eigen::Index c = 0; c < params.w_dec.cols(); ++c) {
    const Scalar n = params.w_dec.col(c).norm();
    if (n > Scalar(0)) params.w_dec.col(c) /= n;
  }
}

/// One Adam step with bias correction. The decoder gradient is first
/// projected orthogonal to each column, and columns are renormalized to unit
/// norm after the update.
template <typename Scalar>
void adam_step(SaeParams<Scalar>& params, Gradients<Scalar> grads, AdamState<Scalar>& state,
               const AdamSettings& settings) {
  detail::require_dims(state.m.w_enc.rows() == params.w_enc.rows() && state.m.w_enc.cols() == params.w_enc.cols() &&
                           state.m.w_dec.cols() == params.w_dec.cols() && state.m.b_pre.size() == params.b_pre.size(),
                       "Adam state shape vs parameters");
  for (Eigen::Index c = 0; c < params.w_dec.cols(); ++c) {
    const auto f = params.w_dec.col(c);
    grads.w_dec.col(c) -= f.dot(grads.w_dec.col(c)) * f;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(settings.beta1, t);
  const double bc2 = 1.0 - std::pow(settings.beta2, t);
  detail::adam_update(params.w_enc, grads.w_enc, state.m.w_enc, state.v.w_enc, bc1, bc2, settings);
  detail::adam_update(params.w_dec, grads.w_dec, state.m.w_dec, state.v.w_dec, bc1, bc2, settings);
  detail::adam_update(params.b_pre, grads.b_pre, state.m.b_pre, state.v.b_pre, bc1, bc2, settings);
  normalize_decoder(params);
}

}  // namespace saerase
