#pragma once

#include <cmath>
#include <vector>

#include "sae.hpp"

namespace saerase {

inline constexpr double kDensityFloor = 1e-9;

/// Per-feature firing counts over the rows of `data`.
template <typename Scalar, typename Derived>
std::vector<std::uint64_t> fire_counts(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& data,
                                       Eigen::Index chunk = 4096) {
  detail::require_dims(static_cast<std::size_t>(data.cols()) == params.d_in(), "data width vs d_in");
  std::vector<std::uint64_t> counts(params.d_hid(), 0);
  for (Eigen::Index start = 0; start < data.rows(); start += chunk) {
    const auto n = std::min(chunk, data.rows() - start);
    const RowMatrix<Scalar> pre =
        (data.middleRows(start, n).template cast<Scalar>().rowwise() - params.b_pre.transpose()) *
        params.w_enc.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (auto r : topk(pre.row(i).transpose(), params.k).indices) ++counts[r];
    }
  }
  return counts;
}

/// log10(n_rho / N + 1e-9) for every feature, n_rho = rows on which rho is active.
template <typename Scalar, typename Derived>
std::vector<double> feature_density(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& data) {
  if (data.rows() == 0) throw DataError("feature_density: empty data");
  const auto counts = fire_counts(params, data);
  const auto total = static_cast<double>(data.rows());
  std::vector<double> out(counts.size());
  for (std::size_t r = 0; r < counts.size(); ++r) {
    out[r] = std::log10(static_cast<double>(counts[r]) / total + kDensityFloor);
  }
  return out;
}

/// Equal-width histogram over [lo, hi]; values outside are clamped to the end bins.
struct Histogram {
  double lo = 0;
  double hi = 0;
  std::vector<std::size_t> counts;

  static Histogram build(const std::vector<double>& values, std::size_t bins) {
    Histogram h;
    h.counts.assign(std::max<std::size_t>(bins, 1), 0);
    if (values.empty()) return h;
    h.lo = *std::min_element(values.begin(), values.end());
    h.hi = *std::max_element(values.begin(), values.end());
    const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
    for (const double v : values) {
      std::size_t b = width > 0 ? static_cast<std::size_t>((v - h.lo) / width) : 0;
      h.counts[std::min(b, h.counts.size() - 1)]++;
    }
    return h;
  }

  double bin_lo(std::size_t b) const {
    return lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(counts.size());
  }
};

}  // namespace saerase
