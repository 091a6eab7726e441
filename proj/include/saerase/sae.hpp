#pragma once

// K-sparse autoencoder model: TopK sparse codes, encode/decode, checkpoints.
//
//   z = TopK(W_enc (e - b_pre))     only strictly positive survivors are kept
//   e_hat = W_dec z + b_pre         column rho of W_dec is feature vector f_rho

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <vector>

#include "binary_io.hpp"
#include "embdump.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace saerase {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using ColMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Sparse latent code. indices strictly increasing; TopK output values are
/// strictly positive, deactivated codes may carry negative values. Zeros are
/// never stored.
template <typename Scalar>
struct SparseActivation {
  std::vector<std::uint32_t> indices;
  std::vector<Scalar> values;
  std::size_t d_hid = 0;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }

  Vector<Scalar> dense() const {
    Vector<Scalar> out = Vector<Scalar>::Zero(static_cast<Eigen::Index>(d_hid));
    for (std::size_t i = 0; i < indices.size(); ++i) out[indices[i]] = values[i];
    return out;
  }

  bool operator==(const SparseActivation&) const = default;
};

namespace detail {

// Order for TopK selection: larger value first, lower index on ties.
template <typename Values>
auto topk_order(const Values& v) {
  return [&v](std::uint32_t a, std::uint32_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
}

template <typename Scalar, typename Values>
SparseActivation<Scalar> select_top(const Values& v, std::vector<std::uint32_t>& candidates, std::size_t k,
                                    std::size_t d_hid) {
  if (candidates.size() > k) {
    std::nth_element(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                     topk_order(v));
    candidates.resize(k);
  }
  std::sort(candidates.begin(), candidates.end());
  SparseActivation<Scalar> z;
  z.d_hid = d_hid;
  z.indices = candidates;
  z.values.reserve(candidates.size());
  for (auto i : candidates) z.values.push_back(v[i]);
  return z;
}

}  // namespace detail

/// Keeps the k largest strictly positive entries; ties go to the lower index.
template <typename Derived>
SparseActivation<typename Derived::Scalar> topk(const Eigen::MatrixBase<Derived>& v, std::size_t k) {
  using Scalar = typename Derived::Scalar;
  const auto n = static_cast<std::size_t>(v.size());
  if (k > n) throw DataError("topk: k=" + std::to_string(k) + " exceeds vector length " + std::to_string(n));
  std::vector<std::uint32_t> positive;
  positive.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (v[static_cast<Eigen::Index>(i)] > Scalar(0)) positive.push_back(static_cast<std::uint32_t>(i));
  }
  return detail::select_top<Scalar>(v.derived(), positive, k, n);
}

inline SparseActivation<double> topk(std::span<const double> v, std::size_t k) {
  return topk(Eigen::Map<const Vector<double>>(v.data(), static_cast<Eigen::Index>(v.size())), k);
}

/// TopK restricted to `candidates` (used for the dead-feature auxiliary code).
template <typename Derived>
SparseActivation<typename Derived::Scalar> topk_among(const Eigen::MatrixBase<Derived>& v,
                                                      std::span<const std::uint32_t> candidates, std::size_t k) {
  using Scalar = typename Derived::Scalar;
  std::vector<std::uint32_t> positive;
  positive.reserve(candidates.size());
  for (auto i : candidates) {
    if (v[i] > Scalar(0)) positive.push_back(i);
  }
  return detail::select_top<Scalar>(v.derived(), positive, k, static_cast<std::size_t>(v.size()));
}

template <typename Scalar>
struct SaeParams {
  RowMatrix<Scalar> w_enc;  // d_hid x d_in
  ColMatrix<Scalar> w_dec;  // d_in x d_hid
  Vector<Scalar> b_pre;     // d_in
  std::size_t k = 1;

  std::size_t d_in() const { return static_cast<std::size_t>(b_pre.size()); }
  std::size_t d_hid() const { return static_cast<std::size_t>(w_enc.rows()); }

  auto feature(std::size_t rho) const { return w_dec.col(static_cast<Eigen::Index>(rho)); }

  void validate() const {
    if (k == 0 || k > d_hid()) throw DataError("SAE requires 1 <= k <= d_hid");
    if (static_cast<std::size_t>(w_enc.cols()) != d_in() || static_cast<std::size_t>(w_dec.rows()) != d_in() ||
        static_cast<std::size_t>(w_dec.cols()) != d_hid()) {
      throw DataError("SAE parameter shapes are inconsistent");
    }
  }

  template <typename Other>
  SaeParams<Other> cast() const {
    return {w_enc.template cast<Other>(), w_dec.template cast<Other>(), b_pre.template cast<Other>(), k};
  }

  bool operator==(const SaeParams& o) const {
    return k == o.k && w_enc == o.w_enc && w_dec == o.w_dec && b_pre == o.b_pre;
  }
};

template <typename Scalar, typename Derived>
Vector<Scalar> preactivations(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& e) {
  detail::require_dims(static_cast<std::size_t>(e.size()) == params.d_in(),
                       "input has " + std::to_string(e.size()) + " values, d_in is " + std::to_string(params.d_in()));
  return params.w_enc * (e.template cast<Scalar>() - params.b_pre);
}

template <typename Scalar, typename Derived>
SparseActivation<Scalar> encode(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& e) {
  return topk(preactivations(params, e), params.k);
}

template <typename Scalar>
Vector<Scalar> decode(const SaeParams<Scalar>& params, const SparseActivation<Scalar>& z) {
  detail::require_dims(z.d_hid == params.d_hid(), "code width " + std::to_string(z.d_hid) + " vs d_hid " +
                                                      std::to_string(params.d_hid()));
  Vector<Scalar> out = params.b_pre;
  for (std::size_t i = 0; i < z.size(); ++i) out.noalias() += z.values[i] * params.feature(z.indices[i]);
  return out;
}

/// Squared Euclidean distance.
template <typename A, typename B>
auto recon_loss(const Eigen::MatrixBase<A>& e, const Eigen::MatrixBase<B>& e_hat) {
  detail::require_dims(e.size() == e_hat.size(), "recon_loss operands differ in length");
  return (e - e_hat).squaredNorm();
}

/// b_pre = sample mean, decoder columns random unit directions, W_enc = W_dec^T.
template <typename Scalar, typename Derived>
SaeParams<Scalar> init_params(std::size_t d_in, std::size_t d_hid, std::size_t k,
                              const Eigen::MatrixBase<Derived>& sample, std::uint64_t seed) {
  if (sample.rows() == 0) throw DataError("init_params: empty sample");
  detail::require_dims(static_cast<std::size_t>(sample.cols()) == d_in, "init sample width vs d_in");
  if (k == 0 || k > d_hid) throw ConfigError("k must satisfy 1 <= k <= d_hid");
  if (d_hid < d_in) throw ConfigError("d_hid must be >= d_in");
  SaeParams<Scalar> p;
  p.k = k;
  p.b_pre = sample.template cast<Scalar>().colwise().mean().transpose();
  p.w_dec.resize(static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d_hid));
  Rng rng(seed);
  for (Eigen::Index c = 0; c < p.w_dec.cols(); ++c) {
    Scalar norm = 0;
    do {
      for (Eigen::Index r = 0; r < p.w_dec.rows(); ++r) p.w_dec(r, c) = static_cast<Scalar>(rng.normal());
      norm = p.w_dec.col(c).norm();
    } while (norm < Scalar(1e-6));
    p.w_dec.col(c) /= norm;
  }
  p.w_enc = p.w_dec.transpose();
  return p;
}

// Checkpoint: [magic "SAEM"][version u32][d_in u32][d_hid u32][k u32] then
// b_pre (d_in), W_enc (d_hid rows of d_in), W_dec (d_hid feature vectors of
// d_in), all float32 little-endian.

inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'A', 'E', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const SaeParams<Scalar>& params) {
  params.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint: " + path.string());
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  binary::write(os, kCheckpointVersion);
  binary::write(os, static_cast<std::uint32_t>(params.d_in()));
  binary::write(os, static_cast<std::uint32_t>(params.d_hid()));
  binary::write(os, static_cast<std::uint32_t>(params.k));
  const Vector<float> b = params.b_pre.template cast<float>();
  binary::write_f32(os, std::span<const float>(b.data(), b.size()));
  const RowMatrix<float> enc = params.w_enc.template cast<float>();
  binary::write_f32(os, std::span<const float>(enc.data(), enc.size()));
  const ColMatrix<float> dec = params.w_dec.template cast<float>();  // column-major: features contiguous
  binary::write_f32(os, std::span<const float>(dec.data(), dec.size()));
  if (!os) throw DataError("I/O failure writing checkpoint: " + path.string());
}

template <typename Scalar = double>
SaeParams<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw DataError("bad checkpoint magic in " + path.string());
  }
  std::uint32_t version = 0, d_in = 0, d_hid = 0, k = 0;
  if (!binary::read(is, version) || version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version in " + path.string());
  }
  if (!binary::read(is, d_in) || !binary::read(is, d_hid) || !binary::read(is, k)) {
    throw DataError("truncated checkpoint header: " + path.string());
  }
  if (d_in == 0 || d_hid == 0 || k == 0 || k > d_hid) throw DataError("invalid checkpoint dimensions");
  Vector<float> b(d_in);
  RowMatrix<float> enc(d_hid, d_in);
  ColMatrix<float> dec(d_in, d_hid);
  if (binary::read_f32(is, std::span<float>(b.data(), b.size())) != static_cast<std::size_t>(b.size()) ||
      binary::read_f32(is, std::span<float>(enc.data(), enc.size())) != static_cast<std::size_t>(enc.size()) ||
      binary::read_f32(is, std::span<float>(dec.data(), dec.size())) != static_cast<std::size_t>(dec.size())) {
    throw DataError("truncated checkpoint payload: " + path.string());
  }
  SaeParams<Scalar> p;
  p.k = k;
  p.b_pre = b.cast<Scalar>();
  p.w_enc = enc.cast<Scalar>();
  p.w_dec = dec.cast<Scalar>();
  return p;
}

}  // namespace saerase
