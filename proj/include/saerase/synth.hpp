#pragma once

// Synthetic sparse-dictionary data with known ground truth. Each token is a
// positive sparse combination of unit-norm atoms plus isotropic noise; every
// concept-labelled token carries at least one atom owned by its concept.

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "embdump.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace saerase {

struct SyntheticDictionary {
  RowMatrix<double> atoms;  // n_atoms x d_in, unit-norm rows
  std::map<std::string, std::vector<std::size_t>> concept_assignments;
  double noise_sigma = 0.0;

  std::size_t n_atoms() const { return static_cast<std::size_t>(atoms.rows()); }
  std::size_t d_in() const { return static_cast<std::size_t>(atoms.cols()); }

  /// Atoms not owned by any concept.
  std::vector<std::size_t> background_atoms() const {
    std::vector<bool> owned(n_atoms(), false);
    for (const auto& [label, idx] : concept_assignments) {
      for (auto a : idx) owned[a] = true;
    }
    std::vector<std::size_t> out;
    for (std::size_t a = 0; a < n_atoms(); ++a) {
      if (!owned[a]) out.push_back(a);
    }
    return out;
  }
};

/// Random unit-norm atoms; concepts receive consecutive atom blocks in the
/// order given, the remainder is background.
inline SyntheticDictionary make_dictionary(
    std::size_t d_in, std::size_t n_atoms,
    const std::vector<std::pair<std::string, std::size_t>>& concepts, double noise_sigma,
    std::uint64_t seed) {
  if (d_in == 0 || n_atoms == 0) throw ConfigError("dictionary needs d_in >= 1 and n_atoms >= 1");
  if (noise_sigma < 0) throw ConfigError("noise_sigma must be nonnegative");
  SyntheticDictionary dict;
  dict.noise_sigma = noise_sigma;
  dict.atoms.resize(static_cast<Eigen::Index>(n_atoms), static_cast<Eigen::Index>(d_in));
  Rng rng(seed);
  for (Eigen::Index a = 0; a < dict.atoms.rows(); ++a) {
    double norm = 0;
    do {
      for (Eigen::Index j = 0; j < dict.atoms.cols(); ++j) dict.atoms(a, j) = rng.normal();
      norm = dict.atoms.row(a).norm();
    } while (norm < 1e-12);
    dict.atoms.row(a) /= norm;
  }
  std::size_t next = 0;
  for (const auto& [label, count] : concepts) {
    if (dict.concept_assignments.contains(label)) throw ConfigError("duplicate concept '" + label + "'");
    if (count == 0) throw ConfigError("concept '" + label + "' needs at least one atom");
    if (next + count > n_atoms) throw ConfigError("concepts require more atoms than n_atoms");
    auto& idx = dict.concept_assignments[label];
    for (std::size_t i = 0; i < count; ++i) idx.push_back(next++);
  }
  return dict;
}

struct PromptSpec {
  std::optional<std::string> concept_label;  // nullopt: background-only prompt
  std::size_t n_tokens = 1;
  Split split = Split::train;
};

struct SynthOptions {
  double coef_min = 0.5;
  double coef_max = 2.0;
  // Coefficient range for a token's own concept atoms; unset means coef_min/coef_max.
  std::optional<double> concept_coef_min;
  std::optional<double> concept_coef_max;
  std::size_t concept_atoms_per_token = 1;
  std::int32_t layer_index = -1;
};

/// Ground truth for one generated row.
struct RowTruth {
  std::vector<std::size_t> atoms;
  std::vector<double> coefficients;
};

struct SynthResult {
  EmbeddingDump dump;
  std::vector<RowTruth> truth;
};

namespace detail {

// Draws `count` distinct entries of `pool` (partial Fisher-Yates on a copy).
inline std::vector<std::size_t> sample_distinct(std::vector<std::size_t> pool, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.index(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace detail

inline SynthResult synth_generate(const SyntheticDictionary& dict, const std::vector<PromptSpec>& prompts,
                                  std::size_t sparsity, std::uint64_t seed, const SynthOptions& opts = {}) {
  if (sparsity == 0) throw ConfigError("sparsity must be positive");
  if (sparsity > dict.n_atoms()) {
    throw ConfigError("sparsity " + std::to_string(sparsity) + " exceeds atom count " +
                      std::to_string(dict.n_atoms()));
  }
  const double concept_lo = opts.concept_coef_min.value_or(opts.coef_min);
  const double concept_hi = opts.concept_coef_max.value_or(opts.coef_max);
  if (opts.coef_min <= 0 || opts.coef_max < opts.coef_min || concept_lo <= 0 || concept_hi < concept_lo) {
    throw ConfigError("coefficient ranges must be positive and ordered");
  }
  for (const auto& p : prompts) {
    if (p.concept_label && !dict.concept_assignments.contains(*p.concept_label)) {
      throw ConfigError("unknown concept label '" + *p.concept_label + "'");
    }
  }
  const auto background = dict.background_atoms();

  std::size_t total = 0;
  for (const auto& p : prompts) total += p.n_tokens;

  SynthResult out;
  auto& dump = out.dump;
  dump.header.d_in = static_cast<std::uint32_t>(dict.d_in());
  dump.header.row_count = total;
  dump.header.layer_index = opts.layer_index;
  dump.rows.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(dict.d_in()));
  dump.records.reserve(total);
  out.truth.reserve(total);

  Rng rng(seed);
  Eigen::VectorXd e(dict.d_in());
  std::size_t row = 0;
  for (std::size_t pid = 0; pid < prompts.size(); ++pid) {
    const auto& p = prompts[pid];
    for (std::size_t h = 0; h < p.n_tokens; ++h, ++row) {
      RowTruth t;
      std::vector<std::size_t> pool = background;
      if (p.concept_label) {
        const auto& own = dict.concept_assignments.at(*p.concept_label);
        const auto n_own = std::min(opts.concept_atoms_per_token, std::min(own.size(), sparsity));
        t.atoms = detail::sample_distinct(own, n_own, rng);
        for (auto a : own) {
          if (std::find(t.atoms.begin(), t.atoms.end(), a) == t.atoms.end()) pool.push_back(a);
        }
      }
      const auto rest = sparsity - t.atoms.size();
      if (rest > pool.size()) {
        throw ConfigError("sparsity " + std::to_string(sparsity) + " needs more background atoms than the " +
                          std::to_string(pool.size()) + " available");
      }
      for (auto a : detail::sample_distinct(pool, rest, rng)) t.atoms.push_back(a);

      e.setZero();
      const std::size_t own_count = p.concept_label ? t.atoms.size() - rest : 0;
      for (std::size_t j = 0; j < t.atoms.size(); ++j) {
        const auto a = t.atoms[j];
        const double c = j < own_count ? rng.uniform(concept_lo, concept_hi) : rng.uniform(opts.coef_min, opts.coef_max);
        t.coefficients.push_back(c);
        e += c * dict.atoms.row(static_cast<Eigen::Index>(a)).transpose();
      }
      if (dict.noise_sigma > 0) {
        for (Eigen::Index j = 0; j < e.size(); ++j) e[j] += dict.noise_sigma * rng.normal();
      }
      dump.rows.row(static_cast<Eigen::Index>(row)) = e.cast<float>().transpose();

      TokenRecord rec;
      rec.row_index = row;
      rec.prompt_id = pid;
      rec.token_position = static_cast<std::uint32_t>(h);
      rec.concept_label = p.concept_label;
      rec.split = p.split;
      dump.records.push_back(std::move(rec));
      out.truth.push_back(std::move(t));
    }
  }
  return out;
}

inline nlohmann::json truth_to_json(const SyntheticDictionary& dict, const std::vector<RowTruth>& truth) {
  nlohmann::json j;
  j["d_in"] = dict.d_in();
  j["n_atoms"] = dict.n_atoms();
  j["noise_sigma"] = dict.noise_sigma;
  j["concepts"] = dict.concept_assignments;
  auto& atoms = j["atoms"] = nlohmann::json::array();
  for (Eigen::Index a = 0; a < dict.atoms.rows(); ++a) {
    std::vector<double> v(dict.atoms.row(a).begin(), dict.atoms.row(a).end());
    atoms.push_back(v);
  }
  auto& rows = j["rows"] = nlohmann::json::array();
  for (const auto& t : truth) rows.push_back({{"atoms", t.atoms}, {"coefficients", t.coefficients}});
  return j;
}

}  // namespace saerase
