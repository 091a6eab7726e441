#pragma once

// Concept feature selection.
//
//   profile   s_C[rho] = max over the concept's token rows of activation rho
//   select    F = indices of the k_sel largest nonzero s_C entries
//   contrast  F_hat = F_target minus the union of retain-concept sets
//   erase     F_erase = union of F_hat over all target concepts

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sae.hpp"

namespace saerase {

enum class Provenance { per_concept, contrastive, erase_union };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::per_concept: return "per_concept";
    case Provenance::contrastive: return "contrastive";
    case Provenance::erase_union: return "erase_union";
  }
  return "?";
}

inline Provenance parse_provenance(const std::string& s) {
  if (s == "per_concept") return Provenance::per_concept;
  if (s == "contrastive") return Provenance::contrastive;
  if (s == "erase_union") return Provenance::erase_union;
  throw DataError("unknown feature-set provenance '" + s + "'");
}

/// Sorted, duplicate-free set of feature indices below d_hid.
class FeatureSet {
 public:
  FeatureSet() = default;
  FeatureSet(std::vector<std::uint32_t> indices, std::size_t d_hid, Provenance provenance, std::string label = {})
      : indices_(std::move(indices)), d_hid_(d_hid), provenance_(provenance), label_(std::move(label)) {
    std::sort(indices_.begin(), indices_.end());
    indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
    if (!indices_.empty() && indices_.back() >= d_hid_) {
      throw DataError("feature index " + std::to_string(indices_.back()) + " out of range for d_hid " +
                      std::to_string(d_hid_));
    }
  }

  std::span<const std::uint32_t> indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  std::size_t d_hid() const { return d_hid_; }
  Provenance provenance() const { return provenance_; }
  const std::string& label() const { return label_; }
  void set_label(std::string label) { label_ = std::move(label); }

  bool contains(std::uint32_t rho) const { return std::binary_search(indices_.begin(), indices_.end(), rho); }

  bool operator==(const FeatureSet&) const = default;

 private:
  std::vector<std::uint32_t> indices_;
  std::size_t d_hid_ = 0;
  Provenance provenance_ = Provenance::per_concept;
  std::string label_;
};

inline nlohmann::json to_json(const FeatureSet& f) {
  return {{"label", f.label()},
          {"provenance", to_string(f.provenance())},
          {"d_hid", f.d_hid()},
          {"indices", std::vector<std::uint32_t>(f.indices().begin(), f.indices().end())}};
}

inline FeatureSet feature_set_from_json(const nlohmann::json& j) {
  try {
    return FeatureSet(j.at("indices").get<std::vector<std::uint32_t>>(), j.at("d_hid").get<std::size_t>(),
                      parse_provenance(j.at("provenance").get<std::string>()), j.at("label").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed feature set: ") + e.what());
  }
}

inline void save_feature_set(const std::filesystem::path& path, const FeatureSet& f) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write feature set: " + path.string());
  os << to_json(f).dump(2) << '\n';
}

inline FeatureSet load_feature_set(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open feature set: " + path.string());
  try {
    return feature_set_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("malformed feature set " + path.string() + ": " + e.what());
  }
}

struct SelectConfig {
  std::size_t k_sel = 64;
  std::optional<std::size_t> retain_k_sel;  // defaults to k_sel

  std::size_t retain_k() const { return retain_k_sel.value_or(k_sel); }
};

struct ConceptProfile {
  std::string concept_label;
  Vector<double> s_c;  // d_hid, nonnegative
  std::size_t token_count = 0;
};

/// Per-feature max activation over the concept's token rows.
template <typename Scalar, typename Derived>
ConceptProfile concept_profile(const SaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& concept_rows,
                               std::string label = {}) {
  if (concept_rows.rows() == 0) throw DataError("concept '" + label + "' has no token rows");
  ConceptProfile p;
  p.concept_label = std::move(label);
  p.s_c = Vector<double>::Zero(static_cast<Eigen::Index>(params.d_hid()));
  p.token_count = static_cast<std::size_t>(concept_rows.rows());
  for (Eigen::Index i = 0; i < concept_rows.rows(); ++i) {
    const auto z = encode(params, concept_rows.row(i).transpose());
    for (std::size_t j = 0; j < z.size(); ++j) {
      auto& slot = p.s_c[z.indices[j]];
      slot = std::max(slot, static_cast<double>(z.values[j]));
    }
  }
  return p;
}

/// Top k_sel features of the profile; zero entries never selected, ties to the lower index.
inline FeatureSet select_features(const ConceptProfile& profile, std::size_t k_sel) {
  const auto d_hid = static_cast<std::size_t>(profile.s_c.size());
  if (k_sel > d_hid) throw ConfigError("k_sel " + std::to_string(k_sel) + " exceeds d_hid " + std::to_string(d_hid));
  const auto top = topk(profile.s_c, k_sel);
  return FeatureSet(top.indices, d_hid, Provenance::per_concept, profile.concept_label);
}

/// F_target with every feature of any retain set removed.
inline FeatureSet contrast_select(const FeatureSet& target, std::span<const FeatureSet> retain_sets) {
  for (const auto& r : retain_sets) {
    if (r.d_hid() != target.d_hid()) throw DataError("feature sets differ in d_hid");
  }
  std::vector<std::uint32_t> kept;
  for (auto rho : target.indices()) {
    const bool excluded =
        std::any_of(retain_sets.begin(), retain_sets.end(), [rho](const FeatureSet& r) { return r.contains(rho); });
    if (!excluded) kept.push_back(rho);
  }
  return FeatureSet(std::move(kept), target.d_hid(), Provenance::contrastive, target.label());
}

/// Union of per-target contrastive sets. The label lists the member labels, comma-separated.
inline FeatureSet union_erase_set(std::span<const FeatureSet> sets) {
  if (sets.empty()) throw DataError("union_erase_set: no concept sets given");
  std::vector<std::uint32_t> all;
  std::vector<std::string> labels;
  for (const auto& s : sets) {
    if (s.d_hid() != sets.front().d_hid()) throw DataError("feature sets differ in d_hid");
    all.insert(all.end(), s.indices().begin(), s.indices().end());
    if (!s.label().empty()) labels.push_back(s.label());
  }
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  std::string label;
  for (const auto& l : labels) label += (label.empty() ? "" : ",") + l;
  return FeatureSet(std::move(all), sets.front().d_hid(), Provenance::erase_union, label);
}

/// Concept labels encoded in an erase-union label.
inline std::vector<std::string> erase_set_labels(const FeatureSet& erase) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : erase.label()) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

/// |a ∩ b|
inline std::size_t overlap(const FeatureSet& a, const FeatureSet& b) {
  std::vector<std::uint32_t> both;
  std::set_intersection(a.indices().begin(), a.indices().end(), b.indices().begin(), b.indices().end(),
                        std::back_inserter(both));
  return both.size();
}

}  // namespace saerase
