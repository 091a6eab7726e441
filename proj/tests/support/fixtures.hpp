#pragma once

// Shared helpers for the unit tests and the acceptance runner. The oracles in
// here are deliberately written without the library's own TopK or selection
// code so they can check it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <saerase/conceptsel.hpp>
#include <saerase/embdump.hpp>
#include <saerase/eraser.hpp>
#include <saerase/rng.hpp>
#include <saerase/sae.hpp>
#include <saerase/synth.hpp>

namespace fixtures {

namespace fs = std::filesystem;
using namespace saerase;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("saerase_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Random parameters with unit decoder columns and an independent encoder.
template <typename Scalar = double>
SaeParams<Scalar> random_params(std::size_t d_in, std::size_t d_hid, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  SaeParams<Scalar> p;
  p.k = k;
  p.b_pre.resize(static_cast<Eigen::Index>(d_in));
  p.w_enc.resize(static_cast<Eigen::Index>(d_hid), static_cast<Eigen::Index>(d_in));
  p.w_dec.resize(static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d_hid));
  for (Eigen::Index i = 0; i < p.b_pre.size(); ++i) p.b_pre[i] = static_cast<Scalar>(0.1 * rng.normal());
  for (Eigen::Index i = 0; i < p.w_enc.size(); ++i) p.w_enc.data()[i] = static_cast<Scalar>(rng.normal() / std::sqrt(double(d_in)));
  for (Eigen::Index i = 0; i < p.w_dec.size(); ++i) p.w_dec.data()[i] = static_cast<Scalar>(rng.normal());
  for (Eigen::Index c = 0; c < p.w_dec.cols(); ++c) p.w_dec.col(c).normalize();
  return p;
}

inline RowMatrix<double> random_rows(std::size_t n, std::size_t d, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  RowMatrix<double> m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Brute-force reference for the TopK code: full sort by (value desc, index asc),
/// keep at most k strictly positive entries.
inline std::vector<std::pair<std::uint32_t, double>> reference_topk(const std::vector<double>& v, std::size_t k) {
  std::vector<std::uint32_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] > v[b]; });
  std::vector<std::pair<std::uint32_t, double>> out;
  for (std::size_t i = 0; i < idx.size() && out.size() < k; ++i) {
    if (v[idx[i]] > 0) out.emplace_back(idx[i], v[idx[i]]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Orthonormal dictionary (d_in >= n_atoms) via Gram-Schmidt on Gaussian vectors.
inline RowMatrix<double> orthonormal_atoms(std::size_t n_atoms, std::size_t d_in, std::uint64_t seed) {
  RowMatrix<double> a = random_rows(n_atoms, d_in, seed);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < i; ++j) a.row(i) -= a.row(i).dot(a.row(j)) * a.row(j);
    a.row(i).normalize();
  }
  return a;
}

/// SAE whose features are exactly the dictionary atoms: encoding a noiseless
/// sparse combination recovers the coefficients.
inline SaeParams<double> oracle_sae(const RowMatrix<double>& atoms, std::size_t k) {
  SaeParams<double> p;
  p.k = k;
  p.b_pre = Vector<double>::Zero(atoms.cols());
  p.w_enc = atoms;
  p.w_dec = atoms.transpose();
  return p;
}

/// For every atom, best |cosine| against any decoder column.
inline std::vector<double> best_atom_cosines(const RowMatrix<double>& atoms, const SaeParams<double>& params) {
  std::vector<double> best(static_cast<std::size_t>(atoms.rows()), 0.0);
  ColMatrix<double> dec = params.w_dec;
  for (Eigen::Index c = 0; c < dec.cols(); ++c) dec.col(c).normalize();
  const RowMatrix<double> cos = atoms * dec;  // n_atoms x d_hid
  for (Eigen::Index a = 0; a < cos.rows(); ++a) best[static_cast<std::size_t>(a)] = cos.row(a).cwiseAbs().maxCoeff();
  return best;
}

struct CommandResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

inline std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

/// Runs the CLI binary with `args` inside `cwd`; `env` is prepended verbatim
/// (e.g. "SAE_ERASE_LOG=debug").
inline CommandResult run_cli(const fs::path& cli, const fs::path& cwd, const std::vector<std::string>& args,
                             const std::string& env = {}) {
  const fs::path out_file = cwd / ".cli_stdout";
  const fs::path err_file = cwd / ".cli_stderr";
  std::string cmd = "cd " + shell_quote(cwd.string()) + " && " + env + (env.empty() ? "" : " ") + shell_quote(cli.string());
  for (const auto& a : args) cmd += " " + shell_quote(a);
  cmd += " >" + shell_quote(out_file.string()) + " 2>" + shell_quote(err_file.string());
  const int status = std::system(cmd.c_str());
  CommandResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  fs::remove(out_file);
  fs::remove(err_file);
  return r;
}

/// Removes the line carrying the "generated_at" field from a JSON report.
inline std::string strip_timestamp(const std::string& text) {
  std::istringstream is(text);
  std::string line, out;
  while (std::getline(is, line)) {
    if (line.find("\"generated_at\"") == std::string::npos) out += line + '\n';
  }
  return out;
}

}  // namespace fixtures
