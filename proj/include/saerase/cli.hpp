#pragma once

// Command-line workflows: synth, train, select, erase, classify, stats, inspect.
//
// Options may come from a key-value config file (--config), one [section] per
// subcommand, keys spelled like the long option names (e.g. `d-hid = 256`).
// Command-line flags override the file; unknown keys are rejected.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "conceptsel.hpp"
#include "density.hpp"
#include "embdump.hpp"
#include "eraser.hpp"
#include "rng.hpp"
#include "sae.hpp"
#include "synth.hpp"
#include "train.hpp"

namespace saerase::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

inline LogLevel log_level_from_env() {
  const char* v = std::getenv("SAE_ERASE_LOG");
  if (!v) return LogLevel::info;
  const std::string s(v);
  if (s == "quiet" || s == "0") return LogLevel::quiet;
  if (s == "debug" || s == "2") return LogLevel::debug;
  return LogLevel::info;
}

struct Io {
  std::ostream& out;
  std::ostream& err;
  LogLevel level = LogLevel::info;

  void info(const std::string& msg) const {
    if (level >= LogLevel::info) err << msg << '\n';
  }
  void debug(const std::string& msg) const {
    if (level >= LogLevel::debug) err << msg << '\n';
  }
};

// ---------------------------------------------------------------------------
// Options

struct GlobalOptions {
  std::uint64_t seed = 0;
  bool force = false;
};

struct SynthOptionsCli {
  fs::path out;
  std::size_t d_in = 64;
  std::size_t n_atoms = 128;
  std::size_t sparsity = 8;
  double noise = 0.01;
  double coef_min = 0.5;
  double coef_max = 2.0;
  std::optional<double> concept_coef_min;
  std::optional<double> concept_coef_max;
  std::int32_t layer = -1;
  std::vector<std::string> concepts;  // label:n_atoms
  std::vector<std::string> prompts;   // label:split:count:tokens, label "-" = background only
};

struct TrainOptionsCli {
  fs::path dump;
  fs::path out;
  fs::path report;
  TrainConfig config;
  std::vector<std::string> splits{"train"};
};

struct SelectOptionsCli {
  fs::path checkpoint;
  fs::path dump;
  fs::path out_dir;
  std::size_t k_sel = 64;
  std::optional<std::size_t> retain_k_sel;
  std::string target_split = "target";
  std::string retain_split = "retain";
  std::vector<std::string> targets;
  std::vector<std::string> retains;
};

struct EraseOptionsCli {
  fs::path checkpoint;
  fs::path erase_set;
  fs::path dump;
  std::string split = "eval";
  fs::path out;
  fs::path report;
  double strength = kDefaultStrength;
  std::optional<double> threshold;
  fs::path calib_dump;
  std::string calib_split = "retain";
  double margin = 1.5;
  std::string aggregate = "max";
  std::string granularity = "prompt";
};

struct StatsOptionsCli {
  fs::path checkpoint;
  fs::path dump;
  std::string split = "all";
  fs::path erase_set;
  double strength = kDefaultStrength;
  std::size_t bins = 20;
  fs::path out;
};

struct InspectOptionsCli {
  fs::path dump;
};

// ---------------------------------------------------------------------------
// Helpers

inline std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Reports carry exactly one nondeterministic field, "generated_at".
inline void write_report(const fs::path& path, nlohmann::json body) {
  body["generated_at"] = timestamp_utc();
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write report: " + path.string());
  os << body.dump(2) << '\n';
}

inline void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " path is required");
  if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
}

inline void require_parent(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " path is required");
  const auto parent = p.parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    throw ConfigError(what + " directory does not exist: " + parent.string());
  }
}

inline std::vector<std::string> split_fields(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

inline std::size_t parse_count(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("expected a nonnegative integer in '" + context + "', got '" + s + "'");
  }
}

inline Split require_split(const std::string& name) {
  const auto s = parse_split(name);
  if (!s) throw ConfigError("unknown split '" + name + "' (expected train, target, retain or eval)");
  return *s;
}

/// "all" selects every split.
inline std::optional<Split> split_filter(const std::string& name) {
  if (name == "all") return std::nullopt;
  return require_split(name);
}

inline TokenAggregate parse_aggregate(const std::string& s) {
  if (s == "max") return TokenAggregate::max;
  if (s == "mean") return TokenAggregate::mean;
  throw ConfigError("unknown aggregate '" + s + "' (expected max or mean)");
}

inline Granularity parse_granularity(const std::string& s) {
  if (s == "prompt") return Granularity::prompt;
  if (s == "token") return Granularity::token;
  throw ConfigError("unknown granularity '" + s + "' (expected prompt or token)");
}

inline std::string bar(std::size_t count, std::size_t max_count, std::size_t width = 40) {
  if (max_count == 0) return {};
  return std::string(count * width / max_count, '#');
}

inline void print_histogram(std::ostream& os, const std::string& title, const Histogram& h) {
  os << title << '\n';
  const std::size_t peak = h.counts.empty() ? 0 : *std::max_element(h.counts.begin(), h.counts.end());
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    os << "  " << std::setw(12) << std::setprecision(5) << h.bin_lo(b) << " | " << std::setw(7) << h.counts[b] << ' '
       << bar(h.counts[b], peak) << '\n';
  }
}

inline nlohmann::json histogram_json(const Histogram& h) {
  return {{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}};
}

// ---------------------------------------------------------------------------
// synth

struct SynthPlan {
  std::vector<std::pair<std::string, std::size_t>> concepts;
  std::vector<PromptSpec> prompts;
};

inline SynthPlan parse_synth_plan(const SynthOptionsCli& o) {
  SynthPlan plan;
  std::set<std::string> known;
  for (const auto& c : o.concepts) {
    const auto f = split_fields(c, ':');
    if (f.size() != 2 || f[0].empty()) throw ConfigError("concept spec '" + c + "' must be label:n_atoms");
    plan.concepts.emplace_back(f[0], parse_count(f[1], c));
    known.insert(f[0]);
  }
  for (const auto& p : o.prompts) {
    const auto f = split_fields(p, ':');
    if (f.size() != 4) throw ConfigError("prompt spec '" + p + "' must be label:split:count:tokens");
    std::optional<std::string> label;
    if (f[0] != "-") {
      if (!known.contains(f[0])) throw ConfigError("prompt spec names unknown concept label '" + f[0] + "'");
      label = f[0];
    }
    const auto split = require_split(f[1]);
    const auto count = parse_count(f[2], p);
    const auto tokens = parse_count(f[3], p);
    if (tokens == 0) throw ConfigError("prompt spec '" + p + "' needs at least one token");
    for (std::size_t i = 0; i < count; ++i) plan.prompts.push_back({label, tokens, split});
  }
  if (plan.prompts.empty()) throw ConfigError("synth needs at least one --prompts spec");
  return plan;
}

inline fs::path truth_path(const fs::path& dump) { return fs::path(dump.string() + ".truth.json"); }

inline int cmd_synth(const GlobalOptions& g, const SynthOptionsCli& o, const Io& io) {
  require_parent(o.out, "output dump");
  const SynthPlan plan = parse_synth_plan(o);
  for (const auto& p : {o.out, sidecar_path(o.out), truth_path(o.out)}) {
    if (fs::exists(p) && !g.force) throw ConfigError("output exists (use --force): " + p.string());
  }
  const auto dict = make_dictionary(o.d_in, o.n_atoms, plan.concepts, o.noise, derive_seed(g.seed, "synth.dictionary"));
  SynthOptions so;
  so.coef_min = o.coef_min;
  so.coef_max = o.coef_max;
  so.concept_coef_min = o.concept_coef_min;
  so.concept_coef_max = o.concept_coef_max;
  so.layer_index = o.layer;
  const auto result = synth_generate(dict, plan.prompts, o.sparsity, derive_seed(g.seed, "synth.rows"), so);
  write_dump(o.out, result.dump);
  auto truth = truth_to_json(dict, result.truth);
  truth["sparsity"] = o.sparsity;
  truth["seed"] = g.seed;
  std::ofstream(truth_path(o.out), std::ios::trunc) << truth.dump() << '\n';
  io.out << "wrote " << result.dump.header.row_count << " rows (d_in=" << o.d_in << ", " << plan.prompts.size()
         << " prompts) to " << o.out.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

inline int cmd_train(const GlobalOptions& g, TrainOptionsCli o, const Io& io) {
  require_file(o.dump, "dump");
  require_parent(o.out, "checkpoint");
  if (o.report.empty()) o.report = o.out.string() + ".report.json";
  require_parent(o.report, "report");
  o.config.splits.clear();
  for (const auto& s : o.splits) o.config.splits.insert(require_split(s));
  o.config.seed = derive_seed(g.seed, "train");
  o.config.validate();

  io.out << "train: k=" << o.config.k << " k_aux=" << o.config.k_aux << " alpha=" << o.config.alpha
         << " lr=" << o.config.learning_rate << " d_hid=" << o.config.d_hid << " steps=" << o.config.steps << '\n';
  const auto dump = read_dump(o.dump);
  const auto every = std::max<std::size_t>(1, o.config.steps / 20);
  const auto result = train<double>(dump, o.config, [&](std::size_t step, double loss, double recon, double dead) {
    if (step % every == 0 || step + 1 == o.config.steps) {
      io.debug("step " + std::to_string(step) + " loss " + std::to_string(loss) + " recon " + std::to_string(recon) +
               " dead " + std::to_string(dead));
    }
  });
  save_checkpoint(o.out, result.params);
  nlohmann::json report;
  report["command"] = "train";
  report["config"] = to_json(o.config);
  report["config"]["global_seed"] = g.seed;
  report["data"] = {{"path", o.dump.filename().string()},
                    {"d_in", dump.header.d_in},
                    {"row_count", dump.header.row_count},
                    {"layer_index", dump.header.layer_index}};
  report["result"] = to_json(result.report);
  write_report(o.report, report);
  io.out << "final loss " << result.report.final_loss << ", recon " << result.report.final_recon
         << ", dead fraction " << result.report.dead_fraction << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// select

inline RowMatrix<float> gather_rows(const EmbeddingDump& dump, Split split, const std::string& label) {
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < dump.records.size(); ++i) {
    const auto& r = dump.records[i];
    if (r.split == split && r.concept_label && *r.concept_label == label) idx.push_back(static_cast<Eigen::Index>(i));
  }
  RowMatrix<float> out(static_cast<Eigen::Index>(idx.size()), dump.rows.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = dump.rows.row(idx[i]);
  return out;
}

inline std::vector<std::string> labels_in_split(const EmbeddingDump& dump, Split split) {
  std::set<std::string> labels;
  for (const auto& r : dump.records) {
    if (r.split == split && r.concept_label) labels.insert(*r.concept_label);
  }
  return {labels.begin(), labels.end()};
}

inline int cmd_select(const GlobalOptions&, const SelectOptionsCli& o, const Io& io) {
  require_file(o.checkpoint, "checkpoint");
  require_file(o.dump, "dump");
  if (o.out_dir.empty()) throw ConfigError("output directory is required");
  const auto target_split = require_split(o.target_split);
  const auto retain_split = require_split(o.retain_split);
  fs::create_directories(o.out_dir);

  const auto params = load_checkpoint<double>(o.checkpoint);
  const auto dump = read_dump(o.dump);
  if (dump.header.d_in != params.d_in()) throw DataError("dump d_in does not match checkpoint d_in");
  if (o.k_sel == 0 || o.k_sel > params.d_hid()) throw ConfigError("k-sel must be in [1, d_hid]");
  const SelectConfig sel{o.k_sel, o.retain_k_sel};
  if (sel.retain_k() == 0 || sel.retain_k() > params.d_hid()) throw ConfigError("retain-k-sel must be in [1, d_hid]");

  const auto targets = o.targets.empty() ? labels_in_split(dump, target_split) : o.targets;
  const auto retains = o.retains.empty() ? labels_in_split(dump, retain_split) : o.retains;
  if (targets.empty()) throw DataError("no target concepts found in split '" + o.target_split + "'");

  auto concept_set = [&](const std::string& label, Split split, std::size_t k) {
    const auto rows = gather_rows(dump, split, label);
    if (rows.rows() == 0) {
      throw DataError("concept '" + label + "' has zero rows in split '" + to_string(split) + "'");
    }
    return select_features(concept_profile(params, rows, label), k);
  };

  std::vector<FeatureSet> retain_sets;
  for (const auto& r : retains) {
    retain_sets.push_back(concept_set(r, retain_split, sel.retain_k()));
    save_feature_set(o.out_dir / ("F_" + r + ".json"), retain_sets.back());
  }
  std::vector<std::uint32_t> retain_union_idx;
  for (const auto& r : retain_sets) retain_union_idx.insert(retain_union_idx.end(), r.indices().begin(), r.indices().end());
  const FeatureSet retain_union(retain_union_idx, params.d_hid(), Provenance::per_concept, "retain-union");

  nlohmann::json report;
  report["command"] = "select";
  report["k_sel"] = sel.k_sel;
  report["retain_k_sel"] = sel.retain_k();
  report["retain_concepts"] = retains;
  report["retain_union_size"] = retain_union.size();
  std::vector<FeatureSet> contrastive;
  io.out << "retain union: " << retain_union.size() << " features over " << retains.size() << " concepts\n";
  for (const auto& t : targets) {
    const auto f = concept_set(t, target_split, sel.k_sel);
    save_feature_set(o.out_dir / ("F_" + t + ".json"), f);
    contrastive.push_back(contrast_select(f, retain_sets));
    save_feature_set(o.out_dir / ("Fhat_" + t + ".json"), contrastive.back());
    const auto ov = overlap(f, retain_union);
    io.out << "target " << t << ": |F|=" << f.size() << " overlap=" << ov << " |F_hat|=" << contrastive.back().size()
           << '\n';
    report["targets"][t] = {{"F", f.size()}, {"overlap_with_retain", ov}, {"F_hat", contrastive.back().size()}};
  }
  const auto erase = union_erase_set(contrastive);
  save_feature_set(o.out_dir / "erase_set.json", erase);
  io.out << "erase set: " << erase.size() << " features\n";
  report["erase_set_size"] = erase.size();
  write_report(o.out_dir / "select_report.json", report);
  return kOk;
}

// ---------------------------------------------------------------------------
// erase / classify

struct PromptOutcome {
  PromptSpan span;
  double aggregate_mse = 0;
  bool flagged = false;
  std::vector<double> per_token_mse;
};

struct Confusion {
  std::size_t tn = 0, fp = 0, fn = 0, tp = 0;
  std::string str() const {
    return "[[" + std::to_string(tn) + "," + std::to_string(fp) + "],[" + std::to_string(fn) + "," +
           std::to_string(tp) + "]]";
  }
};

struct EraseRun {
  EraseConfig config;
  std::optional<Calibration> calibration;
  std::vector<PromptOutcome> outcomes;
  std::optional<Confusion> confusion;
  EmbeddingDump filtered;
};

inline EraseRun run_erase(const EraseOptionsCli& o, bool build_output, const Io& io) {
  require_file(o.checkpoint, "checkpoint");
  require_file(o.erase_set, "erase set");
  require_file(o.dump, "dump");
  if (!o.threshold && o.calib_dump.empty()) {
    throw ConfigError("no --threshold given and no --calib-dump to calibrate it from");
  }
  if (!o.calib_dump.empty()) require_file(o.calib_dump, "calibration dump");
  const auto split = split_filter(o.split);
  const auto calib_split = split_filter(o.calib_split);

  EraseRun run;
  run.config.erase_set = load_feature_set(o.erase_set);
  run.config.strength = o.strength;
  run.config.token_aggregate = parse_aggregate(o.aggregate);
  run.config.granularity = parse_granularity(o.granularity);

  const auto params = load_checkpoint<double>(o.checkpoint);
  if (run.config.erase_set.d_hid() != params.d_hid()) throw DataError("erase set d_hid does not match checkpoint");

  if (o.threshold) {
    if (*o.threshold < 0) throw ConfigError("threshold must be nonnegative");
    run.config.threshold = *o.threshold;
  } else {
    const auto calib = read_dump(o.calib_dump);
    if (calib.header.d_in != params.d_in()) throw DataError("calibration dump d_in does not match checkpoint");
    const auto prompts = group_prompts(calib.records, calib_split);
    if (prompts.empty()) throw DataError("calibration dump has no prompts in split '" + o.calib_split + "'");
    run.calibration = calibrate_threshold(params, calib.rows, prompts, run.config, o.margin);
    run.config.threshold = run.calibration->threshold;
    if (run.calibration->degenerate) io.info("warning: calibration is degenerate (max retain mse is 0)");
    io.out << "calibrated threshold " << run.config.threshold << " (max retain mse "
           << run.calibration->max_retain_mse << ", margin " << o.margin << ")\n";
  }

  const auto dump = read_dump(o.dump);
  if (dump.header.d_in != params.d_in()) throw DataError("dump d_in does not match checkpoint");
  const auto prompts = group_prompts(dump.records, split);
  if (prompts.empty()) throw DataError("no prompts in split '" + o.split + "'");

  const DeactivationBlock<double> block(params, run.config);
  const auto labels = erase_set_labels(run.config.erase_set);
  const std::set<std::string> target_labels(labels.begin(), labels.end());
  bool have_labels = !target_labels.empty();
  Confusion conf;

  std::size_t out_rows = 0;
  for (const auto& p : prompts) out_rows += p.row_count;
  if (build_output) {
    run.filtered.header = dump.header;
    run.filtered.header.row_count = out_rows;
    run.filtered.rows.resize(static_cast<Eigen::Index>(out_rows), dump.rows.cols());
  }
  Eigen::Index cursor = 0;
  for (const auto& p : prompts) {
    const auto o_block = block.run(dump.rows.middleRows(static_cast<Eigen::Index>(p.first_row),
                                                        static_cast<Eigen::Index>(p.row_count)));
    run.outcomes.push_back({p, o_block.aggregate_mse, o_block.flagged, o_block.per_token_mse});
    if (have_labels) {
      const bool is_target = p.concept_label && target_labels.contains(*p.concept_label);
      if (is_target) {
        (o_block.flagged ? conf.tp : conf.fn)++;
      } else {
        (o_block.flagged ? conf.fp : conf.tn)++;
      }
    }
    if (build_output) {
      run.filtered.rows.middleRows(cursor, static_cast<Eigen::Index>(p.row_count)) = o_block.output_rows;
      for (std::size_t h = 0; h < p.row_count; ++h) {
        TokenRecord rec = dump.records[p.first_row + h];
        rec.row_index = static_cast<std::uint64_t>(cursor) + h;
        rec.provenance = o_block.token_flagged[h] ? "erased" : "passthrough";
        run.filtered.records.push_back(std::move(rec));
      }
      cursor += static_cast<Eigen::Index>(p.row_count);
    }
  }
  if (have_labels) run.confusion = conf;
  return run;
}

inline nlohmann::json erase_report(const std::string& command, const EraseOptionsCli& o, const EraseRun& run) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = {{"strength", run.config.strength},
                 {"threshold", run.config.threshold},
                 {"aggregate", to_string(run.config.token_aggregate)},
                 {"granularity", to_string(run.config.granularity)},
                 {"erase_set", to_json(run.config.erase_set)},
                 {"split", o.split}};
  if (run.calibration) {
    j["calibration"] = {{"max_retain_mse", run.calibration->max_retain_mse},
                        {"margin", o.margin},
                        {"degenerate", run.calibration->degenerate},
                        {"retain_mse_histogram", histogram_json(Histogram::build(run.calibration->retain_mse, 20))}};
  }
  auto& prompts = j["prompts"] = nlohmann::json::array();
  std::size_t flagged = 0;
  for (const auto& p : run.outcomes) {
    flagged += p.flagged;
    prompts.push_back({{"prompt_id", p.span.prompt_id},
                       {"concept_label", p.span.concept_label ? nlohmann::json(*p.span.concept_label) : nlohmann::json()},
                       {"flagged", p.flagged},
                       {"aggregate_mse", p.aggregate_mse},
                       {"per_token_mse", p.per_token_mse}});
  }
  j["flagged_prompts"] = flagged;
  j["total_prompts"] = run.outcomes.size();
  if (run.confusion) {
    j["confusion"] = {{"tn", run.confusion->tn}, {"fp", run.confusion->fp}, {"fn", run.confusion->fn}, {"tp", run.confusion->tp}};
  }
  return j;
}

inline void print_erase_summary(const EraseRun& run, const Io& io) {
  std::size_t flagged = 0;
  for (const auto& p : run.outcomes) flagged += p.flagged;
  io.out << "flagged " << flagged << " of " << run.outcomes.size() << " prompts (threshold " << run.config.threshold
         << ", strength " << run.config.strength << ")\n";
  if (run.confusion) io.out << "confusion: " << run.confusion->str() << '\n';
}

inline int cmd_erase(const GlobalOptions&, EraseOptionsCli o, const Io& io) {
  require_parent(o.out, "output dump");
  if (o.report.empty()) o.report = o.out.string() + ".report.json";
  require_parent(o.report, "report");
  const auto run = run_erase(o, true, io);
  write_dump(o.out, run.filtered);
  write_report(o.report, erase_report("erase", o, run));
  print_erase_summary(run, io);
  return kOk;
}

inline int cmd_classify(const GlobalOptions&, const EraseOptionsCli& o, const Io& io) {
  if (!o.report.empty()) require_parent(o.report, "report");
  const auto run = run_erase(o, false, io);
  if (!o.report.empty()) write_report(o.report, erase_report("classify", o, run));
  print_erase_summary(run, io);
  return kOk;
}

// ---------------------------------------------------------------------------
// stats

inline int cmd_stats(const GlobalOptions&, const StatsOptionsCli& o, const Io& io) {
  require_file(o.checkpoint, "checkpoint");
  require_file(o.dump, "dump");
  if (!o.erase_set.empty()) require_file(o.erase_set, "erase set");
  if (!o.out.empty()) require_parent(o.out, "report");
  if (o.bins == 0) throw ConfigError("bins must be positive");
  const auto split = split_filter(o.split);

  const auto params = load_checkpoint<double>(o.checkpoint);
  const auto dump = read_dump(o.dump);
  if (dump.header.d_in != params.d_in()) throw DataError("dump d_in does not match checkpoint");
  const auto prompts = group_prompts(dump.records, split);
  if (prompts.empty()) throw DataError("no prompts in split '" + o.split + "'");
  RowMatrix<float> rows;
  {
    std::size_t n = 0;
    for (const auto& p : prompts) n += p.row_count;
    rows.resize(static_cast<Eigen::Index>(n), dump.rows.cols());
    Eigen::Index c = 0;
    for (const auto& p : prompts) {
      rows.middleRows(c, static_cast<Eigen::Index>(p.row_count)) =
          dump.rows.middleRows(static_cast<Eigen::Index>(p.first_row), static_cast<Eigen::Index>(p.row_count));
      c += static_cast<Eigen::Index>(p.row_count);
    }
  }

  const auto density = feature_density(params, rows);
  const auto density_hist = Histogram::build(density, o.bins);

  EraseConfig cfg;
  cfg.erase_set = o.erase_set.empty() ? FeatureSet({}, params.d_hid(), Provenance::erase_union)
                                      : load_feature_set(o.erase_set);
  cfg.strength = o.strength;
  const DeactivationBlock<double> block(params, cfg);
  std::vector<double> prompt_mse;
  for (const auto& p : prompts) {
    prompt_mse.push_back(block.run(dump.rows.middleRows(static_cast<Eigen::Index>(p.first_row),
                                                        static_cast<Eigen::Index>(p.row_count)))
                             .aggregate_mse);
  }
  const auto mse_hist = Histogram::build(prompt_mse, o.bins);

  print_histogram(io.out, "log10 feature density (" + std::to_string(density.size()) + " features)", density_hist);
  print_histogram(io.out, "per-prompt max-token mse (" + std::to_string(prompt_mse.size()) + " prompts)", mse_hist);

  if (!o.out.empty()) {
    nlohmann::json j;
    j["command"] = "stats";
    j["tokens"] = rows.rows();
    j["prompts"] = prompts.size();
    j["log_feature_density"] = density;
    j["density_histogram"] = histogram_json(density_hist);
    j["prompt_mse"] = prompt_mse;
    j["prompt_mse_histogram"] = histogram_json(mse_hist);
    j["erase_set_size"] = cfg.erase_set.size();
    j["strength"] = cfg.strength;
    write_report(o.out, j);
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// inspect

inline int cmd_inspect(const GlobalOptions&, const InspectOptionsCli& o, const Io& io) {
  require_file(o.dump, "dump");
  const auto dump = read_dump(o.dump);
  const auto v = validate_dump(dump);
  io.out << "version " << dump.header.version << ", d_in " << dump.header.d_in << ", rows " << dump.header.row_count
         << ", layer " << dump.header.layer_index << ", prompts " << v.prompt_count << '\n';
  for (const auto& [s, n] : v.rows_per_split) io.out << "  split " << s << ": " << n << " rows\n";
  for (const auto& [l, n] : v.rows_per_label) io.out << "  label " << l << ": " << n << " rows\n";
  for (const auto& w : v.warnings) io.out << "warning: " << w << '\n';
  io.out << "warnings: " << v.warnings.size() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  const Io io{out, err, log_level_from_env()};
  CLI::App app{"Sparse-autoencoder concept erasure toolkit"};
  app.set_config("--config", "", "Key-value config file, one [section] per subcommand");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  GlobalOptions g;
  app.add_option("--seed", g.seed, "Global seed; per-module streams derive from it");
  app.add_flag("--force", g.force, "Overwrite existing outputs");

  SynthOptionsCli synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic sparse-dictionary dump with ground truth");
  s->add_option("--out", synth.out, "Output dump path")->required();
  s->add_option("--d-in", synth.d_in, "Embedding width");
  s->add_option("--n-atoms", synth.n_atoms, "Dictionary size");
  s->add_option("--sparsity", synth.sparsity, "Atoms per token");
  s->add_option("--noise", synth.noise, "Isotropic noise sigma");
  s->add_option("--coef-min", synth.coef_min, "Smallest atom coefficient");
  s->add_option("--coef-max", synth.coef_max, "Largest atom coefficient");
  s->add_option("--concept-coef-min", synth.concept_coef_min, "Smallest coefficient of a token's own concept atom");
  s->add_option("--concept-coef-max", synth.concept_coef_max, "Largest coefficient of a token's own concept atom");
  s->add_option("--layer", synth.layer, "Layer index recorded in the header");
  s->add_option("--concept", synth.concepts, "label:n_atoms (repeatable)");
  s->add_option("--prompts", synth.prompts, "label:split:count:tokens (repeatable; label '-' = background)");

  TrainOptionsCli tr;
  auto* t = app.add_subcommand("train", "Train a K-sparse autoencoder on a dump");
  t->add_option("--dump", tr.dump, "Training dump")->required();
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--report", tr.report, "Report path (default <out>.report.json)");
  t->add_option("--k", tr.config.k, "Active latents per token");
  t->add_option("--d-hid", tr.config.d_hid, "Latent width");
  t->add_option("--k-aux", tr.config.k_aux, "Dead latents used by the auxiliary loss");
  t->add_option("--alpha", tr.config.alpha, "Auxiliary loss weight");
  t->add_option("--lr", tr.config.learning_rate, "Adam learning rate (constant)");
  t->add_option("--batch-prompts", tr.config.batch_size_prompts, "Prompts per batch");
  t->add_option("--dead-window", tr.config.dead_window, "Tokens without firing before a latent counts as dead");
  t->add_option("--steps", tr.config.steps, "Optimizer steps")->required();
  t->add_option("--splits", tr.splits, "Splits to train on");

  SelectOptionsCli sel;
  auto* se = app.add_subcommand("select", "Select per-concept, contrastive and erase feature sets");
  se->add_option("--checkpoint", sel.checkpoint)->required();
  se->add_option("--dump", sel.dump, "Labelled dump with target/retain splits")->required();
  se->add_option("--out-dir", sel.out_dir)->required();
  se->add_option("--k-sel", sel.k_sel, "Features kept per target concept");
  se->add_option("--retain-k-sel", sel.retain_k_sel, "Features kept per retain concept (default k-sel)");
  se->add_option("--target-split", sel.target_split);
  se->add_option("--retain-split", sel.retain_split);
  se->add_option("--targets", sel.targets, "Target labels (default: all labels in the target split)");
  se->add_option("--retains", sel.retains, "Retain labels (default: all labels in the retain split)");

  EraseOptionsCli er;
  auto add_erase_options = [&](CLI::App* c, bool with_output) {
    c->add_option("--checkpoint", er.checkpoint)->required();
    c->add_option("--erase-set", er.erase_set)->required();
    c->add_option("--dump", er.dump, "Dump to process")->required();
    c->add_option("--split", er.split, "Split to process, or 'all'");
    if (with_output) c->add_option("--out", er.out, "Filtered dump path")->required();
    c->add_option("--report", er.report, "Outcome report path");
    c->add_option("--strength", er.strength, "Deactivation strength lambda");
    c->add_option("--threshold", er.threshold, "Classifier threshold tau (otherwise calibrated)");
    c->add_option("--calib-dump", er.calib_dump, "Dump holding retain prompts for calibration");
    c->add_option("--calib-split", er.calib_split, "Split of the calibration prompts");
    c->add_option("--margin", er.margin, "Calibration safety margin");
    c->add_option("--aggregate", er.aggregate, "Token aggregation: max or mean");
    c->add_option("--granularity", er.granularity, "Decision unit: prompt or token");
  };
  auto* e = app.add_subcommand("erase", "Run the deactivation block and write the filtered dump");
  add_erase_options(e, true);
  auto* c = app.add_subcommand("classify", "Classify prompts as target or normal");
  add_erase_options(c, false);

  StatsOptionsCli st;
  auto* sa = app.add_subcommand("stats", "Feature density and reconstruction-error histograms");
  sa->add_option("--checkpoint", st.checkpoint)->required();
  sa->add_option("--dump", st.dump)->required();
  sa->add_option("--split", st.split);
  sa->add_option("--erase-set", st.erase_set);
  sa->add_option("--strength", st.strength);
  sa->add_option("--bins", st.bins);
  sa->add_option("--out", st.out, "Report path");

  InspectOptionsCli in;
  auto* i = app.add_subcommand("inspect", "Validate a dump and print its summary");
  i->add_option("--dump", in.dump)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return kConfigError;
  }

  try {
    if (s->parsed()) return cmd_synth(g, synth, io);
    if (t->parsed()) return cmd_train(g, tr, io);
    if (se->parsed()) return cmd_select(g, sel, io);
    if (e->parsed()) return cmd_erase(g, er, io);
    if (c->parsed()) return cmd_classify(g, er, io);
    if (sa->parsed()) return cmd_stats(g, st, io);
    if (i->parsed()) return cmd_inspect(g, in, io);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << '\n';
    return kConfigError;
  } catch (const NumericalError& ex) {
    err << "numerical error: " << ex.what() << '\n';
    return kNumericalError;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kDataError;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "data error: " << ex.what() << '\n';
    return kDataError;
  }
  return kConfigError;
}

}  // namespace saerase::cli
