#pragma once

// Embedding dump: a binary row-major float32 payload plus a JSON-lines sidecar
// carrying per-row provenance.
//
//   <path>       [magic "SAED"][version u32][d_in u32][row_count u64][layer_index i32]
//                then row_count * d_in float32, all little-endian, row-major
//   <path>.meta  one JSON object per row, same order as the payload

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "binary_io.hpp"
#include "errors.hpp"

namespace saerase {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::array<char, 4> kDumpMagic{'S', 'A', 'E', 'D'};
inline constexpr std::uint32_t kDumpVersion = 1;
inline constexpr std::size_t kDumpHeaderBytes = 4 + 4 + 4 + 8 + 4;

struct DumpHeader {
  std::uint32_t version = kDumpVersion;
  std::uint32_t d_in = 0;
  std::uint64_t row_count = 0;
  std::int32_t layer_index = -1;  // -1: unknown / synthetic

  bool operator==(const DumpHeader&) const = default;
};

enum class Split { train, target, retain, eval };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::target: return "target";
    case Split::retain: return "retain";
    case Split::eval: return "eval";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "target") return Split::target;
  if (name == "retain") return Split::retain;
  if (name == "eval") return Split::eval;
  return std::nullopt;
}

struct TokenRecord {
  std::uint64_t row_index = 0;
  std::uint64_t prompt_id = 0;
  std::uint32_t token_position = 0;  // zero-based position inside the prompt
  std::optional<std::string> concept_label;
  Split split = Split::train;
  std::optional<std::string> provenance;  // set by tools that rewrite rows (e.g. "erased")

  bool operator==(const TokenRecord&) const = default;
};

inline nlohmann::json to_json(const TokenRecord& r) {
  nlohmann::json j;
  j["row_index"] = r.row_index;
  j["prompt_id"] = r.prompt_id;
  j["token_position"] = r.token_position;
  j["concept_label"] = r.concept_label ? nlohmann::json(*r.concept_label) : nlohmann::json(nullptr);
  j["split"] = to_string(r.split);
  if (r.provenance) j["provenance"] = *r.provenance;
  return j;
}

inline TokenRecord record_from_json(const nlohmann::json& j) {
  TokenRecord r;
  try {
    r.row_index = j.at("row_index").get<std::uint64_t>();
    r.prompt_id = j.at("prompt_id").get<std::uint64_t>();
    r.token_position = j.at("token_position").get<std::uint32_t>();
    if (j.contains("concept_label") && !j["concept_label"].is_null()) {
      r.concept_label = j["concept_label"].get<std::string>();
    }
    const auto split_name = j.at("split").get<std::string>();
    const auto split = parse_split(split_name);
    if (!split) throw DataError("unknown split '" + split_name + "'");
    r.split = *split;
    if (j.contains("provenance")) r.provenance = j["provenance"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed sidecar record: ") + e.what());
  }
  return r;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& dump) {
  return std::filesystem::path(dump.string() + ".meta");
}

/// Streaming writer. Rows and records are appended in lockstep; finish()
/// checks that exactly header.row_count rows were supplied.
class DumpWriter {
 public:
  DumpWriter(const std::filesystem::path& path, const DumpHeader& header)
      : header_(header), path_(path) {
    if (header.d_in == 0) throw DataError("d_in must be >= 1");
    payload_.open(path, std::ios::binary | std::ios::trunc);
    meta_.open(sidecar_path(path), std::ios::trunc);
    if (!payload_ || !meta_) throw DataError("cannot open dump for writing: " + path.string());
    payload_.write(kDumpMagic.data(), kDumpMagic.size());
    binary::write(payload_, header.version);
    binary::write(payload_, header.d_in);
    binary::write(payload_, header.row_count);
    binary::write(payload_, header.layer_index);
  }

  void write(std::span<const float> row, const TokenRecord& record) {
    if (row.size() != header_.d_in) {
      throw DataError("dimension mismatch: row " + std::to_string(written_) + " has " +
                      std::to_string(row.size()) + " values, d_in is " + std::to_string(header_.d_in));
    }
    if (written_ >= header_.row_count) {
      throw DataError("dimension mismatch: more rows supplied than header row_count " +
                      std::to_string(header_.row_count));
    }
    binary::write_f32(payload_, row);
    TokenRecord r = record;
    r.row_index = written_;
    meta_ << to_json(r).dump() << '\n';
    ++written_;
  }

  void finish() {
    if (written_ != header_.row_count) {
      throw DataError("dimension mismatch: " + std::to_string(written_) +
                      " rows supplied, header row_count is " + std::to_string(header_.row_count));
    }
    payload_.flush();
    meta_.flush();
    if (!payload_ || !meta_) throw DataError("I/O failure writing " + path_.string());
    payload_.close();
    meta_.close();
  }

 private:
  DumpHeader header_;
  std::filesystem::path path_;
  std::ofstream payload_;
  std::ofstream meta_;
  std::uint64_t written_ = 0;
};

/// Streaming reader. Validates magic/version on open, and payload/sidecar
/// lengths while reading.
class DumpReader {
 public:
  explicit DumpReader(const std::filesystem::path& path) : path_(path) {
    payload_.open(path, std::ios::binary);
    if (!payload_) throw DataError("cannot open dump: " + path.string());
    std::array<char, 4> magic{};
    if (!payload_.read(magic.data(), magic.size()) || magic != kDumpMagic) {
      throw DataError("bad magic in " + path.string());
    }
    std::uint32_t version = 0;
    if (!binary::read(payload_, version) || version != kDumpVersion) {
      throw DataError("unsupported dump version " + std::to_string(version) + " in " + path.string());
    }
    header_.version = version;
    if (!binary::read(payload_, header_.d_in) || !binary::read(payload_, header_.row_count) ||
        !binary::read(payload_, header_.layer_index)) {
      throw DataError("truncated header in " + path.string());
    }
    if (header_.d_in == 0) throw DataError("d_in is 0 in " + path.string());
    meta_.open(sidecar_path(path));
    if (!meta_) throw DataError("missing sidecar: " + sidecar_path(path).string());
  }

  const DumpHeader& header() const { return header_; }

  /// Reads the next row into `row` (size d_in). Returns false after the last row.
  bool next(std::span<float> row, TokenRecord& record) {
    if (row.size() != header_.d_in) throw DataError("dimension mismatch: read buffer size");
    if (index_ == header_.row_count) {
      check_end();
      return false;
    }
    if (binary::read_f32(payload_, row) != row.size()) {
      throw DataError("truncated payload at row " + std::to_string(index_) + " in " + path_.string());
    }
    std::string line;
    if (!std::getline(meta_, line)) {
      throw DataError("sidecar/payload count mismatch: sidecar ends before row " + std::to_string(index_));
    }
    try {
      record = record_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("malformed sidecar line " + std::to_string(index_) + ": " + e.what());
    }
    if (record.row_index != index_) {
      throw DataError("sidecar row_index " + std::to_string(record.row_index) + " at line " +
                      std::to_string(index_));
    }
    ++index_;
    return true;
  }

 private:
  void check_end() {
    if (ended_) return;
    ended_ = true;
    if (payload_.peek() != std::char_traits<char>::eof()) {
      throw DataError("trailing payload bytes after row_count rows in " + path_.string());
    }
    std::string line;
    while (std::getline(meta_, line)) {
      if (!line.empty()) throw DataError("sidecar/payload count mismatch: extra sidecar records");
    }
  }

  std::filesystem::path path_;
  std::ifstream payload_;
  std::ifstream meta_;
  DumpHeader header_;
  std::uint64_t index_ = 0;
  bool ended_ = false;
};

/// Fully materialized dump.
struct EmbeddingDump {
  DumpHeader header;
  RowMatrix<float> rows;  // row_count x d_in
  std::vector<TokenRecord> records;
};

inline void write_dump(const std::filesystem::path& path, const EmbeddingDump& dump) {
  if (static_cast<std::uint64_t>(dump.rows.rows()) != dump.header.row_count ||
      dump.records.size() != dump.header.row_count) {
    throw DataError("dimension mismatch: header row_count " + std::to_string(dump.header.row_count) +
                    ", rows " + std::to_string(dump.rows.rows()) + ", records " +
                    std::to_string(dump.records.size()));
  }
  if (static_cast<std::uint64_t>(dump.rows.cols()) != dump.header.d_in) {
    throw DataError("dimension mismatch: rows have " + std::to_string(dump.rows.cols()) +
                    " columns, d_in is " + std::to_string(dump.header.d_in));
  }
  DumpWriter writer(path, dump.header);
  for (Eigen::Index i = 0; i < dump.rows.rows(); ++i) {
    writer.write(std::span<const float>(dump.rows.row(i).data(), dump.rows.cols()), dump.records[i]);
  }
  writer.finish();
}

inline EmbeddingDump read_dump(const std::filesystem::path& path) {
  DumpReader reader(path);
  EmbeddingDump dump;
  dump.header = reader.header();
  dump.rows.resize(static_cast<Eigen::Index>(dump.header.row_count), dump.header.d_in);
  dump.records.reserve(dump.header.row_count);
  TokenRecord rec;
  for (Eigen::Index i = 0; i < dump.rows.rows(); ++i) {
    reader.next(std::span<float>(dump.rows.row(i).data(), dump.header.d_in), rec);
    dump.records.push_back(rec);
  }
  std::vector<float> sink(dump.header.d_in);
  reader.next(sink, rec);  // end-of-stream length checks
  return dump;
}

/// Contiguous run of rows sharing a prompt_id.
struct PromptSpan {
  std::uint64_t prompt_id = 0;
  std::size_t first_row = 0;
  std::size_t row_count = 0;
  std::optional<std::string> concept_label;
  Split split = Split::train;
};

/// Groups rows into prompts; optionally keeps only prompts in `split`.
inline std::vector<PromptSpan> group_prompts(const std::vector<TokenRecord>& records,
                                             std::optional<Split> split = std::nullopt) {
  std::vector<PromptSpan> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (out.empty() || out.back().prompt_id != r.prompt_id ||
        out.back().first_row + out.back().row_count != i) {
      out.push_back({r.prompt_id, i, 0, r.concept_label, r.split});
    }
    ++out.back().row_count;
  }
  if (split) std::erase_if(out, [&](const PromptSpan& p) { return p.split != *split; });
  return out;
}

/// Validation findings for `inspect`. Errors make the dump unusable, warnings do not.
struct DumpValidation {
  std::vector<std::string> warnings;
  std::map<std::string, std::size_t> rows_per_split;
  std::map<std::string, std::size_t> rows_per_label;
  std::size_t prompt_count = 0;
};

inline DumpValidation validate_dump(const EmbeddingDump& dump) {
  DumpValidation v;
  for (const auto& r : dump.records) {
    ++v.rows_per_split[to_string(r.split)];
    ++v.rows_per_label[r.concept_label.value_or("<none>")];
  }
  const auto prompts = group_prompts(dump.records);
  v.prompt_count = prompts.size();
  std::map<std::uint64_t, std::size_t> seen;
  for (const auto& p : prompts) {
    if (++seen[p.prompt_id] > 1) {
      v.warnings.push_back("prompt " + std::to_string(p.prompt_id) + " is split across non-contiguous rows");
    }
    for (std::size_t h = 0; h < p.row_count; ++h) {
      const auto& r = dump.records[p.first_row + h];
      if (r.token_position != h) {
        v.warnings.push_back("row " + std::to_string(r.row_index) + ": token_position " +
                             std::to_string(r.token_position) + " expected " + std::to_string(h));
        break;
      }
      if (r.concept_label != p.concept_label || r.split != p.split) {
        v.warnings.push_back("row " + std::to_string(r.row_index) + ": label/split differs within prompt");
        break;
      }
    }
  }
  if (!dump.rows.allFinite()) v.warnings.push_back("payload contains non-finite values");
  return v;
}

}  // namespace saerase
