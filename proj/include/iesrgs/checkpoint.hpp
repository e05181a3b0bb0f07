#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "iesrgs/io.hpp"
#include "iesrgs/optimizer.hpp"

namespace iesrgs {

/// Versioned binary container: magic "IESR", u32 version, u32 field count,
/// then a directory of (u32 name length, name bytes, u32 rows, u32 cols)
/// followed by each field's rows*cols little-endian f32 values in directory
/// order.
struct CheckpointField {
  std::uint32_t rows{0};
  std::uint32_t cols{0};
  std::vector<double> values;
};

using Checkpoint = std::map<std::string, CheckpointField>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  detail::ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write("IESR", 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(ck.size()));
  for (const auto& [name, f] : ck) {
    IESRGS_EXPECTS(f.values.size() == static_cast<std::size_t>(f.rows) * f.cols, "checkpoint field size mismatch");
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, f.rows);
    detail::write_u32(os, f.cols);
  }
  for (const auto& [name, f] : ck) detail::write_f32_array(os, f.values);
  if (!os) throw IoError("write failed: " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "IESR") throw IoError("not a checkpoint: " + path.string());
  const std::uint32_t version = detail::read_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  const std::uint32_t count = detail::read_u32(is);
  if (!is || count > 1024) throw IoError("bad checkpoint directory: " + path.string());
  std::vector<std::pair<std::string, CheckpointField>> dir;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = detail::read_u32(is);
    if (!is || len > 256) throw IoError("bad checkpoint directory: " + path.string());
    std::string name(len, '\0');
    is.read(name.data(), len);
    CheckpointField f;
    f.rows = detail::read_u32(is);
    f.cols = detail::read_u32(is);
    if (!is || static_cast<std::uint64_t>(f.rows) * f.cols > (1ULL << 28))
      throw IoError("bad checkpoint directory: " + path.string());
    dir.emplace_back(std::move(name), f);
  }
  Checkpoint ck;
  for (auto& [name, f] : dir) {
    f.values = detail::read_f32_array(is, static_cast<std::size_t>(f.rows) * f.cols);
    if (!is) throw IoError("truncated checkpoint: " + path.string());
    ck.emplace(name, std::move(f));
  }
  return ck;
}

namespace detail {

inline CheckpointField rows_field(const std::vector<RawParams>& rows) {
  CheckpointField f{static_cast<std::uint32_t>(rows.size()), 14, {}};
  f.values.reserve(rows.size() * 14);
  for (const auto& r : rows) f.values.insert(f.values.end(), r.begin(), r.end());
  return f;
}

inline std::vector<RawParams> field_rows(const CheckpointField& f) {
  if (f.cols != 14) throw IoError("checkpoint parameter field must have 14 columns");
  std::vector<RawParams> rows(f.rows);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int k = 0; k < 14; ++k) rows[i][k] = f.values[i * 14 + k];
  return rows;
}

}  // namespace detail

/// Raw parameters and optimizer moments of a training run.
inline Checkpoint make_checkpoint(const ParamSet& params, const OptimizerState& state) {
  Checkpoint ck;
  ck["params"] = detail::rows_field(params.rows);
  ck["adam_m"] = detail::rows_field(state.m);
  ck["adam_v"] = detail::rows_field(state.v);
  ck["step"] = CheckpointField{1, 1, {static_cast<double>(state.step)}};
  return ck;
}

inline void load_checkpoint(const Checkpoint& ck, ParamSet& params, OptimizerState& state) {
  for (const char* key : {"params", "adam_m", "adam_v", "step"})
    if (!ck.count(key)) throw IoError(std::string("checkpoint lacks field '") + key + "'");
  params.rows = detail::field_rows(ck.at("params"));
  state.m = detail::field_rows(ck.at("adam_m"));
  state.v = detail::field_rows(ck.at("adam_v"));
  state.step = static_cast<std::size_t>(ck.at("step").values.at(0));
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw IoError("checkpoint optimizer rows do not match parameter rows");
}

}  // namespace iesrgs
