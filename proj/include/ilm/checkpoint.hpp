#pragma once

// Checkpoint container:
//   "ILMC" u32 version, u32 len + config JSON, u32 len + vocab fingerprint,
//   u64 step, u32 tensor count, then per tensor: u32 len + name, u32 rows,
//   u32 cols, rows*cols little-endian f32.
// Optimizer moments, when present, are stored as extra tensors named
// "adam.m/<name>" and "adam.v/<name>".

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilm/error.hpp"
#include "ilm/examples.hpp"
#include "ilm/model.hpp"
#include "ilm/rng.hpp"

namespace ilm {

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::uint64_t step = 0;
};

struct Checkpoint {
  Transformer<float> model;
  std::string vocab_fingerprint;
  std::uint64_t step = 0;
  std::optional<AdamState> optimizer;
};

namespace detail {

inline void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

inline void put_tensor(std::ostream& out, const std::string& name, const TensorInfo& t,
                       const float* data) {
  put_str(out, name);
  put_u32(out, static_cast<std::uint32_t>(t.rows));
  put_u32(out, static_cast<std::uint32_t>(t.cols));
  for (std::size_t i = 0; i < t.size(); ++i) put_f32(out, data[t.offset + i]);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out.write("ILMC", 4);
  detail::put_u32(out, 1);
  detail::put_str(out, ck.model.config().to_json().dump());
  detail::put_str(out, ck.vocab_fingerprint);
  detail::put_u64(out, ck.step);
  detail::put_u64(out, ck.optimizer ? ck.optimizer->step : 0);
  const auto& tensors = ck.model.layout().tensors();
  const std::size_t n = tensors.size() * (ck.optimizer ? 3 : 1);
  detail::put_u32(out, static_cast<std::uint32_t>(n));
  for (const auto& t : tensors) detail::put_tensor(out, t.name, t, ck.model.params().data());
  if (ck.optimizer) {
    for (const auto& t : tensors) detail::put_tensor(out, "adam.m/" + t.name, t, ck.optimizer->m.data());
    for (const auto& t : tensors) detail::put_tensor(out, "adam.v/" + t.name, t, ck.optimizer->v.data());
  }
  if (!out) throw Error(ErrorCode::kIoError, "write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "ILMC") {
    throw Error(ErrorCode::kMalformedRecord, path.string() + " is not a checkpoint");
  }
  if (detail::get_u32(in) != 1) throw Error(ErrorCode::kMalformedRecord, "unsupported checkpoint version");
  ModelConfig config;
  try {
    config = ModelConfig::from_json(nlohmann::json::parse(detail::get_str(in, 1u << 20)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedRecord, std::string("checkpoint config: ") + e.what());
  }
  Checkpoint ck{Transformer<float>(config), detail::get_str(in, 1024), 0, std::nullopt};
  ck.step = detail::get_u64(in);
  const std::uint64_t adam_step = detail::get_u64(in);
  const std::uint32_t n = detail::get_u32(in);
  const ParamLayout& layout = ck.model.layout();
  std::vector<bool> seen(layout.tensors().size(), false);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = detail::get_str(in, 4096);
    const std::uint32_t rows = detail::get_u32(in);
    const std::uint32_t cols = detail::get_u32(in);
    std::vector<float>* dest = &ck.model.params();
    if (name.starts_with("adam.")) {
      if (!ck.optimizer) {
        ck.optimizer = AdamState{std::vector<float>(layout.total()), std::vector<float>(layout.total()), adam_step};
      }
      dest = name.starts_with("adam.m/") ? &ck.optimizer->m : &ck.optimizer->v;
      name = name.substr(7);
    }
    const TensorInfo& t = layout.find(name);
    if (t.rows != rows || t.cols != cols) {
      throw Error(ErrorCode::kShapeMismatch, "tensor " + name + " has shape " + std::to_string(rows) +
                                                 "x" + std::to_string(cols) + ", config expects " +
                                                 std::to_string(t.rows) + "x" + std::to_string(t.cols));
    }
    for (std::size_t k = 0; k < t.size(); ++k) (*dest)[t.offset + k] = detail::get_f32(in);
    if (dest == &ck.model.params()) seen[static_cast<std::size_t>(&t - layout.tensors().data())] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw Error(ErrorCode::kShapeMismatch, "checkpoint lacks tensor " + layout.tensors()[i].name);
  }
  return ck;
}

// Content hash of the checkpoint file bytes.
inline std::string file_fingerprint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  Fnv1a h;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return hex64(h.digest());
}

}  // namespace ilm
