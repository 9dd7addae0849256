#pragma once

// Token-level training/eval examples for the four infilling strategies:
//
//   ILM    x~ [sep] y1 [answer] ... yk [answer]
//   LM     x [eos]
//   LMREV  reverse(x) [eos]
//   LMALL  x~ [sep] x [eos]
//
// x is encoded with every span boundary acting as a pre-tokenization
// barrier, so the tokens of each masked span are the same in every strategy.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ilm/corpus.hpp"
#include "ilm/error.hpp"
#include "ilm/masker.hpp"
#include "ilm/tokenizer.hpp"

namespace ilm {

enum class Strategy : std::uint8_t { kIlm = 0, kLm = 1, kLmRev = 2, kLmAll = 3 };

inline constexpr Strategy kAllStrategies[] = {Strategy::kLm, Strategy::kLmRev, Strategy::kLmAll,
                                              Strategy::kIlm};

constexpr std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kIlm: return "ilm";
    case Strategy::kLm: return "lm";
    case Strategy::kLmRev: return "lmrev";
    case Strategy::kLmAll: return "lmall";
  }
  return "?";
}

constexpr std::string_view strategy_label(Strategy s) {
  switch (s) {
    case Strategy::kIlm: return "ILM";
    case Strategy::kLm: return "LM";
    case Strategy::kLmRev: return "LMrev";
    case Strategy::kLmAll: return "LMall";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view s) {
  for (Strategy st : kAllStrategies) {
    if (strategy_name(st) == s) return st;
  }
  return std::nullopt;
}

enum class LossScope : std::uint8_t { kAll = 0, kTargetsOnly = 1 };

struct TokenRange {
  std::uint32_t begin = 0;
  std::uint32_t end = 0;

  std::uint32_t size() const { return end - begin; }
  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

struct InfillExample {
  Strategy strategy = Strategy::kIlm;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> loss_mask;  // 1 = position contributes to the loss
  std::vector<TokenRange> target_spans;
  std::uint32_t k = 0;
  std::string doc_id;

  friend bool operator==(const InfillExample&, const InfillExample&) = default;
};

struct BuildOptions {
  std::size_t max_seq_len = 256;
  LossScope loss_scope = LossScope::kAll;
};

// x split at the span boundaries: context[i] precedes span i, context[k]
// follows the last span.
struct SegmentedEncoding {
  std::vector<std::vector<TokenId>> context;
  std::vector<std::vector<TokenId>> spans;
  std::vector<Granularity> granularity;

  std::size_t x_length() const {
    std::size_t n = 0;
    for (const auto& c : context) n += c.size();
    for (const auto& s : spans) n += s.size();
    return n;
  }
};

inline SegmentedEncoding encode_segmented(const Document& doc, const MaskedDocument& masked,
                                          const Vocab& vocab) {
  if (!belongs_to(masked, doc)) {
    throw Error(ErrorCode::kShapeMismatch, "mask does not belong to document '" + doc.id + "'");
  }
  SegmentedEncoding seg;
  std::string_view raw = doc.raw;
  std::size_t cursor = 0;
  for (const auto& s : masked.spans) {
    seg.context.push_back(vocab.encode(raw.substr(cursor, s.span.begin - cursor)));
    seg.spans.push_back(vocab.encode(raw.substr(s.span.begin, s.span.size())));
    seg.granularity.push_back(s.granularity);
    cursor = s.span.end;
  }
  seg.context.push_back(vocab.encode(raw.substr(cursor)));
  return seg;
}

namespace detail {

inline void append(std::vector<TokenId>& out, const std::vector<TokenId>& in) {
  out.insert(out.end(), in.begin(), in.end());
}

// x~ with granularity blanks in place of the spans.
inline void append_masked(std::vector<TokenId>& out, const SegmentedEncoding& seg) {
  for (std::size_t i = 0; i < seg.spans.size(); ++i) {
    append(out, seg.context[i]);
    out.push_back(special_id(blank_for(seg.granularity[i])));
  }
  append(out, seg.context.back());
}

// x with target ranges recorded relative to `offset`.
inline void append_full(std::vector<TokenId>& out, const SegmentedEncoding& seg,
                        std::vector<TokenRange>& targets) {
  for (std::size_t i = 0; i < seg.spans.size(); ++i) {
    append(out, seg.context[i]);
    const auto b = static_cast<std::uint32_t>(out.size());
    append(out, seg.spans[i]);
    targets.push_back({b, static_cast<std::uint32_t>(out.size())});
  }
  append(out, seg.context.back());
}

inline InfillExample finish(InfillExample ex, const BuildOptions& opts) {
  if (ex.tokens.size() > opts.max_seq_len) {
    throw Error(ErrorCode::kSequenceTooLong,
                std::string(strategy_name(ex.strategy)) + " example for '" + ex.doc_id + "' has " +
                    std::to_string(ex.tokens.size()) + " tokens, limit " +
                    std::to_string(opts.max_seq_len));
  }
  if (opts.loss_scope == LossScope::kAll) {
    ex.loss_mask.assign(ex.tokens.size(), 1);
  } else {
    ex.loss_mask.assign(ex.tokens.size(), 0);
    for (const auto& t : ex.target_spans) {
      std::fill(ex.loss_mask.begin() + t.begin, ex.loss_mask.begin() + t.end, 1);
    }
  }
  return ex;
}

}  // namespace detail

inline InfillExample build_ilm(const SegmentedEncoding& seg, std::string doc_id,
                               const BuildOptions& opts = {}) {
  InfillExample ex{Strategy::kIlm, {}, {}, {}, static_cast<std::uint32_t>(seg.spans.size()),
                   std::move(doc_id)};
  detail::append_masked(ex.tokens, seg);
  ex.tokens.push_back(special_id(Special::kSep));
  for (const auto& span : seg.spans) {
    const auto b = static_cast<std::uint32_t>(ex.tokens.size());
    detail::append(ex.tokens, span);
    ex.target_spans.push_back({b, static_cast<std::uint32_t>(ex.tokens.size())});
    ex.tokens.push_back(special_id(Special::kAnswer));
  }
  return detail::finish(std::move(ex), opts);
}

inline InfillExample build_lm(const SegmentedEncoding& seg, std::string doc_id,
                              const BuildOptions& opts = {}) {
  InfillExample ex{Strategy::kLm, {}, {}, {}, static_cast<std::uint32_t>(seg.spans.size()),
                   std::move(doc_id)};
  detail::append_full(ex.tokens, seg, ex.target_spans);
  ex.tokens.push_back(special_id(Special::kEos));
  return detail::finish(std::move(ex), opts);
}

inline InfillExample build_lmrev(const SegmentedEncoding& seg, std::string doc_id,
                                 const BuildOptions& opts = {}) {
  InfillExample ex{Strategy::kLmRev, {}, {}, {}, static_cast<std::uint32_t>(seg.spans.size()),
                   std::move(doc_id)};
  std::vector<TokenRange> forward;
  detail::append_full(ex.tokens, seg, forward);
  const auto n = static_cast<std::uint32_t>(ex.tokens.size());
  std::reverse(ex.tokens.begin(), ex.tokens.end());
  for (auto it = forward.rbegin(); it != forward.rend(); ++it) {
    ex.target_spans.push_back({n - it->end, n - it->begin});
  }
  ex.tokens.push_back(special_id(Special::kEos));
  return detail::finish(std::move(ex), opts);
}

inline InfillExample build_lmall(const SegmentedEncoding& seg, std::string doc_id,
                                 const BuildOptions& opts = {}) {
  InfillExample ex{Strategy::kLmAll, {}, {}, {}, static_cast<std::uint32_t>(seg.spans.size()),
                   std::move(doc_id)};
  detail::append_masked(ex.tokens, seg);
  ex.tokens.push_back(special_id(Special::kSep));
  detail::append_full(ex.tokens, seg, ex.target_spans);
  ex.tokens.push_back(special_id(Special::kEos));
  return detail::finish(std::move(ex), opts);
}

inline InfillExample build_example(Strategy s, const SegmentedEncoding& seg, std::string doc_id,
                                   const BuildOptions& opts = {}) {
  switch (s) {
    case Strategy::kIlm: return build_ilm(seg, std::move(doc_id), opts);
    case Strategy::kLm: return build_lm(seg, std::move(doc_id), opts);
    case Strategy::kLmRev: return build_lmrev(seg, std::move(doc_id), opts);
    case Strategy::kLmAll: return build_lmall(seg, std::move(doc_id), opts);
  }
  throw Error(ErrorCode::kConfigInvalid, "unknown strategy");
}

inline InfillExample build_example(Strategy s, const Document& doc, const MaskedDocument& masked,
                                   const Vocab& vocab, const BuildOptions& opts = {}) {
  return build_example(s, encode_segmented(doc, masked, vocab), doc.id, opts);
}

inline InfillExample build_ilm(const Document& doc, const MaskedDocument& masked, const Vocab& vocab,
                               const BuildOptions& opts = {}) {
  return build_example(Strategy::kIlm, doc, masked, vocab, opts);
}
inline InfillExample build_lm(const Document& doc, const MaskedDocument& masked, const Vocab& vocab,
                              const BuildOptions& opts = {}) {
  return build_example(Strategy::kLm, doc, masked, vocab, opts);
}
inline InfillExample build_lmrev(const Document& doc, const MaskedDocument& masked,
                                 const Vocab& vocab, const BuildOptions& opts = {}) {
  return build_example(Strategy::kLmRev, doc, masked, vocab, opts);
}
inline InfillExample build_lmall(const Document& doc, const MaskedDocument& masked,
                                 const Vocab& vocab, const BuildOptions& opts = {}) {
  return build_example(Strategy::kLmAll, doc, masked, vocab, opts);
}

// Multiset of target token ids, in target order.
inline std::vector<TokenId> target_tokens(const InfillExample& ex) {
  std::vector<TokenId> out;
  for (const auto& t : ex.target_spans) {
    out.insert(out.end(), ex.tokens.begin() + t.begin, ex.tokens.begin() + t.end);
  }
  return out;
}

// Upper bound on the longest (LMALL) encoding of a document under any mask:
// 2 * |encode(x)| + 2 when no boundary splits a chunk. Used for load-time
// filtering; builders still enforce the exact limit.
inline bool fits_lmall(const Document& doc, const Vocab& vocab, std::size_t max_seq_len) {
  return 2 * vocab.encode(doc.raw).size() + 2 <= max_seq_len;
}

// ---------------------------------------------------------------------------
// Dataset files.
//
// Layout (little-endian):
//   "ILMD" u32 version, u32 len + vocab fingerprint bytes, u64 count, then
//   per record: u8 strategy, u32 len + doc_id, u32 k, u32 n, n x u32 tokens,
//   ceil(n/8) bytes loss mask (bit i of byte i/8, LSB first),
//   u32 m, m x (u32 begin, u32 end).
// A JSON manifest is written next to the file as <path>.manifest.json.

struct DatasetManifest {
  int version = 1;
  std::string vocab_fingerprint;
  nlohmann::json policy = nlohmann::json::object();
  std::size_t count = 0;
  std::map<std::string, std::size_t> counts_per_strategy;

  nlohmann::json to_json() const {
    return {{"version", version},
            {"vocab_fingerprint", vocab_fingerprint},
            {"policy", policy},
            {"count", count},
            {"counts_per_strategy", counts_per_strategy}};
  }
};

inline std::filesystem::path manifest_path(const std::filesystem::path& dataset) {
  return dataset.string() + ".manifest.json";
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_str(std::ostream& out, std::string_view s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw Error(ErrorCode::kMalformedRecord, "truncated binary file");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& in) {
  const std::uint64_t lo = get_u32(in);
  return lo | (static_cast<std::uint64_t>(get_u32(in)) << 32);
}

inline std::string get_str(std::istream& in, std::size_t limit = 1u << 30) {
  const std::uint32_t n = get_u32(in);
  if (n > limit) throw Error(ErrorCode::kMalformedRecord, "string length out of range");
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), n)) throw Error(ErrorCode::kMalformedRecord, "truncated string");
  return s;
}

}  // namespace detail

inline DatasetManifest write_dataset(const std::filesystem::path& path,
                                     const std::vector<InfillExample>& examples,
                                     const std::string& vocab_fingerprint,
                                     const nlohmann::json& policy = nlohmann::json::object()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out.write("ILMD", 4);
  detail::put_u32(out, 1);
  detail::put_str(out, vocab_fingerprint);
  detail::put_u64(out, examples.size());
  DatasetManifest manifest;
  manifest.vocab_fingerprint = vocab_fingerprint;
  manifest.policy = policy;
  for (const auto& ex : examples) {
    out.put(static_cast<char>(ex.strategy));
    detail::put_str(out, ex.doc_id);
    detail::put_u32(out, ex.k);
    detail::put_u32(out, static_cast<std::uint32_t>(ex.tokens.size()));
    for (TokenId t : ex.tokens) detail::put_u32(out, t);
    std::string bits((ex.tokens.size() + 7) / 8, '\0');
    for (std::size_t i = 0; i < ex.loss_mask.size(); ++i) {
      if (ex.loss_mask[i]) bits[i / 8] = static_cast<char>(bits[i / 8] | (1 << (i % 8)));
    }
    out.write(bits.data(), static_cast<std::streamsize>(bits.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(ex.target_spans.size()));
    for (const auto& t : ex.target_spans) {
      detail::put_u32(out, t.begin);
      detail::put_u32(out, t.end);
    }
    ++manifest.count;
    ++manifest.counts_per_strategy[std::string(strategy_name(ex.strategy))];
  }
  if (!out) throw Error(ErrorCode::kIoError, "write failed for " + path.string());
  std::ofstream mf(manifest_path(path), std::ios::binary);
  if (!mf) throw Error(ErrorCode::kIoError, "cannot write manifest for " + path.string());
  mf << manifest.to_json().dump(2) << '\n';
  return manifest;
}

// Reads a dataset; when expected_fingerprint is given it must match the
// fingerprint recorded in the file.
inline std::vector<InfillExample> read_dataset(const std::filesystem::path& path,
                                               std::optional<std::string> expected_fingerprint = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "ILMD") {
    throw Error(ErrorCode::kMalformedRecord, path.string() + " is not a dataset file");
  }
  if (detail::get_u32(in) != 1) throw Error(ErrorCode::kMalformedRecord, "unsupported dataset version");
  const std::string fp = detail::get_str(in, 1024);
  if (expected_fingerprint && *expected_fingerprint != fp) {
    throw Error(ErrorCode::kFingerprintMismatch,
                path.string() + " was built with vocab " + fp + ", expected " + *expected_fingerprint);
  }
  const std::uint64_t count = detail::get_u64(in);
  std::vector<InfillExample> out;
  out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 20)));
  for (std::uint64_t r = 0; r < count; ++r) {
    InfillExample ex;
    const int s = in.get();
    if (s < 0 || s > 3) throw Error(ErrorCode::kMalformedRecord, "bad strategy tag in record " + std::to_string(r));
    ex.strategy = static_cast<Strategy>(s);
    ex.doc_id = detail::get_str(in, 1u << 16);
    ex.k = detail::get_u32(in);
    const std::uint32_t n = detail::get_u32(in);
    if (n > (1u << 24)) throw Error(ErrorCode::kMalformedRecord, "record too long");
    ex.tokens.resize(n);
    for (auto& t : ex.tokens) t = detail::get_u32(in);
    std::string bits((n + 7) / 8, '\0');
    if (!bits.empty() && !in.read(bits.data(), static_cast<std::streamsize>(bits.size()))) {
      throw Error(ErrorCode::kMalformedRecord, "truncated loss mask");
    }
    ex.loss_mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) ex.loss_mask[i] = (bits[i / 8] >> (i % 8)) & 1;
    const std::uint32_t m = detail::get_u32(in);
    if (m > n) throw Error(ErrorCode::kMalformedRecord, "too many target spans");
    ex.target_spans.resize(m);
    for (auto& t : ex.target_spans) {
      t.begin = detail::get_u32(in);
      t.end = detail::get_u32(in);
      if (t.begin > t.end || t.end > n) throw Error(ErrorCode::kMalformedRecord, "target span out of range");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<InfillExample> read_dataset(const std::filesystem::path& path, const Vocab& vocab) {
  return read_dataset(path, std::optional<std::string>(vocab.fingerprint()));
}

}  // namespace ilm
