#pragma once

// Byte-level BPE with whitespace-aware pre-tokenization and the infilling
// special-token inventory.
//
// Id layout: specials occupy 0..kNumSpecials-1, the 256 byte tokens follow,
// learned merges come last. Encoding never produces a special id.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ilm/corpus.hpp"
#include "ilm/error.hpp"
#include "ilm/rng.hpp"

namespace ilm {

using TokenId = std::uint32_t;

enum class Special : std::uint8_t {
  kPad = 0,
  kEos,
  kSep,
  kAnswer,
  kBlankWord,
  kBlankNgram,
  kBlankSentence,
  kBlankParagraph,
  kBlankDocument,
};

inline constexpr std::size_t kNumSpecials = 9;
inline constexpr std::size_t kNumBytes = 256;
inline constexpr TokenId kFirstByteId = kNumSpecials;
inline constexpr TokenId kFirstMergeId = kNumSpecials + kNumBytes;

inline constexpr std::array<std::string_view, kNumSpecials> kSpecialSurface = {
    "[pad]", "[eos]", "[sep]", "[answer]", "[blank word]", "[blank ngram]",
    "[blank sentence]", "[blank paragraph]", "[blank document]"};

constexpr TokenId special_id(Special s) { return static_cast<TokenId>(s); }

constexpr Special blank_for(Granularity g) {
  switch (g) {
    case Granularity::kDocument: return Special::kBlankDocument;
    case Granularity::kParagraph: return Special::kBlankParagraph;
    case Granularity::kSentence: return Special::kBlankSentence;
    case Granularity::kNgram: return Special::kBlankNgram;
    case Granularity::kWord: return Special::kBlankWord;
  }
  return Special::kBlankNgram;
}

constexpr bool is_special_id(TokenId id) { return id < kNumSpecials; }

constexpr bool is_blank_id(TokenId id) {
  return id >= special_id(Special::kBlankWord) && id <= special_id(Special::kBlankDocument);
}

namespace detail {

enum class CharClass { kSpace, kAlpha, kDigit, kOther };

inline CharClass classify(unsigned char c) {
  if (is_space(static_cast<char>(c))) return CharClass::kSpace;
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80 || c == '\'') {
    return CharClass::kAlpha;
  }
  if (c >= '0' && c <= '9') return CharClass::kDigit;
  return CharClass::kOther;
}

}  // namespace detail

// Pre-tokenization: a chunk is an optional whitespace run followed by a run
// of one character class (letters, digits, or other symbols). A trailing
// whitespace run is a chunk of its own. Text splits into the same chunks
// whenever a boundary falls between a non-space and a space character.
inline std::vector<std::string_view> pretokenize(std::string_view text) {
  using detail::CharClass;
  std::vector<std::string_view> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const std::size_t start = i;
    while (i < n && detail::classify(static_cast<unsigned char>(text[i])) == CharClass::kSpace) ++i;
    if (i < n) {
      const CharClass cls = detail::classify(static_cast<unsigned char>(text[i]));
      while (i < n && detail::classify(static_cast<unsigned char>(text[i])) == cls) ++i;
    }
    out.push_back(text.substr(start, i - start));
  }
  return out;
}

class Vocab {
 public:
  static constexpr int kFormatVersion = 1;

  Vocab() { rebuild(); }

  std::size_t size() const { return pieces_.size(); }
  std::size_t num_merges() const { return merges_.size(); }
  const std::string& fingerprint() const { return fingerprint_; }
  // Set by train() when fewer merges were learnable than requested.
  bool short_of_target() const { return short_of_target_; }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }

  // Byte string of a non-special token.
  const std::string& piece(TokenId id) const { return pieces_.at(id); }

  bool has_piece(std::string_view s) const {
    return std::any_of(pieces_.begin() + kFirstByteId, pieces_.end(),
                       [&](const std::string& p) { return p == s; });
  }

  // Learns size - kNumSpecials - 256 merges from the documents' raw text.
  // Deterministic: ties between equally frequent pairs go to the smaller
  // (left, right) id pair.
  static Vocab train(std::span<const Document> corpus, std::size_t target_size) {
    std::vector<std::string_view> texts;
    texts.reserve(corpus.size());
    for (const auto& d : corpus) texts.push_back(d.raw);
    return train_texts(texts, target_size);
  }

  static Vocab train_texts(std::span<const std::string_view> texts, std::size_t target_size) {
    const std::size_t floor = kNumSpecials + kNumBytes;
    if (target_size < floor) {
      throw Error(ErrorCode::kCorpusTooSmall,
                  "target vocab size " + std::to_string(target_size) + " below floor " +
                      std::to_string(floor));
    }
    std::map<std::string, std::int64_t> chunk_counts;
    for (std::string_view t : texts) {
      for (std::string_view c : pretokenize(t)) ++chunk_counts[std::string(c)];
    }
    struct Word {
      std::vector<TokenId> ids;
      std::int64_t count;
    };
    std::vector<Word> words;
    words.reserve(chunk_counts.size());
    for (const auto& [chunk, count] : chunk_counts) {
      Word w{{}, count};
      for (unsigned char c : chunk) w.ids.push_back(kFirstByteId + c);
      words.push_back(std::move(w));
    }

    Vocab v;
    const std::size_t wanted = target_size - floor;
    std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
    while (v.merges_.size() < wanted) {
      pair_counts.clear();
      for (const Word& w : words) {
        for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) {
          pair_counts[pair_key(w.ids[i], w.ids[i + 1])] += w.count;
        }
      }
      if (pair_counts.empty()) break;
      std::uint64_t best = 0;
      std::int64_t best_count = -1;
      for (const auto& [key, count] : pair_counts) {
        if (count > best_count || (count == best_count && key < best)) {
          best = key;
          best_count = count;
        }
      }
      const TokenId left = static_cast<TokenId>(best >> 32);
      const TokenId right = static_cast<TokenId>(best & 0xffffffffu);
      const TokenId merged = static_cast<TokenId>(kFirstMergeId + v.merges_.size());
      v.merges_.emplace_back(left, right);
      for (Word& w : words) apply_merge(w.ids, left, right, merged);
    }
    v.short_of_target_ = v.merges_.size() < wanted;
    v.rebuild();
    return v;
  }

  std::vector<TokenId> encode(std::string_view text) const {
    for (std::string_view s : kSpecialSurface) {
      if (text.find(s) != std::string_view::npos) {
        throw Error(ErrorCode::kUnknownSpecialInText,
                    "text contains reserved form " + std::string(s));
      }
    }
    std::vector<TokenId> out;
    for (std::string_view chunk : pretokenize(text)) encode_chunk(chunk, out);
    return out;
  }

  // Special ids decode to their bracketed surface form.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id >= pieces_.size()) {
        throw Error(ErrorCode::kShapeMismatch, "token id " + std::to_string(id) + " out of range");
      }
      out += pieces_[id];
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json specials = nlohmann::json::object();
    for (std::size_t i = 0; i < kNumSpecials; ++i) {
      specials[std::string(kSpecialSurface[i])] = i;
    }
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [l, r] : merges_) merges.push_back({l, r});
    return {{"version", kFormatVersion},
            {"specials", specials},
            {"merges", merges},
            {"fingerprint", fingerprint_}};
  }

  static Vocab from_json(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != kFormatVersion) {
        throw Error(ErrorCode::kMalformedRecord, "unsupported vocab version");
      }
      for (std::size_t i = 0; i < kNumSpecials; ++i) {
        if (j.at("specials").at(std::string(kSpecialSurface[i])).get<std::size_t>() != i) {
          throw Error(ErrorCode::kMalformedRecord, "special id layout mismatch");
        }
      }
      Vocab v;
      for (const auto& m : j.at("merges")) {
        const auto l = m.at(0).get<TokenId>();
        const auto r = m.at(1).get<TokenId>();
        const auto next = static_cast<TokenId>(kFirstMergeId + v.merges_.size());
        if (l < kFirstByteId || r < kFirstByteId || l >= next || r >= next) {
          throw Error(ErrorCode::kMalformedRecord, "merge refers to unknown token");
        }
        v.merges_.emplace_back(l, r);
      }
      v.rebuild();
      if (j.contains("fingerprint") && j["fingerprint"].get<std::string>() != v.fingerprint_) {
        throw Error(ErrorCode::kFingerprintMismatch, "vocab content does not match its fingerprint");
      }
      return v;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kMalformedRecord, std::string("vocab json: ") + e.what());
    }
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
    out << to_json().dump() << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kMalformedRecord, path.string() + ": " + e.what());
    }
    return from_json(j);
  }

 private:
  static std::uint64_t pair_key(TokenId l, TokenId r) {
    return (static_cast<std::uint64_t>(l) << 32) | r;
  }

  static void apply_merge(std::vector<TokenId>& ids, TokenId l, TokenId r, TokenId merged) {
    std::size_t w = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i + 1 < ids.size() && ids[i] == l && ids[i + 1] == r) {
        ids[w++] = merged;
        ++i;
      } else {
        ids[w++] = ids[i];
      }
    }
    ids.resize(w);
  }

  // Applies merges in rank order: repeatedly merge the adjacent pair whose
  // merge was learned first.
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
    std::vector<TokenId> ids;
    ids.reserve(chunk.size());
    for (unsigned char c : chunk) ids.push_back(kFirstByteId + c);
    while (ids.size() > 1) {
      std::size_t best_rank = SIZE_MAX;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        auto it = rank_.find(pair_key(ids[i], ids[i + 1]));
        if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == SIZE_MAX) break;
      const auto [l, r] = merges_[best_rank];
      apply_merge(ids, l, r, static_cast<TokenId>(kFirstMergeId + best_rank));
    }
    out.insert(out.end(), ids.begin(), ids.end());
  }

  void rebuild() {
    pieces_.clear();
    for (std::string_view s : kSpecialSurface) pieces_.emplace_back(s);
    for (std::size_t b = 0; b < kNumBytes; ++b) pieces_.emplace_back(1, static_cast<char>(b));
    rank_.clear();
    Fnv1a h;
    const std::int32_t version = kFormatVersion;
    h.update_pod(version);
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      const auto [l, r] = merges_[i];
      pieces_.push_back(pieces_[l] + pieces_[r]);
      rank_[pair_key(l, r)] = i;
      h.update_pod(l);
      h.update_pod(r);
    }
    fingerprint_ = hex64(h.digest());
  }

  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::vector<std::string> pieces_;
  std::unordered_map<std::uint64_t, std::size_t> rank_;
  std::string fingerprint_;
  bool short_of_target_ = false;
};

}  // namespace ilm
