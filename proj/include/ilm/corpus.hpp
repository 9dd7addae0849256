#pragma once

// Corpus ingestion and the document -> paragraph -> sentence -> word tree
// that the masker traverses.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ilm/error.hpp"

namespace ilm {

enum class Granularity : std::uint8_t {
  kDocument = 0,
  kParagraph = 1,
  kSentence = 2,
  kNgram = 3,
  kWord = 4,
};

inline constexpr Granularity kAllGranularities[] = {
    Granularity::kDocument, Granularity::kParagraph, Granularity::kSentence,
    Granularity::kNgram, Granularity::kWord};

constexpr std::string_view granularity_name(Granularity g) {
  switch (g) {
    case Granularity::kDocument: return "document";
    case Granularity::kParagraph: return "paragraph";
    case Granularity::kSentence: return "sentence";
    case Granularity::kNgram: return "ngram";
    case Granularity::kWord: return "word";
  }
  return "?";
}

inline std::optional<Granularity> parse_granularity(std::string_view s) {
  for (Granularity g : kAllGranularities) {
    if (granularity_name(g) == s) return g;
  }
  return std::nullopt;
}

// Half-open character range [begin, end) into Document::raw.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(const CharSpan& o) const { return begin <= o.begin && o.end <= end; }
  bool overlaps(const CharSpan& o) const { return begin < o.end && o.begin < end; }
  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct HierNode {
  Granularity granularity = Granularity::kWord;
  CharSpan span;
  std::vector<HierNode> children;

  bool is_leaf() const { return children.empty(); }
  friend bool operator==(const HierNode&, const HierNode&) = default;
};

struct Document {
  std::string id;
  std::string raw;
  HierNode root;
  bool meta_first_paragraph = false;

  std::string_view text(const CharSpan& s) const {
    return std::string_view(raw).substr(s.begin, s.size());
  }
  friend bool operator==(const Document&, const Document&) = default;
};

namespace detail {

inline bool is_space(char c) {
  return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_terminal(char c) { return c == '.' || c == '!' || c == '?'; }

// Splits [begin, end) into maximal runs of non-whitespace.
inline std::vector<CharSpan> split_words(std::string_view raw, CharSpan range) {
  std::vector<CharSpan> out;
  std::size_t i = range.begin;
  while (i < range.end) {
    while (i < range.end && is_space(raw[i])) ++i;
    if (i >= range.end) break;
    std::size_t j = i;
    while (j < range.end && !is_space(raw[j])) ++j;
    out.push_back({i, j});
    i = j;
  }
  return out;
}

// A sentence ends at a word whose last character is terminal punctuation and
// that is followed by whitespace (or by the end of the paragraph).
inline HierNode build_paragraph(std::string_view raw, CharSpan range) {
  HierNode para{Granularity::kParagraph, range, {}};
  const auto words = split_words(raw, range);
  HierNode sentence{Granularity::kSentence, {}, {}};
  for (const CharSpan& w : words) {
    if (sentence.children.empty()) sentence.span.begin = w.begin;
    sentence.children.push_back({Granularity::kWord, w, {}});
    sentence.span.end = w.end;
    if (is_terminal(raw[w.end - 1])) {
      para.children.push_back(std::move(sentence));
      sentence = HierNode{Granularity::kSentence, {}, {}};
    }
  }
  if (!sentence.children.empty()) para.children.push_back(std::move(sentence));
  return para;
}

// Paragraph ranges: separated by lines that contain only whitespace.
inline std::vector<CharSpan> split_paragraphs(std::string_view raw, bool meta_first_line) {
  std::vector<CharSpan> out;
  std::size_t pos = 0;
  std::size_t para_begin = std::string_view::npos;
  std::size_t para_end = 0;
  bool first_line = true;
  while (pos < raw.size()) {
    std::size_t eol = raw.find('\n', pos);
    const std::size_t line_end = eol == std::string_view::npos ? raw.size() : eol;
    const auto words = split_words(raw, {pos, line_end});
    if (words.empty()) {
      if (para_begin != std::string_view::npos) {
        out.push_back({para_begin, para_end});
        para_begin = std::string_view::npos;
      }
    } else {
      if (para_begin == std::string_view::npos) para_begin = words.front().begin;
      para_end = words.back().end;
      if (first_line && meta_first_line) {
        out.push_back({para_begin, para_end});
        para_begin = std::string_view::npos;
      }
      first_line = false;
    }
    pos = line_end + 1;
  }
  if (para_begin != std::string_view::npos) out.push_back({para_begin, para_end});
  return out;
}

// Well-formed UTF-8: shortest-form sequences, no surrogates, <= U+10FFFF.
inline bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2, cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3, cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4, cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    static constexpr std::uint32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += len;
  }
  return true;
}

}  // namespace detail

// Paragraphs split on blank lines, sentences on terminal punctuation followed
// by whitespace, words on whitespace. With meta_first_line the first line is
// its own paragraph even without a blank line after it (title/metadata).
inline Document parse_document(std::string raw, std::string id = {},
                               bool meta_first_line = false) {
  Document doc;
  doc.id = std::move(id);
  doc.raw = std::move(raw);
  doc.meta_first_paragraph = meta_first_line;
  doc.root = HierNode{Granularity::kDocument, {0, doc.raw.size()}, {}};
  for (const CharSpan& p : detail::split_paragraphs(doc.raw, meta_first_line)) {
    doc.root.children.push_back(detail::build_paragraph(doc.raw, p));
  }
  if (doc.root.children.empty()) {
    throw Error(ErrorCode::kEmptyDocument, "document '" + doc.id + "' has no words");
  }
  return doc;
}

// Rebuilds the raw string from leaf words and the separator characters
// between them; equals doc.raw for every parsed document.
inline std::string reconstruct(const Document& doc) {
  std::string out;
  std::size_t cursor = 0;
  auto visit = [&](auto&& self, const HierNode& n) -> void {
    if (n.is_leaf()) {
      out.append(doc.raw, cursor, n.span.begin - cursor);
      out.append(doc.raw, n.span.begin, n.span.size());
      cursor = n.span.end;
      return;
    }
    for (const auto& c : n.children) self(self, c);
  };
  visit(visit, doc.root);
  out.append(doc.raw, cursor, doc.raw.size() - cursor);
  return out;
}

// Flattened views of the tree, in document order.
inline std::vector<const HierNode*> nodes_at(const Document& doc, Granularity g) {
  std::vector<const HierNode*> out;
  auto visit = [&](auto&& self, const HierNode& n) -> void {
    if (n.granularity == g) {
      out.push_back(&n);
      return;
    }
    for (const auto& c : n.children) self(self, c);
  };
  visit(visit, doc.root);
  return out;
}

inline std::size_t word_count(const Document& doc) {
  return nodes_at(doc, Granularity::kWord).size();
}

enum class CorpusFormat { kBlankLineTxt, kJsonl };

inline std::optional<CorpusFormat> parse_corpus_format(std::string_view s) {
  if (s == "txt" || s == "blankline-delimited-txt") return CorpusFormat::kBlankLineTxt;
  if (s == "jsonl") return CorpusFormat::kJsonl;
  return std::nullopt;
}

struct LoadOptions {
  // Declares that every document starts with a title/metadata line.
  bool has_meta = false;
};

// Streams documents from a corpus file in file order. Single consumer.
//
// blankline-delimited-txt: documents are separated by whitespace-only lines;
//   ids are "<index>".
// jsonl: {"text": ..., "id"?: ..., "has_meta"?: bool} per line. Empty lines
//   are skipped; a record's "has_meta" overrides LoadOptions::has_meta.
class CorpusReader {
 public:
  CorpusReader(const std::filesystem::path& path, CorpusFormat format, LoadOptions options = {})
      : in_(path), format_(format), options_(options), path_(path.string()) {
    if (!in_) throw Error(ErrorCode::kIoError, "cannot open corpus file " + path_);
  }

  std::optional<Document> next() {
    return format_ == CorpusFormat::kJsonl ? next_jsonl() : next_txt();
  }

 private:
  std::optional<Document> next_txt() {
    std::string block;
    std::string line;
    bool any = false;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (detail::split_words(line, {0, line.size()}).empty()) {
        if (any) break;
        continue;
      }
      if (any) block.push_back('\n');
      block += line;
      any = true;
    }
    if (!any) return std::nullopt;
    const std::size_t record = index_++;
    if (!detail::valid_utf8(block)) throw malformed(record, "text is not valid UTF-8");
    return parse_document(std::move(block), std::to_string(record), options_.has_meta);
  }

  std::optional<Document> next_jsonl() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (detail::split_words(line, {0, line.size()}).empty()) continue;
      const std::size_t record = index_++;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw malformed(record, e.what());
      }
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
        throw malformed(record, "missing string field \"text\"");
      }
      std::string id = std::to_string(record);
      if (j.contains("id")) {
        if (j["id"].is_string()) id = j["id"].get<std::string>();
        else if (j["id"].is_number_integer()) id = std::to_string(j["id"].get<long long>());
        else throw malformed(record, "\"id\" must be a string or integer");
      }
      bool meta = options_.has_meta;
      if (j.contains("has_meta")) {
        if (!j["has_meta"].is_boolean()) throw malformed(record, "\"has_meta\" must be boolean");
        meta = j["has_meta"].get<bool>();
      }
      try {
        return parse_document(j["text"].get<std::string>(), std::move(id), meta);
      } catch (const Error& e) {
        throw malformed(record, e.what());
      }
    }
    return std::nullopt;
  }

  Error malformed(std::size_t record, const std::string& why) const {
    return Error(ErrorCode::kMalformedRecord,
                 path_ + " record " + std::to_string(record) + " (line " +
                     std::to_string(line_no_) + "): " + why);
  }

  std::ifstream in_;
  CorpusFormat format_;
  LoadOptions options_;
  std::string path_;
  std::size_t index_ = 0;
  std::size_t line_no_ = 0;
};

inline std::vector<Document> load_corpus(const std::filesystem::path& path, CorpusFormat format,
                                         LoadOptions options = {}) {
  CorpusReader reader(path, format, options);
  std::vector<Document> docs;
  while (auto d = reader.next()) docs.push_back(std::move(*d));
  return docs;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  for (const auto& d : docs) {
    nlohmann::json j;
    j["id"] = d.id;
    j["text"] = d.raw;
    if (d.meta_first_paragraph) j["has_meta"] = true;
    out << j.dump() << '\n';
  }
  if (!out) throw Error(ErrorCode::kIoError, "write failed for " + path.string());
}

}  // namespace ilm
