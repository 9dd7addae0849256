#pragma once

// Infilling by generation plus substitution: encode x~ [sep], generate until
// one [answer] per blank, split on [answer], and put the i-th answer into the
// i-th blank.
//
// Inline marker grammar (request text):
//   marker := "[blank]" | "[blank:" granularity "]"
//   granularity := "word" | "ngram" | "sentence" | "paragraph" | "document"
// "[blank]" means ngram. Any "[blank" immediately followed by ']' or ':'
// starts a marker and must complete one of the two forms; other text is
// literal.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilm/corpus.hpp"
#include "ilm/decode.hpp"
#include "ilm/error.hpp"
#include "ilm/tokenizer.hpp"

namespace ilm {

struct MarkedText {
  std::vector<std::string> segments;  // blanks.size() + 1 pieces of literal text
  std::vector<Granularity> blanks;
};

inline MarkedText parse_markers(std::string_view text) {
  static constexpr std::string_view kOpen = "[blank";
  MarkedText out;
  std::string current;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, kOpen.size(), kOpen) == 0 && i + kOpen.size() < text.size() &&
        (text[i + kOpen.size()] == ']' || text[i + kOpen.size()] == ':')) {
      const std::size_t after = i + kOpen.size();
      Granularity g = Granularity::kNgram;
      std::size_t end;
      if (text[after] == ']') {
        end = after + 1;
      } else {
        const std::size_t close = text.find(']', after);
        if (close == std::string_view::npos) {
          throw Error(ErrorCode::kMarkerSyntax, "unterminated blank marker at offset " + std::to_string(i));
        }
        const auto name = text.substr(after + 1, close - after - 1);
        const auto parsed = parse_granularity(name);
        if (!parsed) {
          throw Error(ErrorCode::kMarkerSyntax, "unknown blank granularity '" + std::string(name) +
                                                    "' at offset " + std::to_string(i));
        }
        g = *parsed;
        end = close + 1;
      }
      out.segments.push_back(std::move(current));
      current.clear();
      out.blanks.push_back(g);
      i = end;
    } else {
      if (text.compare(i, kOpen.size(), kOpen) == 0 && i + kOpen.size() == text.size()) {
        throw Error(ErrorCode::kMarkerSyntax, "unterminated blank marker at offset " + std::to_string(i));
      }
      current.push_back(text[i++]);
    }
  }
  out.segments.push_back(std::move(current));
  return out;
}

// Replaces the i-th marker with fills[i], verbatim.
inline std::string substitute(std::string_view masked_text, std::span<const std::string> fills) {
  const MarkedText m = parse_markers(masked_text);
  if (m.blanks.size() != fills.size()) {
    throw Error(ErrorCode::kFillCountMismatch, std::to_string(m.blanks.size()) + " blanks but " +
                                                   std::to_string(fills.size()) + " fills");
  }
  std::string out = m.segments[0];
  for (std::size_t i = 0; i < fills.size(); ++i) {
    out += fills[i];
    out += m.segments[i + 1];
  }
  return out;
}

struct SplitAnswers {
  std::vector<std::vector<TokenId>> answers;
  std::size_t shortfall = 0;  // k - answers.size()
};

// Splits generated tokens on [answer]. Material after the k-th [answer] is
// dropped; a trailing unterminated segment is not an answer.
inline SplitAnswers split_answers(std::span<const TokenId> generated, std::size_t k) {
  SplitAnswers out;
  std::vector<TokenId> current;
  for (TokenId t : generated) {
    if (out.answers.size() == k) break;
    if (t == special_id(Special::kAnswer)) {
      out.answers.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(t);
    }
  }
  out.shortfall = k - out.answers.size();
  return out;
}

// Token-level substitution on an ILM sequence "x~ [sep] y": each blank id in
// x~ is replaced by the matching answer. Returns x's tokens.
inline std::vector<TokenId> substitute_tokens(std::span<const TokenId> ilm_tokens) {
  std::size_t sep = 0;
  while (sep < ilm_tokens.size() && ilm_tokens[sep] != special_id(Special::kSep)) ++sep;
  if (sep == ilm_tokens.size()) throw Error(ErrorCode::kShapeMismatch, "ILM sequence has no [sep]");
  std::size_t blanks = 0;
  for (std::size_t i = 0; i < sep; ++i) blanks += is_blank_id(ilm_tokens[i]) ? 1 : 0;
  const SplitAnswers split = split_answers(ilm_tokens.subspan(sep + 1), blanks);
  if (split.shortfall != 0) {
    throw Error(ErrorCode::kFillCountMismatch, std::to_string(blanks) + " blanks but " +
                                                   std::to_string(split.answers.size()) + " answers");
  }
  std::vector<TokenId> out;
  std::size_t a = 0;
  for (std::size_t i = 0; i < sep; ++i) {
    if (is_blank_id(ilm_tokens[i])) {
      out.insert(out.end(), split.answers[a].begin(), split.answers[a].end());
      ++a;
    } else {
      out.push_back(ilm_tokens[i]);
    }
  }
  return out;
}

// encode(x~) with granularity blanks, followed by [sep].
inline std::vector<TokenId> encode_infill_prefix(const Vocab& vocab, const MarkedText& m) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < m.segments.size(); ++i) {
    const auto seg = vocab.encode(m.segments[i]);
    out.insert(out.end(), seg.begin(), seg.end());
    if (i < m.blanks.size()) out.push_back(special_id(blank_for(m.blanks[i])));
  }
  out.push_back(special_id(Special::kSep));
  return out;
}

struct InfillRequest {
  std::string text_with_blanks;
  DecodeConfig decode;
  std::uint64_t seed = 0;
};

struct Fill {
  std::size_t blank_index = 0;
  Granularity granularity = Granularity::kNgram;
  std::string text;
};

struct InfillDiagnostics {
  std::size_t answers_emitted = 0;
  bool truncated = false;
  std::size_t stripped_specials = 0;
  std::size_t generated_tokens = 0;
};

struct InfillResult {
  std::string completed_text;
  std::vector<Fill> fills;
  InfillDiagnostics diagnostics;
};

// Runs the model on x~ [sep]. When generation ends before k answers the
// result carries the answers that exist, leaves later blanks as markers, and
// sets diagnostics.truncated. Special ids other than [answer]/[eos] inside an
// answer are stripped and counted.
template <NextTokenModel M>
InfillResult complete(const M& model, const Vocab& vocab, const InfillRequest& request) {
  const MarkedText marked = parse_markers(request.text_with_blanks);
  InfillResult result;
  const std::size_t k = marked.blanks.size();
  if (k == 0) {
    for (const auto& s : marked.segments) vocab.encode(s);  // rejects reserved forms
    result.completed_text = request.text_with_blanks;
    return result;
  }
  const std::vector<TokenId> prefix = encode_infill_prefix(vocab, marked);
  std::size_t answers = 0;
  const auto gen = generate(model, prefix, request.decode, request.seed,
                            [&](std::span<const TokenId> g) {
                              if (g.back() == special_id(Special::kAnswer)) ++answers;
                              return answers == k;
                            });
  result.diagnostics.generated_tokens = gen.tokens.size();
  const SplitAnswers split = split_answers(gen.tokens, k);
  result.diagnostics.answers_emitted = split.answers.size();
  result.diagnostics.truncated = split.shortfall > 0;

  std::string completed = marked.segments[0];
  for (std::size_t i = 0; i < k; ++i) {
    if (i < split.answers.size()) {
      std::vector<TokenId> clean;
      for (TokenId t : split.answers[i]) {
        if (is_special_id(t)) ++result.diagnostics.stripped_specials;
        else clean.push_back(t);
      }
      Fill f{i, marked.blanks[i], vocab.decode(clean)};
      completed += f.text;
      result.fills.push_back(std::move(f));
    } else {
      completed += "[blank:";
      completed += granularity_name(marked.blanks[i]);
      completed += ']';
    }
    completed += marked.segments[i + 1];
  }
  result.completed_text = std::move(completed);
  return result;
}

}  // namespace ilm
