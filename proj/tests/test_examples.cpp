#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "ilm/examples.hpp"
#include "ilm/infill.hpp"
#include "ilm/masker.hpp"
#include "ilm/synthetic.hpp"
#include "test_util.hpp"

using namespace ilm;

namespace {

const std::vector<Document>& stories() {
  static const auto docs = synthetic::make_corpus(300, 31, "e");
  return docs;
}

const Vocab& vocab() {
  static const Vocab v = Vocab::train(stories(), 420);
  return v;
}

std::string render_tokens(const std::vector<TokenId>& ids) {
  std::string out;
  bool after_special = false;
  for (TokenId t : ids) {
    const std::string piece = vocab().piece(t);
    if (is_special_id(t)) {
      if (!out.empty() && out.back() != ' ') out += ' ';
      out += piece;
      after_special = true;
    } else {
      if (after_special && !piece.starts_with(' ')) out += ' ';
      out += piece;
      after_special = false;
    }
  }
  return out;
}

std::size_t count_special(const std::vector<TokenId>& ids) {
  return static_cast<std::size_t>(std::count_if(ids.begin(), ids.end(), [](TokenId t) { return is_special_id(t); }));
}

MaskedDocument fig1_mask(const Document& doc) {
  const auto w = nodes_at(doc, Granularity::kWord);
  return mask_from_spec(doc, {{{w[2]->span.begin, w[3]->span.end}, Granularity::kNgram}});
}

}  // namespace

TEST(Examples, IlmRendering) {
  const Document doc = parse_document("She ate leftover pasta for lunch.", "f1");
  const auto ex = build_ilm(doc, fig1_mask(doc), vocab());
  EXPECT_EQ(render_tokens(ex.tokens), "She ate [blank ngram] for lunch. [sep] leftover pasta [answer]");
  ASSERT_EQ(ex.target_spans.size(), 1u);
  EXPECT_EQ(vocab().decode(target_tokens(ex)), "leftover pasta");
  EXPECT_EQ(ex.k, 1u);
  EXPECT_EQ(std::count(ex.loss_mask.begin(), ex.loss_mask.end(), 1), static_cast<long>(ex.tokens.size()));
}

TEST(Examples, IlmNoSpans) {
  const Document& doc = stories()[0];
  const auto ex = build_ilm(doc, mask_from_spec(doc, {}), vocab());
  auto expected = vocab().encode(doc.raw);
  expected.push_back(special_id(Special::kSep));
  EXPECT_EQ(ex.tokens, expected);
  EXPECT_TRUE(ex.target_spans.empty());
}

TEST(Examples, OverheadIsTwoKPlusOne) {
  const Document& doc = stories()[1];
  const auto sents = nodes_at(doc, Granularity::kSentence);
  const auto m = mask_from_spec(doc, {{sents[1]->span, Granularity::kSentence}, {sents[4]->span, Granularity::kSentence}});
  const auto seg = encode_segmented(doc, m, vocab());
  const auto ex = build_ilm(seg, doc.id);
  EXPECT_EQ(ex.tokens.size() - seg.x_length(), 5u);
  EXPECT_EQ(count_special(ex.tokens), 5u);
}

TEST(Examples, LmTargetsAreSentenceTokens) {
  const Document& doc = stories()[2];
  const auto sents = nodes_at(doc, Granularity::kSentence);
  const auto m = mask_from_spec(doc, {{sents[3]->span, Granularity::kSentence}});
  const auto ex = build_lm(doc, m, vocab());
  auto x = vocab().encode(doc.raw);
  x.push_back(special_id(Special::kEos));
  EXPECT_EQ(ex.tokens, x);
  ASSERT_EQ(ex.target_spans.size(), 1u);
  EXPECT_EQ(vocab().decode(target_tokens(ex)), doc.text(sents[3]->span));
  // Context before the target is the title plus sentences 1-2.
  const std::vector<TokenId> before(ex.tokens.begin(), ex.tokens.begin() + ex.target_spans[0].begin);
  EXPECT_EQ(vocab().decode(before), doc.raw.substr(0, sents[3]->span.begin));

  const auto empty = build_lm(doc, mask_from_spec(doc, {}), vocab());
  EXPECT_TRUE(empty.target_spans.empty());
  EXPECT_EQ(empty.tokens, x);
}

TEST(Examples, LmRevReversesTokens) {
  const TokenId a = 300, b = 301, c = 302;
  SegmentedEncoding seg{{{a}, {c}}, {{b}}, {Granularity::kWord}};
  const auto ex = build_lmrev(seg, "abc");
  EXPECT_EQ(ex.tokens, (std::vector<TokenId>{c, b, a, special_id(Special::kEos)}));
  ASSERT_EQ(ex.target_spans.size(), 1u);
  EXPECT_EQ(ex.target_spans[0], (TokenRange{1, 2}));

  const Document& doc = stories()[3];
  const auto full = build_lmrev(doc, mask_from_spec(doc, {{{0, doc.raw.size()}, Granularity::kDocument}}), vocab());
  ASSERT_EQ(full.target_spans.size(), 1u);
  EXPECT_EQ(full.target_spans[0], (TokenRange{0, static_cast<std::uint32_t>(full.tokens.size() - 1)}));
}

TEST(Examples, LmAllLayout) {
  const Document& doc = stories()[4];
  const auto x = vocab().encode(doc.raw);
  const auto k0 = build_lmall(doc, mask_from_spec(doc, {}), vocab());
  std::vector<TokenId> expected = x;
  expected.push_back(special_id(Special::kSep));
  expected.insert(expected.end(), x.begin(), x.end());
  expected.push_back(special_id(Special::kEos));
  EXPECT_EQ(k0.tokens, expected);

  const Document fig = parse_document("She ate leftover pasta for lunch.", "f1");
  const auto ex = build_lmall(fig, fig1_mask(fig), vocab());
  EXPECT_EQ(render_tokens(ex.tokens),
            "She ate [blank ngram] for lunch. [sep] She ate leftover pasta for lunch. [eos]");
  EXPECT_EQ(vocab().decode(target_tokens(ex)), "leftover pasta");
  EXPECT_GT(ex.target_spans[0].begin, 0u);
}

TEST(Examples, SequenceTooLong) {
  const Document& doc = stories()[5];
  BuildOptions opts;
  opts.max_seq_len = 10;
  EXPECT_ILM_ERROR(build_lm(doc, mask_from_spec(doc, {}), vocab(), opts), ErrorCode::kSequenceTooLong);
}

TEST(Examples, TargetsOnlyLossMask) {
  const Document fig = parse_document("She ate leftover pasta for lunch.", "f1");
  BuildOptions opts;
  opts.loss_scope = LossScope::kTargetsOnly;
  for (Strategy s : kAllStrategies) {
    const auto ex = build_example(s, fig, fig1_mask(fig), vocab(), opts);
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      const bool in_target = std::any_of(ex.target_spans.begin(), ex.target_spans.end(),
                                         [&](const TokenRange& r) { return r.begin <= i && i < r.end; });
      EXPECT_EQ(ex.loss_mask[i], in_target ? 1 : 0);
    }
  }
}

// Properties quantified over many sampled masks.
TEST(Examples, PropertiesOverSampledMasks) {
  MaskPolicy pol;
  pol.rng_seed = 4;
  pol.subtree_prob = 0.06;
  BuildOptions wide;
  wide.max_seq_len = 1024;
  for (std::size_t i = 0; i < stories().size(); ++i) {
    const Document& doc = stories()[i];
    for (std::uint64_t r = 0; r < 4; ++r) {
      const auto m = sample_mask(doc, pol, i * 4 + r);
      const auto seg = encode_segmented(doc, m, vocab());
      std::map<Strategy, InfillExample> ex;
      for (Strategy s : kAllStrategies) ex[s] = build_example(s, seg, doc.id, wide);

      const auto& ilm = ex[Strategy::kIlm];
      ASSERT_EQ(ilm.tokens.size(), seg.x_length() + 2 * m.k() + 1);
      ASSERT_EQ(count_special(ilm.tokens), 2 * m.k() + 1);
      const auto n_answer = std::count(ilm.tokens.begin(), ilm.tokens.end(), special_id(Special::kAnswer));
      const auto n_blank = std::count_if(ilm.tokens.begin(), ilm.tokens.end(), is_blank_id);
      ASSERT_EQ(static_cast<std::size_t>(n_answer), m.k());
      ASSERT_EQ(static_cast<std::size_t>(n_blank), m.k());
      ASSERT_EQ(vocab().decode(substitute_tokens(ilm.tokens)), doc.raw);

      // i-th answer belongs to the i-th blank.
      for (std::size_t a = 0; a < m.k(); ++a) {
        const auto& t = ilm.target_spans[a];
        ASSERT_EQ(vocab().decode(std::vector<TokenId>(ilm.tokens.begin() + t.begin, ilm.tokens.begin() + t.end)),
                  m.spans[a].answer);
      }

      auto reference = target_tokens(ilm);
      std::sort(reference.begin(), reference.end());
      for (const auto& [s, e] : ex) {
        for (const auto& t : e.target_spans) {
          for (std::uint32_t p = t.begin; p < t.end; ++p) ASSERT_FALSE(is_special_id(e.tokens[p]));
        }
        auto tt = target_tokens(e);
        std::sort(tt.begin(), tt.end());
        ASSERT_EQ(tt, reference) << strategy_name(s);
        ASSERT_EQ(e.k, m.k());
      }
      ASSERT_EQ(ex[Strategy::kLm].tokens.size(), ex[Strategy::kLmRev].tokens.size());
    }
  }
}

TEST(Examples, DatasetRoundtrip) {
  testutil::TempDir dir;
  MaskPolicy pol;
  pol.rng_seed = 8;
  std::vector<InfillExample> all;
  for (std::size_t i = 0; all.size() < 1000; ++i) {
    const Document& doc = stories()[i % stories().size()];
    const Strategy s = kAllStrategies[i % 4];
    BuildOptions opts;
    opts.max_seq_len = 1024;
    opts.loss_scope = i % 3 == 0 ? LossScope::kTargetsOnly : LossScope::kAll;
    all.push_back(build_example(s, doc, sample_mask(doc, pol, i), vocab(), opts));
  }
  const auto manifest = write_dataset(dir / "d.ilmd", all, vocab().fingerprint(), pol.to_json());
  EXPECT_EQ(manifest.count, 1000u);
  EXPECT_EQ(manifest.counts_per_strategy.at("ilm"), 250u);
  const auto mj = nlohmann::json::parse(testutil::read_file(manifest_path(dir / "d.ilmd")));
  EXPECT_EQ(mj["count"], 1000);
  EXPECT_EQ(mj["vocab_fingerprint"], vocab().fingerprint());

  EXPECT_EQ(read_dataset(dir / "d.ilmd", vocab()), all);

  const Vocab other = Vocab::train(stories(), 300);
  EXPECT_ILM_ERROR(read_dataset(dir / "d.ilmd", other), ErrorCode::kFingerprintMismatch);

  testutil::write_file(dir / "junk.ilmd", "nope");
  EXPECT_ILM_ERROR(read_dataset(dir / "junk.ilmd"), ErrorCode::kMalformedRecord);
  EXPECT_ILM_ERROR(read_dataset(dir / "missing.ilmd"), ErrorCode::kIoError);
}

TEST(Examples, FitsLmAllIsConservative) {
  MaskPolicy pol;
  pol.subtree_prob = 0.1;
  for (std::size_t i = 0; i < 100; ++i) {
    const Document& doc = stories()[i];
    const std::size_t limit = 2 * vocab().encode(doc.raw).size() + 2;
    ASSERT_TRUE(fits_lmall(doc, vocab(), limit));
    ASSERT_FALSE(fits_lmall(doc, vocab(), limit - 1));
  }
}
