#include <gtest/gtest.h>

#include <set>

#include "ilm/rng.hpp"
#include "ilm/synthetic.hpp"
#include "ilm/tokenizer.hpp"
#include "test_util.hpp"

using namespace ilm;

namespace {

Vocab toy_vocab(std::size_t size) {
  const std::string_view texts[] = {"aaab", "aab"};
  return Vocab::train_texts(texts, size);
}

const Vocab& story_vocab() {
  static const Vocab v = Vocab::train(synthetic::make_corpus(200, 5, "v"), 400);
  return v;
}

}  // namespace

// Hand trace on {"aaab", "aab"} (a=106, b=107):
//   counts aa:3 ab:2              -> merge aa   = 265
//   aa|a:1 a|b:1 aa|b:1, tie      -> merge ab   = 266 (smallest pair 106,107)
//   aa|ab:1 aa|b:1, tie           -> merge aab  = 267 (265,107 < 265,266)
//   aa|ab:1                       -> merge aaab = 268
TEST(Tokenizer, HandTracedMerges) {
  const Vocab v = toy_vocab(269);
  EXPECT_FALSE(v.short_of_target());
  ASSERT_EQ(v.num_merges(), 4u);
  EXPECT_EQ(v.piece(265), "aa");
  EXPECT_EQ(v.piece(266), "ab");
  EXPECT_EQ(v.piece(267), "aab");
  EXPECT_EQ(v.piece(268), "aaab");
  EXPECT_EQ(v.merges()[0], std::make_pair(TokenId{106}, TokenId{106}));
  EXPECT_EQ(v.encode("aaab"), std::vector<TokenId>{268});
  EXPECT_EQ(v.encode("aab"), std::vector<TokenId>{267});
  EXPECT_EQ(v.encode("aaaa"), (std::vector<TokenId>{265, 265}));
}

TEST(Tokenizer, FirstMergeIsAa) {
  const Vocab v = toy_vocab(266);
  ASSERT_EQ(v.num_merges(), 1u);
  EXPECT_TRUE(v.has_piece("aa"));
  EXPECT_EQ(v.size(), 266u);
}

TEST(Tokenizer, ShortOfTargetReturnsAchievableVocab) {
  const Vocab v = toy_vocab(300);
  EXPECT_TRUE(v.short_of_target());
  EXPECT_EQ(v.num_merges(), 4u);
  EXPECT_EQ(v.fingerprint(), toy_vocab(269).fingerprint());
}

TEST(Tokenizer, TargetBelowFloor) {
  EXPECT_ILM_ERROR(toy_vocab(264), ErrorCode::kCorpusTooSmall);
  EXPECT_ILM_ERROR(toy_vocab(0), ErrorCode::kCorpusTooSmall);
  EXPECT_EQ(toy_vocab(265).num_merges(), 0u);
}

TEST(Tokenizer, EmptyEncodesToEmpty) {
  EXPECT_TRUE(story_vocab().encode("").empty());
  EXPECT_TRUE(Vocab().encode("").empty());
}

TEST(Tokenizer, SpecialIdsDistinctFromSubwords) {
  const Vocab& v = story_vocab();
  std::set<std::string> pieces;
  for (TokenId id = 0; id < kNumSpecials; ++id) {
    EXPECT_TRUE(is_special_id(id));
    EXPECT_EQ(v.piece(id), kSpecialSurface[id]);
    pieces.insert(v.piece(id));
  }
  EXPECT_EQ(pieces.size(), kNumSpecials);
  for (TokenId id = kNumSpecials; id < v.size(); ++id) EXPECT_FALSE(is_special_id(id));
  for (Granularity g : kAllGranularities) EXPECT_TRUE(is_blank_id(special_id(blank_for(g))));
  EXPECT_FALSE(is_blank_id(special_id(Special::kAnswer)));
}

TEST(Tokenizer, Roundtrip) {
  const Vocab& v = story_vocab();
  const std::string s = "She ate leftover pasta for lunch.";
  const auto ids = v.encode(s);
  EXPECT_GE(ids.size(), 1u);
  EXPECT_EQ(v.decode(ids), s);
  for (TokenId id : ids) EXPECT_FALSE(is_special_id(id));
}

TEST(Tokenizer, LongWordSplitsIntoSeveralTokens) {
  EXPECT_GT(story_vocab().encode("antidisestablishment").size(), 1u);
}

TEST(Tokenizer, RoundtripOnRandomBytes) {
  const Vocab& v = story_vocab();
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    std::string s;
    const auto n = rng.uniform_int(0, 40);
    for (int i = 0; i < n; ++i) s.push_back(static_cast<char>(rng.uniform_int(1, 255)));
    if (s.find("[") != std::string::npos) continue;  // avoid accidental special forms
    EXPECT_EQ(v.decode(v.encode(s)), s);
  }
}

TEST(Tokenizer, RejectsSpecialSurfaceForms) {
  EXPECT_ILM_ERROR(story_vocab().encode("before [sep] after"), ErrorCode::kUnknownSpecialInText);
  EXPECT_ILM_ERROR(story_vocab().encode("[blank word]"), ErrorCode::kUnknownSpecialInText);
  EXPECT_NO_THROW(story_vocab().encode("[blank] is only a marker"));
}

TEST(Tokenizer, PrefixStabilityAtWhitespaceBoundary) {
  const Vocab& v = story_vocab();
  const auto docs = synthetic::make_corpus(30, 9, "p");
  for (const auto& d : docs) {
    for (std::size_t cut = 1; cut < d.raw.size(); ++cut) {
      const bool boundary = d.raw[cut] == ' ' && d.raw[cut - 1] != ' ' && d.raw[cut - 1] != '\n';
      if (!boundary) continue;
      auto joined = v.encode(d.raw.substr(0, cut));
      const auto tail = v.encode(d.raw.substr(cut));
      joined.insert(joined.end(), tail.begin(), tail.end());
      EXPECT_EQ(v.encode(d.raw), joined) << d.raw << " @" << cut;
    }
  }
}

TEST(Tokenizer, PretokenizeChunks) {
  const auto chunks = pretokenize("Tom's 42 cats,  ok ");
  const std::vector<std::string_view> expected{"Tom's", " 42", " cats", ",", "  ok", " "};
  EXPECT_EQ(chunks, expected);
}

TEST(Tokenizer, SaveLoadAndFingerprint) {
  testutil::TempDir dir;
  const Vocab& v = story_vocab();
  v.save(dir / "v.json");
  const Vocab back = Vocab::load(dir / "v.json");
  EXPECT_EQ(back.fingerprint(), v.fingerprint());
  EXPECT_EQ(back.merges(), v.merges());
  EXPECT_EQ(back.encode("Mara went home."), v.encode("Mara went home."));

  const Vocab other = Vocab::train(synthetic::make_corpus(200, 5, "v"), 401);
  EXPECT_NE(other.fingerprint(), v.fingerprint());
  EXPECT_EQ(Vocab::train(synthetic::make_corpus(200, 5, "v"), 400).fingerprint(), v.fingerprint());

  auto j = v.to_json();
  j["merges"][0][1] = j["merges"][0][1].get<int>() + 1;
  EXPECT_ILM_ERROR(Vocab::from_json(j), ErrorCode::kFingerprintMismatch);
  j.erase("fingerprint");
  EXPECT_NE(Vocab::from_json(j).fingerprint(), v.fingerprint());
}
