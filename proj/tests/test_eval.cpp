#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "ilm/eval.hpp"
#include "ilm/synthetic.hpp"
#include "test_util.hpp"

using namespace ilm;

namespace {

const std::vector<Document>& docs() {
  static const auto d = synthetic::make_corpus(60, 77, "ev");
  return d;
}

const Vocab& vocab() {
  static const Vocab v = Vocab::train(docs(), 380);
  return v;
}

// Context-free scorer: log-prob depends only on the token id.
struct TableScorer {
  std::map<TokenId, double> prob;
  double fallback = 0.01;
  std::vector<double> score(std::span<const TokenId> tokens) const {
    std::vector<double> out;
    for (TokenId t : tokens) {
      auto it = prob.find(t);
      out.push_back(std::log(it == prob.end() ? fallback : it->second));
    }
    return out;
  }
};

struct UniformScorer {
  std::size_t v;
  std::vector<double> score(std::span<const TokenId> tokens) const {
    return std::vector<double>(tokens.size(), -std::log(static_cast<double>(v)));
  }
};

InfillExample manual(std::vector<TokenId> tokens, std::vector<TokenRange> targets) {
  InfillExample ex;
  ex.loss_mask.assign(tokens.size(), 1);
  ex.tokens = std::move(tokens);
  ex.target_spans = std::move(targets);
  ex.k = static_cast<std::uint32_t>(ex.target_spans.size());
  return ex;
}

template <typename M>
std::map<Strategy, const M*> all_models(const M& m) {
  std::map<Strategy, const M*> out;
  for (Strategy s : kAllStrategies) out[s] = &m;
  return out;
}

}  // namespace

TEST(Perplexity, HandComputedExample) {
  // Target probabilities 0.5, 0.25, 0.25: PPL = (1/32)^(-1/3) = cbrt(32).
  const TableScorer m{{{10, 0.5}, {11, 0.25}, {12, 0.25}, {20, 0.9}}};
  const std::vector<InfillExample> exs{manual({20, 10, 11, 20, 12, 20}, {{1, 3}, {4, 5}})};
  const auto r = ppl_masked(m, exs);
  EXPECT_EQ(r.target_tokens, 3u);
  EXPECT_NEAR(r.ppl, std::cbrt(32.0), 1e-12);
  EXPECT_NEAR(r.ppl, 3.1748, 5e-5);
  EXPECT_NEAR(r.nll, -(std::log(0.5) + 2 * std::log(0.25)), 1e-12);
}

TEST(Perplexity, AggregatesBeforeExponentiating) {
  const TableScorer m{{{10, 0.5}, {11, 0.125}}};
  const std::vector<InfillExample> exs{manual({10}, {{0, 1}}), manual({11, 11, 11}, {{0, 3}})};
  // Corpus-level: exp(-(ln .5 + 3 ln .125) / 4) = 2^(10/4); a mean of per-example PPLs would be 5.
  EXPECT_NEAR(ppl_masked(m, exs).ppl, std::pow(2.0, 2.5), 1e-12);
}

TEST(Perplexity, UniformModelGivesVocabSize) {
  for (std::size_t v : {11u, 265u, 1000u}) {
    const UniformScorer m{v};
    const std::vector<InfillExample> exs{manual({9, 10, 11, 12}, {{0, 2}}), manual({1, 2, 3}, {{1, 3}})};
    const double ppl = ppl_masked(m, exs).ppl;
    EXPECT_NEAR(ppl, static_cast<double>(v), 4 * std::numeric_limits<double>::epsilon() * v);
  }
}

TEST(Perplexity, UniformModelStaysExactOverManyTargets) {
  const UniformScorer m{420};
  std::vector<TokenId> ids(50000, 9);
  const std::vector<InfillExample> exs(4, manual(ids, {{0, 50000}}));
  const double ppl = ppl_masked(m, exs).ppl;
  EXPECT_NEAR(ppl, 420.0, 4 * std::numeric_limits<double>::epsilon() * 420.0);
}

TEST(Perplexity, NonTargetTokensDoNotMatter) {
  const TableScorer m{{{10, 0.5}, {11, 0.25}}};
  const std::vector<InfillExample> a{manual({10, 11}, {{0, 2}})};
  const std::vector<InfillExample> b{manual({special_id(Special::kBlankWord), 10, 11, special_id(Special::kAnswer),
                                             special_id(Special::kSep), 40},
                                            {{1, 3}})};
  EXPECT_EQ(ppl_masked(m, a).ppl, ppl_masked(m, b).ppl);
  EXPECT_EQ(ppl_masked(m, a).target_hash, ppl_masked(m, b).target_hash);
}

TEST(Perplexity, ShuffleInvariance) {
  const TableScorer m{{{10, 0.5}, {11, 0.25}, {12, 0.3}, {13, 0.01}}};
  std::vector<InfillExample> exs;
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    std::vector<TokenId> t(static_cast<std::size_t>(rng.uniform_int(2, 9)));
    for (auto& x : t) x = static_cast<TokenId>(rng.uniform_int(10, 13));
    const auto b = static_cast<std::uint32_t>(rng.uniform_int(0, static_cast<std::int64_t>(t.size()) - 1));
    exs.push_back(manual(t, {{b, static_cast<std::uint32_t>(t.size())}}));
  }
  const auto base = ppl_masked(m, exs);
  for (int r = 0; r < 5; ++r) {
    rng.shuffle(exs);
    const auto s = ppl_masked(m, exs);
    EXPECT_NEAR(s.ppl, base.ppl, 1e-12 * base.ppl);
    EXPECT_EQ(s.target_hash, base.target_hash);
    EXPECT_EQ(s.target_tokens, base.target_tokens);
  }
}

TEST(Perplexity, EmptyTargetsRejected) {
  const UniformScorer m{20};
  const std::vector<InfillExample> exs{manual({9, 10}, {})};
  EXPECT_ILM_ERROR(ppl_masked(m, exs), ErrorCode::kEmptyTargets);
}

TEST(Evaluate, StrategiesScoreTheSameTargets) {
  const UniformScorer m{vocab().size()};
  MaskPolicy pol;
  pol.rng_seed = 5;
  pol.subtree_prob = 0.1;
  for (const auto& task : {make_granularity_task(docs(), Granularity::kSentence, 1),
                           make_granularity_task(docs(), Granularity::kWord, 1), make_mixture_task(docs(), pol)}) {
    const auto r = evaluate_task(all_models(m), docs(), vocab(), task, 1024);
    ASSERT_EQ(r.scores.size(), 4u);
    for (const auto& s : r.scores) {
      EXPECT_EQ(s.target_tokens, r.scores[0].target_tokens);
      EXPECT_EQ(s.target_hash, r.scores[0].target_hash);
      EXPECT_NEAR(s.ppl, static_cast<double>(vocab().size()), 1e-9);
    }
  }
}

TEST(Evaluate, RelativeLengthsMatchLayouts) {
  const UniformScorer m{vocab().size()};
  const auto task = make_granularity_task(docs(), Granularity::kSentence, 2);
  // Independent count from the segmented encoding.
  double x = 0, spans = 0, n = 0;
  for (std::size_t i = 0; i < docs().size(); ++i) {
    const auto seg = encode_segmented(docs()[i], task.masks[i], vocab());
    x += static_cast<double>(seg.x_length());
    spans += static_cast<double>(seg.spans[0].size());
    n += 1;
  }
  const auto r = evaluate_task(all_models(m), docs(), vocab(), task, 1024);
  EXPECT_EQ(r.skipped_documents, 0u);
  EXPECT_EQ(r.find(Strategy::kLm)->relative_length, 1.0);
  EXPECT_EQ(r.find(Strategy::kLmRev)->relative_length, 1.0);
  EXPECT_NEAR(r.find(Strategy::kIlm)->relative_length, (x + 3 * n) / (x + n), 1e-12);
  EXPECT_NEAR(r.find(Strategy::kLmAll)->relative_length, (2 * x - spans + 3 * n) / (x + n), 1e-12);
}

TEST(Evaluate, OverlongDocumentsAreSkippedForAllStrategies) {
  const UniformScorer m{vocab().size()};
  const auto task = make_granularity_task(docs(), Granularity::kWord, 3);
  std::size_t fit = 0;
  for (const auto& d : docs()) fit += fits_lmall(d, vocab(), 200) ? 1 : 0;
  ASSERT_GT(fit, 0u);
  ASSERT_LT(fit, docs().size());
  const auto r = evaluate_task(all_models(m), docs(), vocab(), task, 200);
  EXPECT_GT(r.skipped_documents, 0u);
  for (const auto& s : r.scores) EXPECT_EQ(s.n_documents + r.skipped_documents, docs().size());
}

TEST(Evaluate, FullSubtreeProbabilityMixtureEqualsDocumentTask) {
  MaskPolicy pol;
  pol.subtree_prob = 1.0;
  pol.rng_seed = 9;
  const auto mix = make_mixture_task(docs(), pol);
  const auto doc = make_granularity_task(docs(), Granularity::kDocument, 4);
  ASSERT_EQ(mix.masks.size(), doc.masks.size());
  for (std::size_t i = 0; i < mix.masks.size(); ++i) {
    ASSERT_EQ(mix.masks[i].spans.size(), 1u);
    EXPECT_EQ(mix.masks[i].spans[0].span, doc.masks[i].spans[0].span);
    EXPECT_EQ(mix.masks[i].spans[0].granularity, Granularity::kDocument);
  }
  const UniformScorer m{vocab().size()};
  const auto a = evaluate_task(all_models(m), docs(), vocab(), mix, 1024);
  const auto b = evaluate_task(all_models(m), docs(), vocab(), doc, 1024);
  for (std::size_t s = 0; s < 4; ++s) {
    EXPECT_EQ(a.scores[s].ppl, b.scores[s].ppl);
    EXPECT_EQ(a.scores[s].target_hash, b.scores[s].target_hash);
  }
}

TEST(Evaluate, GranularityTasksHaveOneSpanPerDocument) {
  for (Granularity g : kAllGranularities) {
    const auto t = make_granularity_task(docs(), g, 6);
    EXPECT_EQ(t.kind, task_for(g));
    for (const auto& m : t.masks) {
      ASSERT_EQ(m.spans.size(), 1u);
      EXPECT_EQ(m.spans[0].granularity, g);
    }
    const auto again = make_granularity_task(docs(), g, 6);
    for (std::size_t i = 0; i < t.masks.size(); ++i) EXPECT_EQ(t.masks[i].spans, again.masks[i].spans);
  }
}

TEST(Report, TableAndJsonStructure) {
  const UniformScorer m{vocab().size()};
  auto report = granularity_suite(all_models(m), docs(), vocab(), 1, 1024, "synthetic");
  MaskPolicy pol;
  const auto mix = mixture_suite(all_models(m), docs(), vocab(), pol, 1024, "synthetic");
  report.tasks.insert(report.tasks.end(), mix.tasks.begin(), mix.tasks.end());
  ASSERT_EQ(report.tasks.size(), 6u);

  const std::string table = report.to_table();
  for (const char* title : {"Document infilling PPL", "Paragraph infilling PPL", "Sentence infilling PPL",
                            "Ngram infilling PPL", "Word infilling PPL", "Mixture infilling PPL"}) {
    EXPECT_NE(table.find(title), std::string::npos) << title;
  }
  std::size_t rows = 0;
  for (std::size_t p = 0; (p = table.find("\n  LM ", p)) != std::string::npos; ++p) ++rows;
  EXPECT_EQ(rows, 6u);
  for (const char* label : {"  LMrev ", "  LMall ", "  ILM "}) {
    std::size_t c = 0;
    for (std::size_t p = 0; (p = table.find(label, p)) != std::string::npos; ++p) ++c;
    EXPECT_EQ(c, 6u) << label;
  }

  const auto j = report.to_json();
  EXPECT_EQ(j["corpus"], "synthetic");
  for (EvalTaskKind k : kAllTaskKinds) {
    const auto& t = j["tasks"][std::string(task_name(k))];
    for (Strategy s : kAllStrategies) {
      const auto& e = t["strategies"][std::string(strategy_name(s))];
      EXPECT_TRUE(e.contains("ppl"));
      EXPECT_TRUE(e.contains("relative_length"));
    }
  }
  EXPECT_EQ(report.to_json().dump(), j.dump());
}
