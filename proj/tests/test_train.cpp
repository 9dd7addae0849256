#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ilm/masker.hpp"
#include "ilm/synthetic.hpp"
#include "ilm/train.hpp"
#include "test_util.hpp"

using namespace ilm;

namespace {

struct Toy {
  Vocab vocab;
  std::vector<InfillExample> examples;
};

// n ILM examples over synthetic stories, each a single sentence mask.
Toy toy_set(std::size_t n, std::uint64_t seed = 1) {
  const auto docs = synthetic::make_corpus(n, seed, "t");
  Toy toy{Vocab::train(docs, 400), {}};
  Rng rng(seed);
  for (const auto& d : docs) {
    const auto m = mask_from_spec(d, {sample_single_span(d, Granularity::kSentence, rng)});
    toy.examples.push_back(build_ilm(d, m, toy.vocab));
  }
  return toy;
}

ModelConfig small_config(const Vocab& v) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_ff = 64;
  c.max_seq_len = 320;
  c.vocab_size = static_cast<int>(v.size());
  c.init_seed = 2;
  return c;
}

}  // namespace

TEST(TrainConfig, Schedule) {
  TrainConfig c;
  c.lr = 1.0;
  c.warmup_steps = 10;
  c.max_steps = 110;
  c.min_lr_ratio = 0.1;
  EXPECT_DOUBLE_EQ(c.lr_at(0), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(9), 1.0);
  EXPECT_DOUBLE_EQ(c.lr_at(10), 1.0);
  EXPECT_NEAR(c.lr_at(60), 0.55, 1e-12);
  EXPECT_NEAR(c.lr_at(110), 0.1, 1e-12);
  c.batch_size = 0;
  EXPECT_ILM_ERROR(c.validate(), ErrorCode::kConfigInvalid);
}

TEST(Train, AdamWSkipsDecayOnBiasesAndGains) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = 4;
  c.d_ff = 8;
  c.vocab_size = 12;
  c.max_seq_len = 4;
  Transformer<float> m(c);
  TrainConfig tc;
  tc.weight_decay = 0.5;
  AdamW opt(tc, m.params().size());
  auto params = m.params();
  std::fill(params.begin(), params.end(), 1.0f);
  opt.step(params, std::vector<float>(params.size(), 0.0f), m.layout(), 0.1);
  for (const auto& t : m.layout().tensors()) {
    const bool decayed = params[t.offset] < 1.0f;
    const bool bias_or_gain = t.rows == 1;
    EXPECT_EQ(decayed, !bias_or_gain) << t.name;
  }
}

TEST(Train, DeterministicOver100Steps) {
  const Toy toy = toy_set(60);
  TrainConfig tc;
  tc.max_steps = 100;
  tc.batch_size = 4;
  tc.seed = 9;
  const Dataset ds{toy.examples, toy.vocab.fingerprint()};
  auto run = [&] {
    return train(Checkpoint{Transformer<float>(small_config(toy.vocab)), toy.vocab.fingerprint(), 0, {}}, ds, {}, tc);
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.checkpoint.model.params(), b.checkpoint.model.params());
  ASSERT_EQ(a.log.size(), 100u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  EXPECT_EQ(a.checkpoint.step, 100u);
}

TEST(Train, OverfitsFiftyExamples) {
  const Toy toy = toy_set(50, 3);
  TrainConfig tc;
  tc.max_steps = 400;
  tc.batch_size = 10;
  tc.warmup_steps = 20;
  tc.lr = 5e-3;
  tc.weight_decay = 0.0;
  tc.min_lr_ratio = 0.05;
  const Dataset ds{toy.examples, toy.vocab.fingerprint()};
  ModelConfig mc = small_config(toy.vocab);
  mc.d_model = 64;
  mc.d_ff = 256;
  mc.n_heads = 4;
  const auto r = train(Checkpoint{Transformer<float>(mc), toy.vocab.fingerprint(), 0, {}}, ds, {}, tc);
  double tail = 0;
  for (std::size_t i = r.log.size() - 10; i < r.log.size(); ++i) tail += r.log[i].loss;
  EXPECT_LT(tail / 10, 0.1);
  EXPECT_LT(r.log.back().loss, r.log.front().loss);
}

TEST(Train, EarlyStoppingKeepsBestParameters) {
  const Toy toy = toy_set(40, 4);
  const Toy other = toy_set(40, 5);
  // Validation on differently tokenized text cannot improve for long.
  std::vector<InfillExample> val(other.examples.begin(), other.examples.begin() + 10);
  for (auto& ex : val)
    for (auto& t : ex.tokens) t = std::min<TokenId>(t, static_cast<TokenId>(toy.vocab.size() - 1));
  TrainConfig tc;
  tc.max_steps = 400;
  tc.batch_size = 8;
  tc.eval_every = 10;
  tc.patience = 2;
  tc.lr = 1e-2;
  const auto r = train(Checkpoint{Transformer<float>(small_config(toy.vocab)), toy.vocab.fingerprint(), 0, {}},
                       {toy.examples, toy.vocab.fingerprint()}, {val, toy.vocab.fingerprint()}, tc);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : r.log)
    if (e.val_ppl) best = std::min(best, *e.val_ppl);
  EXPECT_EQ(r.best_val_ppl, best);
  EXPECT_NEAR(target_perplexity(r.checkpoint.model, val), best, 1e-9 * best);
  if (r.early_stopped) {
    EXPECT_LT(r.steps_run, tc.max_steps);
  }
  EXPECT_EQ(r.checkpoint.step, static_cast<std::uint64_t>(r.best_step));
}

TEST(Train, RejectsMismatchedFingerprint) {
  const Toy toy = toy_set(10);
  TrainConfig tc;
  tc.max_steps = 1;
  EXPECT_ILM_ERROR(train(Checkpoint{Transformer<float>(small_config(toy.vocab)), "other", 0, {}},
                         {toy.examples, toy.vocab.fingerprint()}, {}, tc),
                   ErrorCode::kFingerprintMismatch);
  EXPECT_ILM_ERROR(train(Checkpoint{Transformer<float>(small_config(toy.vocab)), toy.vocab.fingerprint(), 0, {}},
                         {{}, toy.vocab.fingerprint()}, {}, tc),
                   ErrorCode::kEmptyCorpus);
}

TEST(Train, NonFiniteLossAborts) {
  const Toy toy = toy_set(10);
  Transformer<float> m(small_config(toy.vocab));
  m.params()[m.layout().find("head.w").offset] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig tc;
  tc.max_steps = 3;
  EXPECT_ILM_ERROR(train(Checkpoint{m, toy.vocab.fingerprint(), 0, {}}, {toy.examples, toy.vocab.fingerprint()}, {}, tc),
                   ErrorCode::kNonFiniteLoss);
}

TEST(Train, TargetsOnlyScopeIgnoresOtherPositions) {
  const Toy toy = toy_set(4);
  const auto& ex = toy.examples[0];
  const auto m = effective_loss_mask(ex, LossScope::kTargetsOnly);
  std::size_t ones = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    bool in = false;
    for (const auto& t : ex.target_spans) in |= t.begin <= i && i < t.end;
    EXPECT_EQ(m[i], in ? 1 : 0);
    ones += m[i];
  }
  EXPECT_GT(ones, 0u);
  EXPECT_EQ(effective_loss_mask(ex, LossScope::kAll), ex.loss_mask);

  // A batch whose non-target tokens differ gets the same targets-only update.
  TrainConfig tc;
  tc.loss_scope = LossScope::kTargetsOnly;
  InfillExample changed = ex;
  for (std::size_t i = ex.target_spans.back().end; i < changed.tokens.size(); ++i) changed.tokens[i] = 20;
  Transformer<float> a(small_config(toy.vocab)), b = a;
  AdamW oa(tc, a.params().size()), ob(tc, b.params().size());
  std::vector<float> ga(a.params().size()), gb(b.params().size());
  const InfillExample* ba[] = {&ex};
  const InfillExample* bb[] = {&changed};
  EXPECT_EQ(train_step(a, oa, ba, tc, 0, ga), train_step(b, ob, bb, tc, 0, gb));
  EXPECT_EQ(ga, gb);
}
