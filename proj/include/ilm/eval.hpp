#pragma once

// Masked-token perplexity: only the tokens of the original masked spans are
// scored, identically across strategies; every strategy sees the same spans.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilm/corpus.hpp"
#include "ilm/decode.hpp"
#include "ilm/error.hpp"
#include "ilm/examples.hpp"
#include "ilm/masker.hpp"
#include "ilm/rng.hpp"
#include "ilm/tokenizer.hpp"

namespace ilm {

struct PplResult {
  double ppl = 0.0;
  double nll = 0.0;  // summed over target tokens
  std::size_t target_tokens = 0;
  std::uint64_t target_hash = 0;  // order-independent hash of the target multiset
};

inline std::uint64_t multiset_hash(std::vector<TokenId> ids) {
  std::sort(ids.begin(), ids.end());
  Fnv1a h;
  for (TokenId t : ids) h.update_pod(t);
  return h.digest();
}

// Neumaier compensated sum; keeps long NLL sums within an ulp or two.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    comp_ += std::abs(sum_) >= std::abs(x) ? (sum_ - t) + x : (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0, comp_ = 0.0;
};

// exp(-(sum of target log-probs) / (number of target tokens)), aggregated
// over the whole example set before exponentiating.
template <SequenceScorer M>
PplResult ppl_masked(const M& model, std::span<const InfillExample> examples) {
  PplResult r;
  CompensatedSum nll;
  std::vector<TokenId> all_targets;
  for (const auto& ex : examples) {
    if (ex.target_spans.empty()) continue;
    const std::vector<double> lp = model.score(ex.tokens);
    for (const auto& t : ex.target_spans) {
      for (auto i = t.begin; i < t.end; ++i) {
        nll.add(-lp[i]);
        all_targets.push_back(ex.tokens[i]);
      }
    }
  }
  r.nll = nll.value();
  r.target_tokens = all_targets.size();
  if (r.target_tokens == 0) throw Error(ErrorCode::kEmptyTargets, "no target tokens to score");
  r.ppl = std::exp(r.nll / static_cast<double>(r.target_tokens));
  r.target_hash = multiset_hash(std::move(all_targets));
  return r;
}

enum class EvalTaskKind { kDocument, kParagraph, kSentence, kNgram, kWord, kMixture };

inline constexpr EvalTaskKind kAllTaskKinds[] = {EvalTaskKind::kDocument, EvalTaskKind::kParagraph,
                                                 EvalTaskKind::kSentence, EvalTaskKind::kNgram,
                                                 EvalTaskKind::kWord,     EvalTaskKind::kMixture};

constexpr std::string_view task_name(EvalTaskKind k) {
  switch (k) {
    case EvalTaskKind::kDocument: return "document";
    case EvalTaskKind::kParagraph: return "paragraph";
    case EvalTaskKind::kSentence: return "sentence";
    case EvalTaskKind::kNgram: return "ngram";
    case EvalTaskKind::kWord: return "word";
    case EvalTaskKind::kMixture: return "mixture";
  }
  return "?";
}

inline std::optional<EvalTaskKind> parse_task(std::string_view s) {
  for (EvalTaskKind k : kAllTaskKinds) {
    if (task_name(k) == s) return k;
  }
  return std::nullopt;
}

constexpr EvalTaskKind task_for(Granularity g) { return static_cast<EvalTaskKind>(g); }

struct EvalTask {
  EvalTaskKind kind = EvalTaskKind::kSentence;
  std::vector<MaskedDocument> masks;  // parallel to the document list
};

// Exactly one span per document, drawn with generator stream (seed, task, doc).
inline EvalTask make_granularity_task(std::span<const Document> docs, Granularity g, std::uint64_t seed) {
  EvalTask task{task_for(g), {}};
  for (std::size_t i = 0; i < docs.size(); ++i) {
    Rng rng(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(g) + 1), i));
    task.masks.push_back(mask_from_spec(docs[i], {sample_single_span(docs[i], g, rng)}));
  }
  return task;
}

// The training mask function applied to test documents (any number of spans).
inline EvalTask make_mixture_task(std::span<const Document> docs, const MaskPolicy& policy) {
  EvalTask task{EvalTaskKind::kMixture, {}};
  for (std::size_t i = 0; i < docs.size(); ++i) task.masks.push_back(sample_mask(docs[i], policy, i));
  return task;
}

struct StrategyScore {
  Strategy strategy = Strategy::kIlm;
  double ppl = 0.0;
  double nll = 0.0;
  std::size_t target_tokens = 0;
  std::uint64_t target_hash = 0;
  std::size_t total_tokens = 0;
  double relative_length = 0.0;  // total tokens / total LM-example tokens
  std::size_t n_documents = 0;
};

struct TaskResult {
  EvalTaskKind kind = EvalTaskKind::kSentence;
  std::vector<StrategyScore> scores;  // in kAllStrategies order
  std::size_t skipped_documents = 0;  // too long for some strategy

  const StrategyScore* find(Strategy s) const {
    for (const auto& sc : scores) {
      if (sc.strategy == s) return &sc;
    }
    return nullptr;
  }
};

struct EvalReport {
  std::string corpus_name = "corpus";
  std::vector<TaskResult> tasks;

  const TaskResult* find(EvalTaskKind k) const {
    for (const auto& t : tasks) {
      if (t.kind == k) return &t;
    }
    return nullptr;
  }

  nlohmann::json to_json() const {
    nlohmann::json tj = nlohmann::json::object();
    for (const auto& t : tasks) {
      nlohmann::json sj = nlohmann::json::object();
      for (const auto& s : t.scores) {
        char ppl[32], rel[32];
        std::snprintf(ppl, sizeof ppl, "%.6f", s.ppl);
        std::snprintf(rel, sizeof rel, "%.6f", s.relative_length);
        sj[std::string(strategy_name(s.strategy))] = {
            {"ppl", std::stod(ppl)},
            {"target_tokens", s.target_tokens},
            {"target_hash", hex64(s.target_hash)},
            {"total_tokens", s.total_tokens},
            {"relative_length", std::stod(rel)},
            {"n_documents", s.n_documents}};
      }
      tj[std::string(task_name(t.kind))] = {{"strategies", sj}, {"skipped_documents", t.skipped_documents}};
    }
    return {{"corpus", corpus_name}, {"tasks", tj}};
  }

  // One block per task: rows are strategies, columns the corpus PPL and the
  // mean length relative to the plain LM sequence.
  std::string to_table() const {
    std::string out;
    char line[256];
    for (const auto& t : tasks) {
      std::string title(task_name(t.kind));
      title[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(title[0])));
      out += title + " infilling PPL\n";
      std::snprintf(line, sizeof line, "  %-8s %12s %8s\n", "", corpus_name.substr(0, 12).c_str(), "Length");
      out += line;
      for (const auto& s : t.scores) {
        std::snprintf(line, sizeof line, "  %-8s %12.3f %8.3f\n", std::string(strategy_label(s.strategy)).c_str(),
                      s.ppl, s.relative_length);
        out += line;
      }
      out += '\n';
    }
    return out;
  }
};

// Scores one task with each model in `models` (strategy -> scorer). A
// (document, mask) pair whose encoding overflows max_seq_len under any
// strategy is skipped for all strategies.
template <SequenceScorer M>
TaskResult evaluate_task(const std::map<Strategy, const M*>& models, std::span<const Document> docs,
                         const Vocab& vocab, const EvalTask& task, std::size_t max_seq_len) {
  TaskResult result{task.kind, {}, 0};
  std::map<Strategy, std::vector<InfillExample>> examples;
  std::size_t lm_tokens = 0;
  std::map<Strategy, std::size_t> totals;
  BuildOptions opts{max_seq_len, LossScope::kAll};
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const SegmentedEncoding seg = encode_segmented(docs[i], task.masks[i], vocab);
    std::map<Strategy, InfillExample> built;
    try {
      for (Strategy s : kAllStrategies) built.emplace(s, build_example(s, seg, docs[i].id, opts));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kSequenceTooLong) throw;
      ++result.skipped_documents;
      continue;
    }
    lm_tokens += built.at(Strategy::kLm).tokens.size();
    for (auto& [s, ex] : built) {
      totals[s] += ex.tokens.size();
      if (models.count(s)) examples[s].push_back(std::move(ex));
    }
  }
  for (Strategy s : kAllStrategies) {
    auto it = models.find(s);
    if (it == models.end()) continue;
    const auto& exs = examples[s];
    const PplResult p = ppl_masked(*it->second, std::span<const InfillExample>(exs));
    StrategyScore sc;
    sc.strategy = s;
    sc.ppl = p.ppl;
    sc.nll = p.nll;
    sc.target_tokens = p.target_tokens;
    sc.target_hash = p.target_hash;
    sc.total_tokens = totals[s];
    sc.relative_length = lm_tokens ? static_cast<double>(totals[s]) / static_cast<double>(lm_tokens) : 0.0;
    sc.n_documents = exs.size();
    result.scores.push_back(sc);
  }
  return result;
}

template <SequenceScorer M>
EvalReport granularity_suite(const std::map<Strategy, const M*>& models, std::span<const Document> docs,
                             const Vocab& vocab, std::uint64_t seed, std::size_t max_seq_len,
                             std::string corpus_name = "corpus") {
  EvalReport report{std::move(corpus_name), {}};
  for (Granularity g : kAllGranularities) {
    report.tasks.push_back(evaluate_task(models, docs, vocab, make_granularity_task(docs, g, seed), max_seq_len));
  }
  return report;
}

template <SequenceScorer M>
EvalReport mixture_suite(const std::map<Strategy, const M*>& models, std::span<const Document> docs,
                         const Vocab& vocab, const MaskPolicy& policy, std::size_t max_seq_len,
                         std::string corpus_name = "corpus") {
  EvalReport report{std::move(corpus_name), {}};
  report.tasks.push_back(evaluate_task(models, docs, vocab, make_mixture_task(docs, policy), max_seq_len));
  return report;
}

}  // namespace ilm
