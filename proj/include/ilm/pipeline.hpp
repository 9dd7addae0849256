#pragma once

// The end-to-end experiment: ingest -> train-vocab -> make-examples -> train
// -> eval. Every stage reads its inputs from and writes its outputs to one
// output directory, so stages can be re-run independently.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilm/checkpoint.hpp"
#include "ilm/config.hpp"
#include "ilm/corpus.hpp"
#include "ilm/eval.hpp"
#include "ilm/examples.hpp"
#include "ilm/masker.hpp"
#include "ilm/synthetic.hpp"
#include "ilm/tokenizer.hpp"
#include "ilm/train.hpp"

namespace ilm {

namespace fs = std::filesystem;

struct RunPaths {
  fs::path root;

  fs::path corpus(std::string_view split) const { return root / "corpus" / (std::string(split) + ".jsonl"); }
  fs::path vocab() const { return root / "vocab.json"; }
  fs::path dataset(Strategy s, std::string_view split) const {
    return root / "data" / (std::string(strategy_name(s)) + "." + std::string(split) + ".ilmd");
  }
  fs::path checkpoint(Strategy s) const { return root / "models" / (std::string(strategy_name(s)) + ".ckpt"); }
  fs::path train_log(Strategy s) const { return root / "models" / (std::string(strategy_name(s)) + ".log.jsonl"); }
  fs::path report_json() const { return root / "eval" / "report.json"; }
  fs::path report_txt() const { return root / "eval" / "report.txt"; }
  fs::path eval_masks(EvalTaskKind k) const { return root / "eval" / ("masks." + std::string(task_name(k)) + ".jsonl"); }
};

inline void require_artifact(const fs::path& p, std::string_view stage) {
  if (!fs::exists(p)) {
    throw Error(ErrorCode::kMissingArtifact, p.string() + " not found (run `" + std::string(stage) + "` first)");
  }
}

inline std::vector<Document> load_split(const RunPaths& paths, std::string_view split) {
  require_artifact(paths.corpus(split), "ingest");
  return load_corpus(paths.corpus(split), CorpusFormat::kJsonl);
}

// Writes the three normalized jsonl splits. Returns document counts.
inline std::map<std::string, std::size_t> ingest(const RunConfig& cfg, const RunPaths& paths) {
  fs::create_directories(paths.root / "corpus");
  std::map<std::string, std::size_t> counts;
  const std::pair<std::string_view, std::size_t> splits[] = {{"train", cfg.corpus.synthetic_train},
                                                             {"valid", cfg.corpus.synthetic_valid},
                                                             {"test", cfg.corpus.synthetic_test}};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto [split, n] = splits[i];
    std::vector<Document> docs;
    if (cfg.corpus.source == "synthetic") {
      docs = synthetic::make_corpus(n, derive_seed(cfg.seed_for(SeedStream::kSynthetic), i), std::string(split));
    } else {
      const std::string& path = i == 0 ? cfg.corpus.train : i == 1 ? cfg.corpus.valid : cfg.corpus.test;
      require_artifact(path, "corpus file");
      docs = load_corpus(path, *parse_corpus_format(cfg.corpus.format), LoadOptions{cfg.corpus.has_meta});
    }
    write_jsonl(paths.corpus(split), docs);
    counts[std::string(split)] = docs.size();
  }
  std::ofstream(paths.root / "run_config.json") << cfg.to_json().dump(2) << '\n';
  return counts;
}

inline Vocab train_vocab_stage(const RunConfig& cfg, const RunPaths& paths) {
  const auto docs = load_split(paths, "train");
  Vocab v = Vocab::train(docs, cfg.vocab_size);
  v.save(paths.vocab());
  return v;
}

inline Vocab load_run_vocab(const RunPaths& paths) {
  require_artifact(paths.vocab(), "train-vocab");
  return Vocab::load(paths.vocab());
}

// Documents whose longest (LMALL) encoding cannot fit are dropped.
inline std::vector<Document> filter_by_length(std::vector<Document> docs, const Vocab& vocab, std::size_t max_len,
                                              std::size_t* dropped = nullptr) {
  std::vector<Document> kept;
  for (auto& d : docs) {
    if (fits_lmall(d, vocab, max_len)) kept.push_back(std::move(d));
  }
  if (dropped) *dropped = docs.size() - kept.size();
  return kept;
}

struct MadeExamples {
  std::map<Strategy, std::vector<InfillExample>> train, valid;
  std::size_t skipped = 0;
};

// Masks each training document examples_per_doc times (stream doc*E + r) and
// each validation document once; every (document, mask) pair yields one
// example per strategy, or none if any strategy overflows max_seq_len.
inline MadeExamples build_examples(const RunConfig& cfg, std::span<const Document> train_docs,
                                   std::span<const Document> valid_docs, const Vocab& vocab) {
  MadeExamples out;
  const BuildOptions opts = cfg.build_options();
  auto add = [&](std::map<Strategy, std::vector<InfillExample>>& dest, const Document& doc, const MaskedDocument& m) {
    const SegmentedEncoding seg = encode_segmented(doc, m, vocab);
    std::vector<InfillExample> built;
    try {
      for (Strategy s : kAllStrategies) built.push_back(build_example(s, seg, doc.id, opts));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kSequenceTooLong) throw;
      ++out.skipped;
      return;
    }
    for (auto& ex : built) dest[ex.strategy].push_back(std::move(ex));
  };
  const MaskPolicy policy = cfg.train_policy();
  const auto per_doc = static_cast<std::uint64_t>(cfg.examples_per_doc);
  for (std::size_t i = 0; i < train_docs.size(); ++i) {
    for (std::uint64_t r = 0; r < per_doc; ++r) add(out.train, train_docs[i], sample_mask(train_docs[i], policy, i * per_doc + r));
  }
  MaskPolicy vpolicy = cfg.mask;
  vpolicy.rng_seed = cfg.seed_for(SeedStream::kValidMask);
  for (std::size_t i = 0; i < valid_docs.size(); ++i) add(out.valid, valid_docs[i], sample_mask(valid_docs[i], vpolicy, i));
  return out;
}

inline MadeExamples make_examples_stage(const RunConfig& cfg, const RunPaths& paths,
                                        const std::vector<Strategy>& strategies) {
  const Vocab vocab = load_run_vocab(paths);
  const auto max_len = static_cast<std::size_t>(cfg.model.max_seq_len);
  std::size_t dropped = 0;
  const auto train_docs = filter_by_length(load_split(paths, "train"), vocab, max_len, &dropped);
  if (train_docs.empty()) {
    throw Error(ErrorCode::kEmptyCorpus, "no training document fits max_seq_len " + std::to_string(max_len) + " (" +
                                             std::to_string(dropped) + " dropped)");
  }
  const auto valid_docs = filter_by_length(load_split(paths, "valid"), vocab, max_len);
  MadeExamples made = build_examples(cfg, train_docs, valid_docs, vocab);
  fs::create_directories(paths.root / "data");
  nlohmann::json policy = cfg.train_policy().to_json();
  policy["examples_per_doc"] = cfg.examples_per_doc;
  for (Strategy s : strategies) {
    write_dataset(paths.dataset(s, "train"), made.train[s], vocab.fingerprint(), policy);
    write_dataset(paths.dataset(s, "valid"), made.valid[s], vocab.fingerprint(), policy);
  }
  return made;
}

inline ModelConfig model_config_for(const RunConfig& cfg, const Vocab& vocab) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(vocab.size());
  mc.init_seed = cfg.seed_for(SeedStream::kModelInit);
  return mc;
}

inline TrainConfig train_config_for(const RunConfig& cfg) {
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed_for(SeedStream::kTrain);
  return tc;
}

// All strategies start from the same initialization and use the same
// training seed.
inline TrainResult train_stage(const RunConfig& cfg, const RunPaths& paths, Strategy s,
                               const TrainLogSink& sink = {}) {
  const Vocab vocab = load_run_vocab(paths);
  require_artifact(paths.dataset(s, "train"), "make-examples");
  require_artifact(paths.dataset(s, "valid"), "make-examples");
  Dataset tr{read_dataset(paths.dataset(s, "train"), vocab), vocab.fingerprint()};
  Dataset va{read_dataset(paths.dataset(s, "valid"), vocab), vocab.fingerprint()};
  Checkpoint start{Transformer<float>(model_config_for(cfg, vocab)), vocab.fingerprint(), 0, std::nullopt};
  fs::create_directories(paths.root / "models");
  std::ofstream log(paths.train_log(s), std::ios::binary);
  TrainResult result = train(std::move(start), tr, va, train_config_for(cfg), [&](const TrainLogEntry& e) {
    log << e.to_json().dump() << '\n';
    if (sink) sink(e);
  });
  save_checkpoint(paths.checkpoint(s), result.checkpoint);
  return result;
}

inline EvalReport eval_stage(const RunConfig& cfg, const RunPaths& paths) {
  const Vocab vocab = load_run_vocab(paths);
  const auto max_len = static_cast<std::size_t>(cfg.model.max_seq_len);
  const auto docs = filter_by_length(load_split(paths, "test"), vocab, max_len);
  std::map<Strategy, Transformer<float>> loaded;
  for (Strategy s : cfg.strategies) {
    require_artifact(paths.checkpoint(s), "train");
    Checkpoint ck = load_checkpoint(paths.checkpoint(s));
    if (ck.vocab_fingerprint != vocab.fingerprint()) {
      throw Error(ErrorCode::kFingerprintMismatch, paths.checkpoint(s).string() + " was trained with another vocab");
    }
    loaded.emplace(s, std::move(ck.model));
  }
  std::map<Strategy, const Transformer<float>*> models;
  for (const auto& [s, m] : loaded) models[s] = &m;

  EvalReport report{cfg.corpus.name, {}};
  fs::create_directories(paths.root / "eval");
  for (EvalTaskKind kind : cfg.eval_tasks) {
    EvalTask task;
    if (kind == EvalTaskKind::kMixture) {
      MaskPolicy p = cfg.mask;
      p.rng_seed = cfg.seed_for(SeedStream::kEvalMixture);
      task = make_mixture_task(docs, p);
    } else {
      task = make_granularity_task(docs, static_cast<Granularity>(kind), cfg.seed_for(SeedStream::kEval));
    }
    write_mask_specs(paths.eval_masks(kind), task.masks);
    report.tasks.push_back(evaluate_task(models, docs, vocab, task, max_len));
  }
  std::ofstream(paths.report_json(), std::ios::binary) << report.to_json().dump(2) << '\n';
  std::ofstream(paths.report_txt(), std::ios::binary) << report.to_table();
  return report;
}

inline EvalReport run_pipeline(const RunConfig& cfg, const RunPaths& paths, std::ostream* progress = nullptr) {
  auto note = [&](const std::string& s) {
    if (progress) *progress << s << std::endl;
  };
  ingest(cfg, paths);
  note("ingest: done");
  const Vocab v = train_vocab_stage(cfg, paths);
  note("train-vocab: " + std::to_string(v.size()) + " tokens");
  const auto made = make_examples_stage(cfg, paths, cfg.strategies);
  note("make-examples: " + std::to_string(made.train.empty() ? 0 : made.train.begin()->second.size()) +
       " train examples per strategy");
  for (Strategy s : cfg.strategies) {
    const TrainResult r = train_stage(cfg, paths, s);
    note("train " + std::string(strategy_name(s)) + ": " + std::to_string(r.steps_run) + " steps, best val ppl " +
         std::to_string(r.best_val_ppl) + " at step " + std::to_string(r.best_step));
  }
  return eval_stage(cfg, paths);
}

}  // namespace ilm
