#pragma once

// RunConfig: one versioned JSON document governing a whole experiment.
// Every section rejects unknown keys. Component seeds are derived from the
// single top-level seed.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilm/corpus.hpp"
#include "ilm/decode.hpp"
#include "ilm/error.hpp"
#include "ilm/eval.hpp"
#include "ilm/examples.hpp"
#include "ilm/masker.hpp"
#include "ilm/model.hpp"
#include "ilm/rng.hpp"
#include "ilm/train.hpp"

namespace ilm {

enum class SeedStream : std::uint64_t {
  kSynthetic = 1,
  kMask = 2,
  kValidMask = 3,
  kModelInit = 4,
  kTrain = 5,
  kEval = 6,
  kEvalMixture = 7,
};

struct CorpusConfig {
  std::string name = "synthetic";
  std::string source = "synthetic";  // "synthetic" | "files"
  std::string format = "jsonl";
  bool has_meta = false;
  std::string train, valid, test;     // paths when source == "files"
  std::size_t synthetic_train = 500;  // document counts when synthetic
  std::size_t synthetic_valid = 50;
  std::size_t synthetic_test = 100;
};

struct RunConfig {
  static constexpr int kVersion = 1;

  std::uint64_t seed = 0;
  CorpusConfig corpus;
  MaskPolicy mask;  // rng_seed is derived, not read
  int examples_per_doc = 3;
  std::size_t vocab_size = 512;
  ModelConfig model;  // vocab_size and init_seed are filled in at train time
  TrainConfig train;  // seed is derived
  std::vector<EvalTaskKind> eval_tasks{std::begin(kAllTaskKinds), std::end(kAllTaskKinds)};
  std::vector<Strategy> strategies{std::begin(kAllStrategies), std::end(kAllStrategies)};
  DecodeConfig decode;

  std::uint64_t seed_for(SeedStream s) const { return derive_seed(seed, static_cast<std::uint64_t>(s)); }

  MaskPolicy train_policy() const {
    MaskPolicy p = mask;
    p.rng_seed = seed_for(SeedStream::kMask);
    return p;
  }

  BuildOptions build_options() const { return {static_cast<std::size_t>(model.max_seq_len), train.loss_scope}; }

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kMissingArtifact, "config file " + path.string() + " not found");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
    }
    return from_json(j);
  }
};

namespace detail {

// Collects offending keys across the whole document so one error lists all.
class ConfigReader {
 public:
  void object(const nlohmann::json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) {
      bad_.push_back(where + " (expected object)");
      return;
    }
    for (const auto& [k, v] : j.items()) {
      if (!allowed.count(k)) bad_.push_back(where.empty() ? k : where + "." + k);
    }
  }

  template <typename T>
  void get(const nlohmann::json& j, const char* key, const std::string& where, T& out) {
    if (!j.is_object() || !j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      bad_.push_back((where.empty() ? "" : where + ".") + key + " (wrong type)");
    }
  }

  void fail(std::string key) { bad_.push_back(std::move(key)); }

  void finish() const {
    if (bad_.empty()) return;
    std::string msg = "offending keys:";
    for (const auto& k : bad_) msg += " " + k;
    throw Error(ErrorCode::kConfigInvalid, msg);
  }

 private:
  std::vector<std::string> bad_;
};

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::ConfigReader r;
  r.object(j, "", {"version", "seed", "corpus", "mask", "vocab", "model", "train", "eval", "strategies", "decode"});
  if (!j.is_object()) r.finish();
  int version = kVersion;
  r.get(j, "version", "", version);
  if (version != kVersion) r.fail("version (unsupported)");
  r.get(j, "seed", "", c.seed);

  if (j.contains("corpus")) {
    const auto& s = j["corpus"];
    r.object(s, "corpus", {"name", "source", "format", "has_meta", "train", "valid", "test",
                           "synthetic_train", "synthetic_valid", "synthetic_test"});
    r.get(s, "name", "corpus", c.corpus.name);
    r.get(s, "source", "corpus", c.corpus.source);
    r.get(s, "format", "corpus", c.corpus.format);
    r.get(s, "has_meta", "corpus", c.corpus.has_meta);
    r.get(s, "train", "corpus", c.corpus.train);
    r.get(s, "valid", "corpus", c.corpus.valid);
    r.get(s, "test", "corpus", c.corpus.test);
    r.get(s, "synthetic_train", "corpus", c.corpus.synthetic_train);
    r.get(s, "synthetic_valid", "corpus", c.corpus.synthetic_valid);
    r.get(s, "synthetic_test", "corpus", c.corpus.synthetic_test);
  }
  if (c.corpus.source != "synthetic" && c.corpus.source != "files") r.fail("corpus.source (synthetic|files)");
  if (!parse_corpus_format(c.corpus.format)) r.fail("corpus.format (jsonl|txt)");
  if (c.corpus.source == "files" && (c.corpus.train.empty() || c.corpus.valid.empty() || c.corpus.test.empty())) {
    r.fail("corpus.train/valid/test (required for source=files)");
  }

  if (j.contains("mask")) {
    const auto& s = j["mask"];
    r.object(s, "mask", {"subtree_prob", "word_vs_ngram_prob", "max_ngram", "examples_per_doc"});
    r.get(s, "subtree_prob", "mask", c.mask.subtree_prob);
    r.get(s, "word_vs_ngram_prob", "mask", c.mask.word_vs_ngram_prob);
    r.get(s, "max_ngram", "mask", c.mask.max_ngram);
    r.get(s, "examples_per_doc", "mask", c.examples_per_doc);
  }
  if (c.examples_per_doc < 1) r.fail("mask.examples_per_doc (>= 1)");
  try {
    c.mask.validate();
  } catch (const Error&) {
    r.fail("mask (probabilities in [0,1], max_ngram >= 1)");
  }

  if (j.contains("vocab")) {
    r.object(j["vocab"], "vocab", {"target_size"});
    r.get(j["vocab"], "target_size", "vocab", c.vocab_size);
  }
  if (c.vocab_size < kNumSpecials + kNumBytes) r.fail("vocab.target_size (>= 265)");

  if (j.contains("model")) {
    const auto& s = j["model"];
    r.object(s, "model", {"n_layers", "n_heads", "d_model", "d_ff", "max_seq_len", "dropout"});
    r.get(s, "n_layers", "model", c.model.n_layers);
    r.get(s, "n_heads", "model", c.model.n_heads);
    r.get(s, "d_model", "model", c.model.d_model);
    r.get(s, "d_ff", "model", c.model.d_ff);
    r.get(s, "max_seq_len", "model", c.model.max_seq_len);
    r.get(s, "dropout", "model", c.model.dropout);
  }
  {
    ModelConfig probe = c.model;
    probe.vocab_size = static_cast<int>(c.vocab_size);
    try {
      probe.validate();
    } catch (const Error&) {
      r.fail("model (positive sizes, d_model % n_heads == 0, dropout in [0,1))");
    }
  }

  if (j.contains("train")) {
    const auto& s = j["train"];
    r.object(s, "train", {"batch_size", "lr", "warmup_steps", "min_lr_ratio", "max_steps", "eval_every",
                          "patience", "weight_decay", "beta1", "beta2", "eps", "grad_clip", "loss_scope"});
    r.get(s, "batch_size", "train", c.train.batch_size);
    r.get(s, "lr", "train", c.train.lr);
    r.get(s, "warmup_steps", "train", c.train.warmup_steps);
    r.get(s, "min_lr_ratio", "train", c.train.min_lr_ratio);
    r.get(s, "max_steps", "train", c.train.max_steps);
    r.get(s, "eval_every", "train", c.train.eval_every);
    r.get(s, "patience", "train", c.train.patience);
    r.get(s, "weight_decay", "train", c.train.weight_decay);
    r.get(s, "beta1", "train", c.train.beta1);
    r.get(s, "beta2", "train", c.train.beta2);
    r.get(s, "eps", "train", c.train.eps);
    r.get(s, "grad_clip", "train", c.train.grad_clip);
    std::string scope = "all";
    r.get(s, "loss_scope", "train", scope);
    if (scope == "all") c.train.loss_scope = LossScope::kAll;
    else if (scope == "targets_only") c.train.loss_scope = LossScope::kTargetsOnly;
    else r.fail("train.loss_scope (all|targets_only)");
  }
  try {
    c.train.validate();
  } catch (const Error&) {
    r.fail("train (values out of range)");
  }

  if (j.contains("eval")) {
    r.object(j["eval"], "eval", {"tasks"});
    if (j["eval"].contains("tasks")) {
      c.eval_tasks.clear();
      std::vector<std::string> names;
      r.get(j["eval"], "tasks", "eval", names);
      for (const auto& n : names) {
        if (auto k = parse_task(n)) c.eval_tasks.push_back(*k);
        else r.fail("eval.tasks[" + n + "]");
      }
    }
  }

  if (j.contains("strategies")) {
    c.strategies.clear();
    std::vector<std::string> names;
    r.get(j, "strategies", "", names);
    for (const auto& n : names) {
      if (auto s = parse_strategy(n)) c.strategies.push_back(*s);
      else r.fail("strategies[" + n + "]");
    }
  }

  if (j.contains("decode")) {
    try {
      c.decode.update_from_json(j["decode"]);
    } catch (const Error& e) {
      r.fail(std::string("decode (") + e.what() + ")");
    }
  }
  r.finish();
  return c;
}

inline nlohmann::json RunConfig::to_json() const {
  std::vector<std::string> tasks, strats;
  for (auto t : eval_tasks) tasks.emplace_back(task_name(t));
  for (auto s : strategies) strats.emplace_back(strategy_name(s));
  return {
      {"version", kVersion},
      {"seed", seed},
      {"corpus",
       {{"name", corpus.name}, {"source", corpus.source}, {"format", corpus.format}, {"has_meta", corpus.has_meta},
        {"train", corpus.train}, {"valid", corpus.valid}, {"test", corpus.test},
        {"synthetic_train", corpus.synthetic_train}, {"synthetic_valid", corpus.synthetic_valid},
        {"synthetic_test", corpus.synthetic_test}}},
      {"mask",
       {{"subtree_prob", mask.subtree_prob}, {"word_vs_ngram_prob", mask.word_vs_ngram_prob},
        {"max_ngram", mask.max_ngram}, {"examples_per_doc", examples_per_doc}}},
      {"vocab", {{"target_size", vocab_size}}},
      {"model",
       {{"n_layers", model.n_layers}, {"n_heads", model.n_heads}, {"d_model", model.d_model}, {"d_ff", model.d_ff},
        {"max_seq_len", model.max_seq_len}, {"dropout", model.dropout}}},
      {"train",
       {{"batch_size", train.batch_size}, {"lr", train.lr}, {"warmup_steps", train.warmup_steps},
        {"min_lr_ratio", train.min_lr_ratio}, {"max_steps", train.max_steps}, {"eval_every", train.eval_every},
        {"patience", train.patience}, {"weight_decay", train.weight_decay}, {"beta1", train.beta1},
        {"beta2", train.beta2}, {"eps", train.eps}, {"grad_clip", train.grad_clip},
        {"loss_scope", train.loss_scope == LossScope::kAll ? "all" : "targets_only"}}},
      {"eval", {{"tasks", tasks}}},
      {"strategies", strats},
      {"decode", decode.to_json()},
  };
}

}  // namespace ilm
