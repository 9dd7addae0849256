#pragma once

// Minibatch training with AdamW, linear warmup + cosine decay, global-norm
// clipping, and early stopping on validation masked-token perplexity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilm/checkpoint.hpp"
#include "ilm/error.hpp"
#include "ilm/examples.hpp"
#include "ilm/model.hpp"
#include "ilm/rng.hpp"

namespace ilm {

struct TrainConfig {
  int batch_size = 24;
  double lr = 3e-3;
  int warmup_steps = 50;
  double min_lr_ratio = 0.1;
  int max_steps = 1000;
  int eval_every = 100;
  int patience = 3;  // evaluations without improvement before stopping
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;
  LossScope loss_scope = LossScope::kAll;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1 || !(lr > 0.0) || warmup_steps < 0 || max_steps < 1 || eval_every < 1 ||
        patience < 1 || weight_decay < 0.0 || !(grad_clip > 0.0) || !(min_lr_ratio >= 0.0) ||
        !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
      throw Error(ErrorCode::kConfigInvalid, "train config: values must be positive and in range");
    }
  }

  double lr_at(int step) const {
    if (step < warmup_steps) return lr * (step + 1) / static_cast<double>(warmup_steps);
    const double span = std::max(1, max_steps - warmup_steps);
    const double progress = std::min(1.0, (step - warmup_steps) / span);
    const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
    return lr * (min_lr_ratio + (1.0 - min_lr_ratio) * cosine);
  }
};

struct Dataset {
  std::vector<InfillExample> examples;
  std::string vocab_fingerprint;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;  // mean nat/token over the batch's loss positions
  double lr = 0.0;
  std::optional<double> val_ppl;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step}, {"loss", loss}, {"lr", lr}};
    j["val_ppl"] = val_ppl ? nlohmann::json(*val_ppl) : nlohmann::json(nullptr);
    return j;
  }
};

struct TrainResult {
  Checkpoint checkpoint;  // best validation parameters
  std::vector<TrainLogEntry> log;
  int best_step = 0;
  double best_val_ppl = 0.0;
  int steps_run = 0;
  bool early_stopped = false;
};

// Corpus-level perplexity over target-span tokens.
template <typename T>
double target_perplexity(const Transformer<T>& model, std::span<const InfillExample> examples) {
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& ex : examples) {
    if (ex.target_spans.empty()) continue;
    const auto lp = model.score(ex.tokens);
    for (const auto& t : ex.target_spans) {
      for (auto i = t.begin; i < t.end; ++i) nll -= lp[i];
      n += t.size();
    }
  }
  if (n == 0) throw Error(ErrorCode::kEmptyTargets, "validation set has no target tokens");
  return std::exp(nll / static_cast<double>(n));
}

inline std::vector<std::uint8_t> effective_loss_mask(const InfillExample& ex, LossScope scope) {
  if (scope == LossScope::kAll) return ex.loss_mask;
  std::vector<std::uint8_t> m(ex.tokens.size(), 0);
  for (const auto& t : ex.target_spans) std::fill(m.begin() + t.begin, m.begin() + t.end, 1);
  return m;
}

class AdamW {
 public:
  AdamW(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), state_{std::vector<float>(n), std::vector<float>(n), 0} {}
  AdamW(const TrainConfig& cfg, AdamState state) : cfg_(cfg), state_(std::move(state)) {}

  // Biases and LayerNorm parameters are not decayed.
  void step(std::vector<float>& params, const std::vector<float>& grads, const ParamLayout& layout, double lr) {
    ++state_.step;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(state_.step));
    for (const auto& t : layout.tensors()) {
      const bool decay = t.rows > 1 && !t.name.ends_with(".g");
      for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
        const double g = grads[i];
        state_.m[i] = static_cast<float>(cfg_.beta1 * state_.m[i] + (1.0 - cfg_.beta1) * g);
        state_.v[i] = static_cast<float>(cfg_.beta2 * state_.v[i] + (1.0 - cfg_.beta2) * g * g);
        const double mhat = state_.m[i] / bc1;
        const double vhat = state_.v[i] / bc2;
        double p = params[i];
        if (decay) p -= lr * cfg_.weight_decay * p;
        p -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        params[i] = static_cast<float>(p);
      }
    }
  }

  const AdamState& state() const { return state_; }

 private:
  TrainConfig cfg_;
  AdamState state_;
};

using TrainLogSink = std::function<void(const TrainLogEntry&)>;

// One optimizer step on a batch; returns mean loss per loss position.
inline double train_step(Transformer<float>& model, AdamW& opt, std::span<const InfillExample* const> batch,
                         const TrainConfig& cfg, int step, std::vector<float>& grads) {
  std::size_t positions = 0;
  std::vector<std::vector<std::uint8_t>> masks;
  masks.reserve(batch.size());
  for (const InfillExample* ex : batch) {
    masks.push_back(effective_loss_mask(*ex, cfg.loss_scope));
    positions += static_cast<std::size_t>(std::count(masks.back().begin(), masks.back().end(), 1));
  }
  std::fill(grads.begin(), grads.end(), 0.0f);
  if (positions == 0) return 0.0;
  const float scale = 1.0f / static_cast<float>(positions);
  Rng dropout_rng(derive_seed(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(step)));
  double nll = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    nll += model.loss_and_grad(batch[b]->tokens, masks[b], scale, grads,
                               model.config().dropout > 0.0 ? &dropout_rng : nullptr);
  }
  const double loss = nll / static_cast<double>(positions);
  double norm2 = 0.0;
  for (float g : grads) norm2 += static_cast<double>(g) * g;
  if (!std::isfinite(loss) || !std::isfinite(norm2)) {
    throw Error(ErrorCode::kNonFiniteLoss, "step " + std::to_string(step) + ": loss " + std::to_string(loss) +
                                               ", grad norm^2 " + std::to_string(norm2));
  }
  const double norm = std::sqrt(norm2);
  if (norm > cfg.grad_clip) {
    const auto f = static_cast<float>(cfg.grad_clip / norm);
    for (float& g : grads) g *= f;
  }
  opt.step(model.params(), grads, model.layout(), cfg.lr_at(step));
  return loss;
}

inline TrainResult train(Checkpoint start, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& cfg, const TrainLogSink& sink = {}) {
  cfg.validate();
  if (train_set.examples.empty()) throw Error(ErrorCode::kEmptyCorpus, "training set is empty");
  for (const Dataset* d : {&train_set, &val_set}) {
    if (!d->examples.empty() && d->vocab_fingerprint != start.vocab_fingerprint) {
      throw Error(ErrorCode::kFingerprintMismatch, "dataset vocab " + d->vocab_fingerprint +
                                                       " != checkpoint vocab " + start.vocab_fingerprint);
    }
  }
  for (const auto& ex : train_set.examples) {
    if (ex.tokens.size() > start.model.max_seq_len()) {
      throw Error(ErrorCode::kSequenceTooLong, "training example for '" + ex.doc_id + "' exceeds max_seq_len");
    }
  }

  Transformer<float>& model = start.model;
  AdamW opt = start.optimizer ? AdamW(cfg, *start.optimizer) : AdamW(cfg, model.params().size());
  std::vector<float> grads(model.params().size(), 0.0f);

  TrainResult result{start, {}, 0, 0.0, 0, false};
  const bool validate = !val_set.examples.empty();
  std::optional<double> best;
  int bad_evals = 0;

  std::vector<std::size_t> order(train_set.examples.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  std::vector<const InfillExample*> batch;

  auto evaluate = [&](int step, TrainLogEntry& entry) {
    const double ppl = target_perplexity(model, val_set.examples);
    entry.val_ppl = ppl;
    if (!best || ppl < *best) {
      best = ppl;
      bad_evals = 0;
      result.checkpoint.model = model;
      result.checkpoint.optimizer = opt.state();
      result.checkpoint.step = start.step + static_cast<std::uint64_t>(step);
      result.best_step = step;
      result.best_val_ppl = ppl;
    } else {
      ++bad_evals;
    }
  };

  int step = 0;
  for (; step < cfg.max_steps; ++step) {
    batch.clear();
    while (batch.size() < static_cast<std::size_t>(cfg.batch_size)) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(cfg.seed, epoch++));
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&train_set.examples[order[cursor++]]);
    }
    TrainLogEntry entry;
    entry.step = step + 1;
    entry.lr = cfg.lr_at(step);
    entry.loss = train_step(model, opt, batch, cfg, step, grads);
    const bool last = step + 1 == cfg.max_steps;
    if (validate && ((step + 1) % cfg.eval_every == 0 || last)) evaluate(step + 1, entry);
    result.log.push_back(entry);
    if (sink) sink(entry);
    if (validate && bad_evals >= cfg.patience) {
      result.early_stopped = true;
      ++step;
      break;
    }
  }
  result.steps_run = step;
  if (!validate) {
    result.checkpoint.model = model;
    result.checkpoint.optimizer = opt.state();
    result.checkpoint.step = start.step + static_cast<std::uint64_t>(step);
    result.best_step = step;
  }
  return result;
}

}  // namespace ilm
