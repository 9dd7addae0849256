#pragma once

// Autoregressive generation over any model exposing next_log_probs().

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ilm/error.hpp"
#include "ilm/rng.hpp"
#include "ilm/tokenizer.hpp"

namespace ilm {

template <typename M>
concept NextTokenModel = requires(const M& m, std::span<const TokenId> ctx) {
  { m.next_log_probs(ctx) } -> std::convertible_to<std::vector<double>>;
  { m.max_seq_len() } -> std::convertible_to<std::size_t>;
};

template <typename M>
concept SequenceScorer = requires(const M& m, std::span<const TokenId> tokens) {
  { m.score(tokens) } -> std::convertible_to<std::vector<double>>;
};

enum class DecodeMode { kGreedy, kTemperature, kTopK, kNucleus };

inline std::optional<DecodeMode> parse_decode_mode(std::string_view s) {
  if (s == "greedy") return DecodeMode::kGreedy;
  if (s == "temperature") return DecodeMode::kTemperature;
  if (s == "top_k") return DecodeMode::kTopK;
  if (s == "nucleus") return DecodeMode::kNucleus;
  return std::nullopt;
}

constexpr std::string_view decode_mode_name(DecodeMode m) {
  switch (m) {
    case DecodeMode::kGreedy: return "greedy";
    case DecodeMode::kTemperature: return "temperature";
    case DecodeMode::kTopK: return "top_k";
    case DecodeMode::kNucleus: return "nucleus";
  }
  return "?";
}

// Default: nucleus sampling with p = 0.95 at temperature 1.
struct DecodeConfig {
  DecodeMode mode = DecodeMode::kNucleus;
  double temperature = 1.0;
  int top_k = 40;
  double top_p = 0.95;
  int max_new_tokens = 128;

  nlohmann::json to_json() const {
    return {{"mode", decode_mode_name(mode)}, {"temperature", temperature}, {"top_k", top_k},
            {"top_p", top_p}, {"max_new_tokens", max_new_tokens}};
  }

  // Fields absent from `j` keep their current values.
  void update_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorCode::kConfigInvalid, "decode must be an object");
    for (const auto& [key, value] : j.items()) {
      if (key == "mode") {
        auto m = value.is_string() ? parse_decode_mode(value.get<std::string>()) : std::nullopt;
        if (!m) throw Error(ErrorCode::kConfigInvalid, "decode.mode must be greedy|temperature|top_k|nucleus");
        mode = *m;
      } else if (key == "temperature" && value.is_number()) {
        temperature = value.get<double>();
      } else if (key == "top_k" && value.is_number_integer()) {
        top_k = value.get<int>();
      } else if (key == "top_p" && value.is_number()) {
        top_p = value.get<double>();
      } else if (key == "max_new_tokens" && value.is_number_integer()) {
        max_new_tokens = value.get<int>();
      } else {
        throw Error(ErrorCode::kConfigInvalid, "decode: bad or unknown key '" + key + "'");
      }
    }
    validate();
  }

  void validate() const {
    if (temperature < 0.0 || !std::isfinite(temperature) || top_k < 1 || !(top_p > 0.0 && top_p <= 1.0) ||
        max_new_tokens < 1) {
      throw Error(ErrorCode::kConfigInvalid,
                  "decode: need temperature >= 0, top_k >= 1, top_p in (0,1], max_new_tokens >= 1");
    }
  }
};

inline TokenId argmax(std::span<const double> logp) {
  return static_cast<TokenId>(std::max_element(logp.begin(), logp.end()) - logp.begin());
}

// Picks one token id from a next-token distribution. Temperature 0 (or
// greedy mode) is argmax; ties break toward the smaller id everywhere.
inline TokenId sample_token(std::span<const double> logp, const DecodeConfig& cfg, Rng& rng) {
  if (cfg.mode == DecodeMode::kGreedy || cfg.temperature == 0.0) return argmax(logp);
  const double inv_t = 1.0 / cfg.temperature;
  std::vector<TokenId> order(logp.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::size_t keep = order.size();
  if (cfg.mode == DecodeMode::kTopK || cfg.mode == DecodeMode::kNucleus) {
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return logp[a] > logp[b]; });
  }
  if (cfg.mode == DecodeMode::kTopK) keep = std::min<std::size_t>(keep, static_cast<std::size_t>(cfg.top_k));

  const double mx = *std::max_element(logp.begin(), logp.end());
  std::vector<double> w(keep);
  double total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    w[i] = std::exp((logp[order[i]] - mx) * inv_t);
    total += w[i];
  }
  if (cfg.mode == DecodeMode::kNucleus) {
    double cum = 0.0;
    std::size_t cut = keep;
    for (std::size_t i = 0; i < keep; ++i) {
      cum += w[i];
      if (cum >= cfg.top_p * total) {
        cut = i + 1;
        break;
      }
    }
    keep = cut;
    w.resize(keep);
    total = std::accumulate(w.begin(), w.end(), 0.0);
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < keep; ++i) {
    u -= w[i];
    if (u < 0.0) return order[i];
  }
  return order[keep - 1];
}

enum class StopReason { kEos, kMaxNewTokens, kStopCondition, kContextFull };

struct GenerateResult {
  std::vector<TokenId> tokens;  // excludes a terminating [eos]
  StopReason reason = StopReason::kMaxNewTokens;
};

using StopCondition = std::function<bool(std::span<const TokenId> generated)>;

template <NextTokenModel M>
GenerateResult generate(const M& model, std::span<const TokenId> prefix, const DecodeConfig& cfg,
                        std::uint64_t seed, const StopCondition& stop = {}) {
  if (prefix.size() >= model.max_seq_len()) {
    throw Error(ErrorCode::kContextOverflow, "prefix of " + std::to_string(prefix.size()) +
                                                 " tokens does not fit max_seq_len " +
                                                 std::to_string(model.max_seq_len()));
  }
  Rng rng(seed);
  std::vector<TokenId> context(prefix.begin(), prefix.end());
  GenerateResult out;
  while (true) {
    if (static_cast<int>(out.tokens.size()) >= cfg.max_new_tokens) {
      out.reason = StopReason::kMaxNewTokens;
      break;
    }
    if (context.size() >= model.max_seq_len()) {
      out.reason = StopReason::kContextFull;
      break;
    }
    const std::vector<double> logp = model.next_log_probs(context);
    const TokenId next = sample_token(logp, cfg, rng);
    if (next == special_id(Special::kEos)) {
      out.reason = StopReason::kEos;
      break;
    }
    out.tokens.push_back(next);
    context.push_back(next);
    if (stop && stop(out.tokens)) {
      out.reason = StopReason::kStopCondition;
      break;
    }
  }
  return out;
}

}  // namespace ilm
