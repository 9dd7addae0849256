#pragma once

// JSON-over-HTTP infilling endpoint.
//
//   POST /v1/infill  {"text": str, "decode"?: {...}, "seed"?: uint}
//     200 {"completed_text", "fills": [{"index","granularity","text"}],
//          "diagnostics": {...}}
//     400 malformed body or marker syntax, 413 over the character limit,
//     415 non-JSON content type, 503 not loaded or at capacity.
//   GET /v1/health
//     200 {"status":"ok","checkpoint_fingerprint","vocab_fingerprint"}
//     503 {"status":"loading"} until a checkpoint is loaded.

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

// Eigen must precede httplib: <resolv.h> defines a _res macro that collides
// with Eigen parameter names.
#include <Eigen/Dense>
#include <httplib.h>
#include <json.hpp>

#include "ilm/checkpoint.hpp"
#include "ilm/decode.hpp"
#include "ilm/error.hpp"
#include "ilm/infill.hpp"
#include "ilm/tokenizer.hpp"

namespace ilm {

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path checkpoint;
  std::filesystem::path vocab;
  std::size_t max_concurrent = 4;
  std::size_t max_text_chars = 8192;
  int max_new_tokens = 256;  // per-request generation budget
  DecodeConfig default_decode;
  std::string cors_origin = "*";
  std::optional<std::filesystem::path> static_dir;

  void validate() const {
    if (max_concurrent == 0 || max_text_chars == 0 || max_new_tokens < 1) {
      throw Error(ErrorCode::kConfigInvalid, "serve: budgets must be positive");
    }
    default_decode.validate();
  }
};

class InfillService {
 public:
  struct Response {
    int status = 200;
    std::string body;
  };

  explicit InfillService(ServeConfig config) : config_(std::move(config)) { config_.validate(); }

  // Loads vocab and checkpoint from the configured paths.
  void load() {
    Vocab vocab = Vocab::load(config_.vocab);
    Checkpoint ck = load_checkpoint(config_.checkpoint);
    load(std::move(ck), std::move(vocab), file_fingerprint(config_.checkpoint));
  }

  void load(Checkpoint ck, Vocab vocab, std::string checkpoint_fingerprint) {
    if (ck.vocab_fingerprint != vocab.fingerprint()) {
      throw Error(ErrorCode::kFingerprintMismatch,
                  "checkpoint vocab " + ck.vocab_fingerprint + " != loaded vocab " + vocab.fingerprint());
    }
    auto state = std::make_shared<const State>(State{std::move(ck), std::move(vocab), std::move(checkpoint_fingerprint)});
    std::lock_guard lock(mu_);
    state_ = std::move(state);
  }

  bool ready() const { return current() != nullptr; }

  Response health() const {
    const auto s = current();
    if (!s) return {503, json_body(nlohmann::json{{"status", "loading"}})};
    return {200, json_body({{"status", "ok"},
                       {"checkpoint_fingerprint", s->checkpoint_fingerprint},
                       {"vocab_fingerprint", s->vocab.fingerprint()}})};
  }

  Response infill(std::string_view request_body, std::string_view content_type = "application/json") {
    if (!is_json_content_type(content_type)) {
      return error(415, "UnsupportedMediaType", "content-type must be application/json");
    }
    const auto s = current();
    if (!s) return error(503, "NotReady", "checkpoint not loaded");

    nlohmann::json req;
    try {
      req = nlohmann::json::parse(request_body);
    } catch (const nlohmann::json::exception& e) {
      return error(400, "MalformedJson", e.what());
    }
    if (!req.is_object() || !req.contains("text") || !req["text"].is_string()) {
      return error(400, "MalformedRequest", "body must be an object with string field \"text\"");
    }
    for (const auto& [key, value] : req.items()) {
      if (key != "text" && key != "decode" && key != "seed") {
        return error(400, "MalformedRequest", "unknown field \"" + key + "\"");
      }
    }
    InfillRequest request;
    request.text_with_blanks = req["text"].get<std::string>();
    if (request.text_with_blanks.size() > config_.max_text_chars) {
      return error(413, "TextTooLong", std::to_string(request.text_with_blanks.size()) + " characters, limit " +
                                           std::to_string(config_.max_text_chars));
    }
    request.decode = config_.default_decode;
    try {
      if (req.contains("decode")) request.decode.update_from_json(req["decode"]);
    } catch (const Error& e) {
      return error(400, "MalformedRequest", e.what());
    }
    request.decode.max_new_tokens = std::min(request.decode.max_new_tokens, config_.max_new_tokens);
    if (req.contains("seed")) {
      if (!req["seed"].is_number_unsigned()) return error(400, "MalformedRequest", "seed must be a non-negative integer");
      request.seed = req["seed"].get<std::uint64_t>();
    }

    if (in_flight_.fetch_add(1) >= config_.max_concurrent) {
      in_flight_.fetch_sub(1);
      return error(503, "AtCapacity", "too many concurrent requests");
    }
    struct Release {
      std::atomic<std::size_t>& n;
      ~Release() { n.fetch_sub(1); }
    } release{in_flight_};

    try {
      const InfillResult r = complete(s->checkpoint.model, s->vocab, request);
      return {200, json_body(result_json(r))};
    } catch (const Error& e) {
      switch (e.code()) {
        case ErrorCode::kMarkerSyntax:
        case ErrorCode::kUnknownSpecialInText:
          return error(400, std::string(error_name(e.code())), e.what());
        case ErrorCode::kContextOverflow:
        case ErrorCode::kSequenceTooLong:
          return error(413, std::string(error_name(e.code())), e.what());
        default:
          return error(500, std::string(error_name(e.code())), e.what());
      }
    }
  }

  // Generated bytes need not be valid UTF-8; invalid sequences become U+FFFD.
  static std::string json_body(const nlohmann::json& j) {
    return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  }

  static nlohmann::json result_json(const InfillResult& r) {
    nlohmann::json fills = nlohmann::json::array();
    for (const auto& f : r.fills) {
      fills.push_back({{"index", f.blank_index}, {"granularity", granularity_name(f.granularity)}, {"text", f.text}});
    }
    return {{"completed_text", r.completed_text},
            {"fills", fills},
            {"diagnostics",
             {{"answers_emitted", r.diagnostics.answers_emitted},
              {"truncated", r.diagnostics.truncated},
              {"stripped_specials", r.diagnostics.stripped_specials},
              {"generated_tokens", r.diagnostics.generated_tokens}}}};
  }

  // Registers the routes (and CORS handling) on an httplib server.
  void mount(httplib::Server& server) {
    server.set_default_headers({{"Access-Control-Allow-Origin", config_.cors_origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      const Response r = health();
      res.status = r.status;
      res.set_content(r.body, "application/json");
    });
    server.Post("/v1/infill", [this](const httplib::Request& req, httplib::Response& res) {
      const Response r = infill(req.body, req.get_header_value("Content-Type"));
      res.status = r.status;
      res.set_content(r.body, "application/json");
    });
    if (config_.static_dir) server.set_mount_point("/", config_.static_dir->string());
  }

  const ServeConfig& config() const { return config_; }

 private:
  struct State {
    Checkpoint checkpoint;
    Vocab vocab;
    std::string checkpoint_fingerprint;
  };

  static bool is_json_content_type(std::string_view ct) {
    const auto semi = ct.find(';');
    auto base = ct.substr(0, semi);
    while (!base.empty() && base.back() == ' ') base.remove_suffix(1);
    return base == "application/json";
  }

  static Response error(int status, const std::string& code, const std::string& message) {
    return {status, json_body({{"error", {{"code", code}, {"message", message}}}})};
  }

  std::shared_ptr<const State> current() const {
    std::lock_guard lock(mu_);
    return state_;
  }

  ServeConfig config_;
  mutable std::mutex mu_;
  std::shared_ptr<const State> state_;
  std::atomic<std::size_t> in_flight_{0};
};

}  // namespace ilm
