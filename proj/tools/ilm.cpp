// Command-line driver for the infilling pipeline.
//
//   ilm [--config FILE] [--seed N] [--out-dir DIR] <subcommand> [options]
//
// Failures exit with status 1 (2 for usage errors) and print exactly one line
// "error: <Code>: <message>" to stderr.

#include <pthread.h>
#include <signal.h>

#include <atomic>
#include <chrono>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "ilm/infill.hpp"
#include "ilm/pipeline.hpp"
#include "ilm/service.hpp"

namespace {

using namespace ilm;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "run";
};

RunConfig load_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : RunConfig::load(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

std::vector<Strategy> parse_strategies(const std::vector<std::string>& names) {
  std::vector<Strategy> out;
  for (const auto& n : names) {
    if (n == "all") {
      for (Strategy s : kAllStrategies) out.push_back(s);
      continue;
    }
    const auto s = parse_strategy(n);
    if (!s) throw Error(ErrorCode::kConfigInvalid, "unknown strategy '" + n + "' (ilm|lm|lmrev|lmall|all)");
    out.push_back(*s);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text infilling: data, training, evaluation and serving"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "RunConfig JSON file (defaults apply when omitted)");
  app.add_option("--seed", g.seed, "Override the run seed");
  app.add_option("--out-dir", g.out_dir, "Directory holding all run artifacts")->capture_default_str();

  auto* ingest_cmd = app.add_subcommand("ingest", "Normalize or synthesize the train/valid/test corpora");

  auto* vocab_cmd = app.add_subcommand("train-vocab", "Learn the BPE vocabulary on the train split");

  std::vector<std::string> example_strategies{"all"};
  auto* examples_cmd = app.add_subcommand("make-examples", "Mask documents and write per-strategy datasets");
  examples_cmd->add_option("--strategy", example_strategies, "ilm|lm|lmrev|lmall|all (repeatable)")
      ->capture_default_str();

  std::vector<std::string> train_strategies;
  auto* train_cmd = app.add_subcommand("train", "Train one model per strategy from scratch");
  train_cmd->add_option("--strategy", train_strategies, "ilm|lm|lmrev|lmall|all (repeatable)")->required();

  bool eval_json = false;
  auto* eval_cmd = app.add_subcommand("eval", "Masked-token perplexity for every strategy and task");
  eval_cmd->add_flag("--json", eval_json, "Print the JSON report instead of the table");

  auto* run_cmd = app.add_subcommand("run", "Run every stage in order");

  std::string infill_text, infill_strategy = "ilm", infill_checkpoint;
  std::string infill_decode;
  bool infill_json = false;
  auto* infill_cmd = app.add_subcommand("infill", "Fill [blank] markers in a text with a trained model");
  infill_cmd->add_option("--text", infill_text, "Text containing [blank] or [blank:<granularity>] markers")
      ->required();
  infill_cmd->add_option("--checkpoint", infill_checkpoint, "Checkpoint (default: <out-dir>/models/ilm.ckpt)");
  infill_cmd->add_option("--decode", infill_decode, "JSON object overriding decode settings");
  infill_cmd->add_flag("--json", infill_json, "Print the full JSON result");

  ServeConfig serve;
  std::string serve_checkpoint, serve_static;
  auto* serve_cmd = app.add_subcommand("serve", "Serve POST /v1/infill and GET /v1/health");
  serve_cmd->add_option("--host", serve.host)->capture_default_str();
  serve_cmd->add_option("--port", serve.port)->capture_default_str();
  serve_cmd->add_option("--checkpoint", serve_checkpoint, "Checkpoint (default: <out-dir>/models/ilm.ckpt)");
  serve_cmd->add_option("--max-concurrent", serve.max_concurrent)->capture_default_str();
  serve_cmd->add_option("--max-chars", serve.max_text_chars)->capture_default_str();
  serve_cmd->add_option("--max-new-tokens", serve.max_new_tokens)->capture_default_str();
  serve_cmd->add_option("--cors-origin", serve.cors_origin)->capture_default_str();
  serve_cmd->add_option("--static-dir", serve_static, "Optional directory served at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: Usage: " << e.what() << "\n";
    return 2;
  }

  try {
    const RunConfig cfg = load_config(g);
    const RunPaths paths{g.out_dir};

    if (*ingest_cmd) {
      for (const auto& [split, n] : ingest(cfg, paths)) std::cout << split << "\t" << n << " documents\n";
    } else if (*vocab_cmd) {
      const Vocab v = train_vocab_stage(cfg, paths);
      std::cout << "vocab\t" << v.size() << " tokens\t" << v.fingerprint() << "\n";
      if (v.short_of_target()) std::cout << "warning: corpus ran out of merges before " << cfg.vocab_size << "\n";
    } else if (*examples_cmd) {
      const auto strategies = parse_strategies(example_strategies);
      const MadeExamples made = make_examples_stage(cfg, paths, strategies);
      for (Strategy s : strategies) {
        std::cout << strategy_name(s) << "\ttrain " << made.train.at(s).size() << "\tvalid " << made.valid.at(s).size()
                  << "\n";
      }
      if (made.skipped) std::cout << "skipped\t" << made.skipped << " over-length masks\n";
    } else if (*train_cmd) {
      for (Strategy s : parse_strategies(train_strategies)) {
        const TrainResult r = train_stage(cfg, paths, s, [&](const TrainLogEntry& e) {
          if (e.val_ppl) std::cout << strategy_name(s) << "\t" << e.to_json().dump() << "\n" << std::flush;
        });
        std::cout << strategy_name(s) << "\tsteps " << r.steps_run << "\tbest step " << r.best_step
                  << "\tbest val ppl " << r.best_val_ppl << (r.early_stopped ? "\tearly stop" : "") << "\n";
      }
    } else if (*eval_cmd) {
      const EvalReport report = eval_stage(cfg, paths);
      std::cout << (eval_json ? report.to_json().dump(2) + "\n" : report.to_table());
    } else if (*run_cmd) {
      std::cout << run_pipeline(cfg, paths, &std::cerr).to_table();
    } else if (*infill_cmd) {
      const fs::path ck_path = infill_checkpoint.empty() ? paths.checkpoint(Strategy::kIlm) : fs::path(infill_checkpoint);
      require_artifact(ck_path, "train --strategy ilm");
      const Vocab vocab = load_run_vocab(paths);
      const Checkpoint ck = load_checkpoint(ck_path);
      if (ck.vocab_fingerprint != vocab.fingerprint()) {
        throw Error(ErrorCode::kFingerprintMismatch, ck_path.string() + " was trained with another vocab");
      }
      InfillRequest req{infill_text, cfg.decode, cfg.seed};
      if (!infill_decode.empty()) {
        try {
          req.decode.update_from_json(nlohmann::json::parse(infill_decode));
        } catch (const nlohmann::json::exception& e) {
          throw Error(ErrorCode::kConfigInvalid, std::string("--decode: ") + e.what());
        }
      }
      const InfillResult r = complete(ck.model, vocab, req);
      if (infill_json) {
        std::cout << InfillService::json_body(InfillService::result_json(r)) << "\n";
      } else {
        std::cout << r.completed_text << "\n";
        if (r.diagnostics.truncated) std::cerr << "warning: generation ended before every blank was filled\n";
      }
    } else if (*serve_cmd) {
      serve.checkpoint = serve_checkpoint.empty() ? paths.checkpoint(Strategy::kIlm) : fs::path(serve_checkpoint);
      serve.vocab = paths.vocab();
      serve.default_decode = cfg.decode;
      if (!serve_static.empty()) serve.static_dir = serve_static;
      InfillService service(serve);
      httplib::Server server;
      service.mount(server);
      // Binding first lets --port 0 report the port the kernel picked.
      const int port = serve.port == 0 ? server.bind_to_any_port(serve.host)
                                       : (server.bind_to_port(serve.host, serve.port) ? serve.port : -1);
      if (port < 0) throw Error(ErrorCode::kIoError, "could not bind " + serve.host + ":" + std::to_string(serve.port));
      // SIGINT/SIGTERM are handled by a waiter thread rather than an async
      // handler, since stopping the server is not async-signal-safe.
      sigset_t stop_signals;
      sigemptyset(&stop_signals);
      sigaddset(&stop_signals, SIGINT);
      sigaddset(&stop_signals, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);
      std::thread signal_waiter([&] {
        int sig = 0;
        sigwait(&stop_signals, &sig);
        server.stop();
      });
      std::atomic<bool> listen_done = false;
      // Health reports 503 until the checkpoint is in memory.
      std::thread loader([&] {
        try {
          service.load();
          std::cerr << "loaded " << serve.checkpoint.string() << "\n";
        } catch (const std::exception& e) {
          std::cerr << "error: " << e.what() << "\n";
          while (!server.is_running() && !listen_done) std::this_thread::sleep_for(std::chrono::milliseconds(10));
          server.stop();
        }
      });
      std::cerr << "listening on " << serve.host << ":" << port << "\n";
      const bool ok = server.listen_after_bind();
      listen_done = true;
      loader.join();
      pthread_kill(signal_waiter.native_handle(), SIGTERM);
      signal_waiter.join();
      if (!service.ready()) return 1;
      if (!ok) throw Error(ErrorCode::kIoError, "server on " + serve.host + ":" + std::to_string(port) + " failed");
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: Internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
