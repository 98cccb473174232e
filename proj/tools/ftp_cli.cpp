// SPDX-License-Identifier: Apache-2.0
//
// ftp: command-line driver for the pruning pipeline.
//
//   ftp pretrain        --config cfg.json [--section.key value ...]
//   ftp search-static   ...
//   ftp train-router    ...
//   ftp search-dynamic  ...
//   ftp eval | analyze | decode | report
//   ftp run --rounds 2
//
// Exit codes: 0 ok, 1 unexpected error, 2 config error, 3 invariant
// violation, 4 I/O error.

#include <iostream>

#include "CLI11.hpp"

#include "ftp/pipeline.hpp"

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

Overrides parse_overrides(const std::vector<std::string>& extra) {
  Overrides out;
  for (std::size_t i = 0; i < extra.size(); ++i) {
    const auto& a = extra[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) throw ftp::ConfigError("unexpected argument '" + a + "'");
    const auto body = a.substr(2);
    if (const auto eq = body.find('='); eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= extra.size()) throw ftp::ConfigError("override '" + a + "' has no value");
      out.emplace_back(body, extra[++i]);
    }
  }
  return out;
}

struct Common {
  std::string config_file;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_file, "JSON config file (every field can be overridden with --section.key value)");
  sub->allow_extras();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fine-grained token-wise pruning lab"};
  app.require_subcommand(1);
  Common common;

  auto* pretrain = app.add_subcommand("pretrain", "train the dense model");
  auto* search_static = app.add_subcommand("search-static", "GA sparsity search with the static router");
  auto* train = app.add_subcommand("train-router", "train the dynamic router against the frozen model");
  auto* search_dynamic = app.add_subcommand("search-dynamic", "GA sparsity search with the trained router");
  auto* eval = app.add_subcommand("eval", "retention of dense, uniform and searched configs");
  auto* analyze = app.add_subcommand("analyze", "token redundancy and speedup reports");
  auto* decode = app.add_subcommand("decode", "KV-cached greedy decoding trace");
  auto* report = app.add_subcommand("report", "aggregate all manifests into report.json");
  auto* run = app.add_subcommand("run", "every stage in order");
  auto* show = app.add_subcommand("config", "print the effective config as JSON");
  for (auto* s : {pretrain, search_static, train, search_dynamic, eval, analyze, decode, report, run, show})
    add_common(s, common);

  std::string sparsity_path, init_router, seed_config, eval_router = "static";
  std::string strategy;
  double decode_target = -1.0;
  std::size_t rounds = 0;
  train->add_option("--sparsity", sparsity_path, "sparsity JSON to train under (default: stage-1 output)");
  train->add_option("--init-router", init_router, "continue from this router checkpoint");
  search_dynamic->add_option("--seed-config", seed_config, "config seeding the search (default: stage-1 output)");
  eval->add_option("--sparsity", sparsity_path, "also evaluate this sparsity JSON");
  eval->add_option("--router", eval_router, "router for --sparsity")->check(CLI::IsMember({"static", "dynamic"}));
  decode->add_option("--strategy", strategy, "dense, threshold or strict")
      ->check(CLI::IsMember({"dense", "threshold", "strict"}));
  decode->add_option("--target", decode_target, "strict depth-sparsity target for the decode token");
  decode->add_option("--sparsity", sparsity_path, "sparsity JSON (default: stage 3 for dynamic, stage 1 for static)");
  run->add_option("--rounds", rounds, "router-training and re-search rounds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    auto overrides = parse_overrides(sub->remaining());
    if (!strategy.empty()) overrides.emplace_back("decode.strategy", '"' + strategy + '"');
    if (decode_target >= 0.0) overrides.emplace_back("decode.target", std::to_string(decode_target));
    if (rounds > 0) overrides.emplace_back("rounds", std::to_string(rounds));
    std::optional<std::filesystem::path> file;
    if (!common.config_file.empty()) file = common.config_file;
    const auto cfg = ftp::load_pipeline_config(file, overrides);
    const ftp::Artifacts a{cfg.out_dir};
    auto opt_path = [](const std::string& s) -> std::optional<std::filesystem::path> {
      if (s.empty()) return std::nullopt;
      return std::filesystem::path(s);
    };

    const std::string name = sub->get_name();
    if (name == "config") {
      std::cout << ftp::to_json(cfg).dump(2) << '\n';
      return 0;
    }
    std::filesystem::create_directories(a.manifests());
    ftp::json out;
    if (name == "pretrain") {
      out = ftp::stage_pretrain(cfg);
    } else if (name == "search-static") {
      out = ftp::stage_search_static(cfg);
    } else if (name == "train-router") {
      out = ftp::stage_train_router(cfg, sparsity_path.empty() ? a.stage1() : std::filesystem::path(sparsity_path), opt_path(init_router));
    } else if (name == "search-dynamic") {
      out = ftp::stage_search_dynamic(cfg, seed_config.empty() ? a.stage1() : std::filesystem::path(seed_config));
    } else if (name == "eval") {
      out = ftp::stage_eval(cfg, opt_path(sparsity_path), eval_router);
    } else if (name == "analyze") {
      out = ftp::stage_analyze(cfg);
    } else if (name == "decode") {
      out = ftp::stage_decode(cfg, opt_path(sparsity_path));
    } else if (name == "report") {
      out = ftp::stage_report(cfg);
    } else if (name == "run") {
      ftp::run_pipeline(cfg);
      ftp::stage_eval(cfg);
      ftp::stage_analyze(cfg);
      ftp::stage_decode(cfg);
      out = ftp::stage_report(cfg);
    }
    if (out.contains("metrics")) {
      std::cout << out["stage"].get<std::string>() << ": " << out["metrics"].dump() << '\n';
    } else {
      std::cout << "report written to " << a.report().string() << '\n';
    }
    return 0;
  } catch (const ftp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ftp::InputError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ftp::InvariantError& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 3;
  } catch (const ftp::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
