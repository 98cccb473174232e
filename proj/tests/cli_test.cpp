// SPDX-License-Identifier: Apache-2.0
//
// Drives the `ftp` binary on a tiny configuration.

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "ftp/pipeline.hpp"

namespace fs = std::filesystem;
using ftp::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "ftp_cli_test";

json tiny_config(const fs::path& out) {
  return {
      {"seed", 7},
      {"target", 0.3},
      {"out_dir", out.string()},
      {"corpus", {{"synthetic", {{"n_tokens", 6000}, {"copy_window", 12}, {"copy_len", 4}}}}},
      {"model", {{"n_blocks", 5}, {"d_model", 16}, {"n_heads", 2}, {"d_ff", 32}, {"vocab_size", 32}, {"max_seq_len", 32}}},
      {"pretrain", {{"steps", 40}, {"seq_len", 16}, {"batch_size", 2}, {"lr", 1e-2}}},
      {"ga", {{"population_size", 8}, {"generations", 2}}},
      {"router", {{"steps", 12}, {"seq_len", 16}}},
      {"eval", {{"search_sequences", 4}, {"test_sequences", 4}, {"seq_len", 16}}},
      {"analysis",
       {{"sequences", 4},
        {"seq_len", 16},
        {"speedup_lengths", {16, 32}},
        {"wall_clock_length", 32},
        {"wall_clock_runs", 1}}},
      {"decode", {{"prompt_len", 4}, {"new_tokens", 12}}},
  };
}

fs::path write_config(const fs::path& dir, const json& j) {
  fs::create_directories(dir);
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

int ftp_cmd(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + FTP_CLI_PATH + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    cfg_path_ = write_config(kRoot / "main", tiny_config(kRoot / "main" / "out"));
    run_rc_ = ftp_cmd("run -c " + cfg_path_.string());
  }
  static fs::path out() { return kRoot / "main" / "out"; }
  static inline fs::path cfg_path_;
  static inline int run_rc_ = -1;
};

}  // namespace

TEST_F(CliPipeline, RunSucceedsAndWritesEveryArtifact) {
  ASSERT_EQ(run_rc_, 0);
  const ftp::Artifacts a{out()};
  for (const auto& p : {a.model(), a.pretrain_loss(), a.stage1(), a.stage1_trace(), a.router(), a.router_loss(),
                        a.stage3(), a.stage3_trace(), a.eval_csv(), a.redundancy_csv(), a.speedup_csv(),
                        a.decode_csv("strict"), a.report()})
    EXPECT_TRUE(fs::exists(p)) << p;
}

TEST_F(CliPipeline, ManifestsHashEveryOutput) {
  ASSERT_EQ(run_rc_, 0);
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(out() / "manifests")) {
    const auto m = read_json(e.path());
    EXPECT_TRUE(m.contains("wall_time_s"));
    EXPECT_TRUE(m.contains("config"));
    ASSERT_FALSE(m["outputs"].empty()) << e.path();
    for (const auto& o : m["outputs"]) EXPECT_EQ(o["hash"], ftp::file_hash(o["path"].get<std::string>()));
    ++n;
  }
  EXPECT_EQ(n, 7u);
}

TEST_F(CliPipeline, ReportAggregatesAllManifests) {
  ASSERT_EQ(run_rc_, 0);
  const auto rep = read_json(ftp::Artifacts{out()}.report());
  for (const char* s : {"pretrain", "search-static", "train-router", "search-dynamic", "eval", "analyze", "decode-strict"})
    EXPECT_TRUE(rep["stages"].contains(s)) << s;
}

TEST_F(CliPipeline, PretrainHeldOutLossBelowBaseline) {
  ASSERT_EQ(run_rc_, 0);
  const auto m = read_json(out() / "manifests" / "pretrain.json")["metrics"];
  EXPECT_LT(m["final_heldout_loss"].get<double>(), m["initial_heldout_loss"].get<double>());
  EXPECT_LT(m["final_heldout_loss"].get<double>(), m["uniform_baseline_loss"].get<double>());
  EXPECT_EQ(lines(ftp::Artifacts{out()}.pretrain_loss()).size(), 41u);
}

TEST_F(CliPipeline, SearchedConfigsMeetTargetInBlockMapFormat) {
  ASSERT_EQ(run_rc_, 0);
  const ftp::Artifacts a{out()};
  for (const auto& p : {a.stage1(), a.stage3()}) {
    const auto j = read_json(p);
    const auto c = ftp::sparsity_from_json(j);
    EXPECT_NEAR(c.mean(), 0.3, 1e-9);
    EXPECT_EQ(c.ratios.front(), 0.0);
    EXPECT_EQ(c.ratios.back(), 0.0);
    // block id -> ratio, zero blocks omitted
    EXPECT_FALSE(j["blocks"].contains("0"));
    EXPECT_FALSE(j["blocks"].contains("4"));
    for (std::size_t i = 0; i < c.n_blocks(); ++i) {
      const auto key = std::to_string(i);
      if (c.ratios[i] != 0.0) {
        EXPECT_EQ(j["blocks"][key].get<double>(), c.ratios[i]);
      } else {
        EXPECT_FALSE(j["blocks"].contains(key));
      }
    }
  }
}

TEST_F(CliPipeline, RefinedFitnessAtLeastSeedUnderDynamicRouter) {
  ASSERT_EQ(run_rc_, 0);
  // Stage 3 is seeded with the stage-1 config and is elitist.
  const ftp::Artifacts a{out()};
  const auto w = ftp::load_model(a.model());
  const auto router = ftp::load_router(a.router());
  const auto cfg = ftp::load_pipeline_config(cfg_path_);
  const auto corpus = ftp::load_corpus(cfg);
  const auto val = ftp::search_set(cfg, corpus);
  const auto r = ftp::Router::dynamic_router(router);
  EXPECT_GE(ftp::evaluate_fitness(ftp::load_sparsity(a.stage3()), w, r, val),
            ftp::evaluate_fitness(ftp::load_sparsity(a.stage1()), w, r, val));
  const auto trace = lines(a.stage3_trace());
  EXPECT_EQ(trace.size(), 1u + 3u);
}

TEST_F(CliPipeline, RouterLossCsvHasOneRowPerStepAndGuideReachesZeroAtHalf) {
  ASSERT_EQ(run_rc_, 0);
  const auto rows = lines(ftp::Artifacts{out()}.router_loss());
  ASSERT_EQ(rows.size(), 1u + 12u);
  EXPECT_EQ(rows[0], "step,L_d,L_s,L_g,lambda_g,total");
  auto lambda_at = [&](std::size_t step) {
    std::stringstream ss(rows[1 + step]);
    std::string f;
    for (int i = 0; i < 5; ++i) std::getline(ss, f, ',');
    return std::stod(f);
  };
  EXPECT_EQ(lambda_at(0), 1.0);
  EXPECT_GT(lambda_at(5), 0.0);
  EXPECT_EQ(lambda_at(6), 0.0);
  EXPECT_EQ(lambda_at(11), 0.0);
}

TEST_F(CliPipeline, EvalDenseRowIsFullRetention) {
  ASSERT_EQ(run_rc_, 0);
  const auto rows = lines(ftp::Artifacts{out()}.eval_csv());
  ASSERT_GE(rows.size(), 2u);
  EXPECT_EQ(rows[0], "config,router,target,accuracy,cross_entropy,retention");
  EXPECT_EQ(rows[1].substr(0, 13), "dense,static,");
  EXPECT_EQ(rows[1].substr(rows[1].rfind(',') + 1), "100");
}

TEST_F(CliPipeline, EvalOfZeroConfigFileReportsFullRetention) {
  ASSERT_EQ(run_rc_, 0);
  const auto dir = kRoot / "zero_eval";
  fs::create_directories(dir);
  fs::copy(out(), dir / "out", fs::copy_options::recursive);
  const auto zero = dir / "zero.json";
  ftp::save_sparsity(zero, ftp::SparsityConfig::zeros(5));
  auto j = tiny_config(dir / "out");
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(ftp_cmd("eval -c " + cfg.string() + " --sparsity " + zero.string() + " --router dynamic"), 0);
  const auto rows = lines(dir / "out" / "eval.csv");
  EXPECT_EQ(rows.back().substr(0, 15), "custom,dynamic,");
  EXPECT_EQ(rows.back().substr(rows.back().rfind(',') + 1), "100");
}

TEST_F(CliPipeline, StrictDecodeRecordsDepthSparsityPerToken) {
  ASSERT_EQ(run_rc_, 0);
  const auto rows = lines(ftp::Artifacts{out()}.decode_csv("strict"));
  ASSERT_EQ(rows.size(), 1u + 11u);  // every generated token after the first comes from a decode step
  EXPECT_EQ(rows[0], "step,position,input_token,depth_sparsity,skipped_blocks,gates");
  const std::size_t K = ftp::strict_skip_target(0.3, 3);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::stringstream ss(rows[i]);
    std::vector<std::string> f;
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 6u);
    EXPECT_EQ(std::stoul(f[4]), K);
    EXPECT_NEAR(std::stod(f[3]), static_cast<double>(K) / 3.0, 1e-5);
    EXPECT_EQ(f[5].front(), '1');
    EXPECT_EQ(f[5].back(), '1');
  }
}

TEST(Cli, DecodeFlagsOverrideStrategyAndTarget) {
  const auto dir = kRoot / "decode_flags";
  const auto cfg = write_config(dir, tiny_config(dir / "out"));
  ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 2"), 0);
  ASSERT_EQ(ftp_cmd("search-static -c " + cfg.string() + " --ga.generations 0"), 0);
  ASSERT_EQ(ftp_cmd("decode -c " + cfg.string() + " --decode.router static --strategy strict --target 0.7"), 0);
  const auto rows = lines(dir / "out" / "decode_strict.csv");
  ASSERT_GT(rows.size(), 1u);
  EXPECT_NE(rows[1].find(",2,"), std::string::npos);  // skip_count(3, 0.7) = 2
  ASSERT_EQ(ftp_cmd("decode -c " + cfg.string() + " --decode.router static --strategy dense"), 0);
  for (const auto& r : lines(dir / "out" / "decode_dense.csv"))
    if (r[0] != 's') {
      EXPECT_EQ(r.substr(r.rfind(',') + 1), "11111");
    }
}

TEST(Cli, MissingCorpusIsConfigError) {
  auto j = tiny_config(kRoot / "missing" / "out");
  j["corpus"]["path"] = (kRoot / "does_not_exist.tok").string();
  const auto cfg = write_config(kRoot / "missing", j);
  EXPECT_EQ(ftp_cmd("pretrain -c " + cfg.string()), 2);
}

TEST(Cli, ConfigErrorsExitWithTwo) {
  const auto dir = kRoot / "bad";
  const auto cfg = write_config(dir, tiny_config(dir / "out"));
  EXPECT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.stpes 3"), 2);
  EXPECT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --target 1.0"), 2);
  EXPECT_EQ(ftp_cmd("pretrain -c " + (dir / "nope.json").string()), 2);
  EXPECT_EQ(ftp_cmd("search-static -c " + cfg.string()), 2);  // no checkpoint yet
  EXPECT_EQ(ftp_cmd("pretrain -c " + cfg.string(), "FTP_SEED=abc"), 2);
  EXPECT_EQ(ftp_cmd("frobnicate"), 2);
}

TEST(Cli, CorruptCheckpointIsIoError) {
  const auto dir = kRoot / "corrupt";
  const auto cfg = write_config(dir, tiny_config(dir / "out"));
  fs::create_directories(dir / "out");
  std::ofstream(dir / "out" / "model.ckpt") << "not a checkpoint";
  EXPECT_EQ(ftp_cmd("search-static -c " + cfg.string()), 4);
}

TEST(Cli, ExternalTokenFileCorpus) {
  const auto dir = kRoot / "tokfile";
  fs::create_directories(dir);
  ftp::SyntheticCorpusOptions o;
  o.vocab_size = 32;
  o.n_tokens = 4000;
  o.copy_window = 12;
  o.copy_len = 4;
  const auto tokens = ftp::generate_synthetic_corpus(o);
  ftp::write_token_file(dir / "corpus.tok", tokens);
  auto j = tiny_config(dir / "out");
  j["corpus"]["path"] = (dir / "corpus.tok").string();
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 2"), 0);
  const auto m = read_json(dir / "out" / "manifests" / "pretrain.json");
  EXPECT_EQ(m["inputs"][0]["path"], "corpus:" + (dir / "corpus.tok").string());

  auto bad = tokens;
  bad[10] = 40;  // outside the 32-symbol vocabulary
  ftp::write_token_file(dir / "bad.tok", bad);
  EXPECT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --corpus.path " + (dir / "bad.tok").string()), 2);
}

TEST(Cli, RerunWithSameSeedGivesIdenticalCheckpoint) {
  std::string hashes[2];
  for (int r = 0; r < 2; ++r) {
    const auto dir = kRoot / ("rerun" + std::to_string(r));
    const auto cfg = write_config(dir, tiny_config(dir / "out"));
    ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 5"), 0);
    hashes[r] = ftp::file_hash(dir / "out" / "model.ckpt");
  }
  EXPECT_EQ(hashes[0], hashes[1]);
}

TEST(Cli, FtpSeedOverridesConfigSeed) {
  const auto dir = kRoot / "envseed";
  const auto cfg = write_config(dir, tiny_config(dir / "out"));
  ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 3", "FTP_SEED=7"), 0);
  const auto same = ftp::file_hash(dir / "out" / "model.ckpt");
  ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 3", "FTP_SEED=8"), 0);
  const auto other = ftp::file_hash(dir / "out" / "model.ckpt");
  EXPECT_NE(same, other);
  EXPECT_EQ(read_json(dir / "out" / "manifests" / "pretrain.json")["config"]["seed"], 8);
  ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 3"), 0);
  EXPECT_EQ(ftp::file_hash(dir / "out" / "model.ckpt"), same);  // config seed is 7
}

TEST(Cli, ZeroTargetSearchEmitsAllZeroConfig) {
  const auto dir = kRoot / "pzero";
  const auto cfg = write_config(dir, tiny_config(dir / "out"));
  ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 2"), 0);
  ASSERT_EQ(ftp_cmd("search-static -c " + cfg.string() + " --target 0 --ga.generations 1"), 0);
  const auto j = read_json(dir / "out" / "sparsity_stage1.json");
  EXPECT_EQ(ftp::sparsity_from_json(j), ftp::SparsityConfig::zeros(5));
  EXPECT_TRUE(j["blocks"].empty());
}

TEST(Cli, ZeroStepRouterTrainingEmitsInitialRouter) {
  const auto dir = kRoot / "router0";
  const auto cfg = write_config(dir, tiny_config(dir / "out"));
  ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 2"), 0);
  ASSERT_EQ(ftp_cmd("search-static -c " + cfg.string() + " --ga.generations 0"), 0);
  ASSERT_EQ(ftp_cmd("train-router -c " + cfg.string() + " --router.steps 0"), 0);
  const auto init = ftp::DynamicRouterWeights::init(ftp::stage_seed(7, "router-init"));
  EXPECT_EQ(slurp(dir / "out" / "router.ckpt"), ftp::serialize_router(init));
  EXPECT_EQ(lines(dir / "out" / "router_loss.csv").size(), 1u);
}

TEST(Cli, UndeclaredFilesDoNotAffectStages) {
  const auto dir = kRoot / "isolation";
  const auto cfg = write_config(dir, tiny_config(dir / "out"));
  const ftp::Artifacts a{dir / "out"};
  ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 3"), 0);
  ASSERT_EQ(ftp_cmd("search-static -c " + cfg.string() + " --ga.generations 1"), 0);
  const auto first = slurp(a.stage1());
  // Only model.ckpt is declared; everything else may go.
  fs::remove(a.pretrain_loss());
  fs::remove(a.stage1_trace());
  fs::remove_all(a.manifests());
  std::ofstream(a.router()) << "junk";
  ASSERT_EQ(ftp_cmd("search-static -c " + cfg.string() + " --ga.generations 1"), 0);
  EXPECT_EQ(slurp(a.stage1()), first);
}

TEST(Cli, SearchDynamicIsDeterministic) {
  const auto dir = kRoot / "dyn_det";
  const auto cfg = write_config(dir, tiny_config(dir / "out"));
  const ftp::Artifacts a{dir / "out"};
  ASSERT_EQ(ftp_cmd("pretrain -c " + cfg.string() + " --pretrain.steps 3"), 0);
  ASSERT_EQ(ftp_cmd("search-static -c " + cfg.string() + " --ga.generations 1"), 0);
  ASSERT_EQ(ftp_cmd("train-router -c " + cfg.string() + " --router.steps 3"), 0);
  ASSERT_EQ(ftp_cmd("search-dynamic -c " + cfg.string() + " --ga.generations 1"), 0);
  const auto first = slurp(a.stage3());
  ASSERT_EQ(ftp_cmd("search-dynamic -c " + cfg.string() + " --ga.generations 1 --ga.threads 3"), 0);
  EXPECT_EQ(slurp(a.stage3()), first);
  EXPECT_NEAR(ftp::load_sparsity(a.stage3()).mean(), 0.3, 1e-9);
}

TEST(Cli, SecondRoundContinuesFromRefinedConfig) {
  const auto dir = kRoot / "rounds";
  auto j = tiny_config(dir / "out");
  j["pretrain"]["steps"] = 3;
  j["router"]["steps"] = 3;
  j["ga"]["generations"] = 1;
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(ftp_cmd("run -c " + cfg.string() + " --rounds 2"), 0);
  const ftp::Artifacts a{dir / "out"};
  const auto m = read_json(a.manifest("train-router.round2"));
  bool saw_round1 = false, saw_router = false;
  for (const auto& in : m["inputs"]) {
    const auto p = in["path"].get<std::string>();
    saw_round1 |= p.find("sparsity_stage3.round1.json") != std::string::npos;
    saw_router |= p.find("router.ckpt") != std::string::npos;
  }
  EXPECT_TRUE(saw_round1);
  EXPECT_TRUE(saw_router);
  EXPECT_TRUE(fs::exists(a.manifest("search-dynamic.round2")));
  EXPECT_NEAR(ftp::load_sparsity(a.stage3()).mean(), 0.3, 1e-9);
}
