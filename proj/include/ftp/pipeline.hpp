// SPDX-License-Identifier: Apache-2.0
//
// The staged pipeline behind the `ftp` command: configuration, artifact
// layout, per-stage drivers and run manifests.
//
// Every stage reads only the artifacts it declares and writes its outputs
// plus a manifest under <out_dir>. Stage seeds are derived from the global
// seed, so one number (or FTP_SEED) fixes a whole run.
#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ftp/analysis.hpp"
#include "ftp/checkpoint.hpp"
#include "ftp/pretrain.hpp"
#include "ftp/router_training.hpp"
#include "ftp/scheduler.hpp"

namespace ftp {

using nlohmann::json;

struct CorpusSettings {
  std::string path;  // u16 LE token file; empty selects the synthetic generator
  SyntheticCorpusOptions synthetic;
  double train_frac = 0.8;
  double validation_frac = 0.1;
};

struct EvalSettings {
  std::size_t search_sequences = 16;  // validation windows scored by the GA
  std::size_t test_sequences = 64;    // test windows for reported metrics
  std::size_t seq_len = 64;
};

struct AnalysisSettings {
  std::size_t sequences = 50;
  std::size_t seq_len = 64;
  double threshold = 0.8;
  std::vector<std::size_t> speedup_lengths{128, 256, 512, 1024};
  std::vector<double> speedup_targets{0.3, 0.4};
  std::size_t wall_clock_length = 512;
  std::size_t wall_clock_runs = 11;
};

struct DecodeSettings {
  std::size_t prompt_len = 16;
  std::size_t new_tokens = 64;
  std::string strategy = "strict";  // dense | threshold | strict
  std::string router = "dynamic";   // static | dynamic
  double threshold = 0.5;
  double target = 0.3;
};

struct PipelineConfig {
  std::uint64_t seed = 1234;
  double target = 0.3;
  std::string out_dir = "runs/default";
  std::size_t rounds = 1;
  CorpusSettings corpus;
  ModelConfig model;
  PretrainConfig pretrain{.steps = 1500, .lr = 3e-3, .seq_len = 64, .batch_size = 4};
  GAConfig ga;
  TrainingConfig router{.steps = 3000, .batch_size = 1, .seq_len = 64, .lr = 1e-3};
  // The distillation MSE on raw final hidden states is ~4 at the start and
  // its gradient swamps the guide term at weight 1.
  LossWeights loss{.lambda_d = 1e-3};
  EvalSettings eval;
  AnalysisSettings analysis;
  DecodeSettings decode;

  void validate() const {
    model.validate();
    ga.validate();
    router.validate();
    loss.validate();
    if (!(target >= 0.0 && target < 1.0)) throw ConfigError("target sparsity must be in [0, 1)");
    check_budget(model.n_blocks, target, ga.s_max);
    if (rounds == 0) throw ConfigError("rounds must be at least 1");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
    if (!corpus.path.empty() && !std::filesystem::exists(corpus.path)) {
      throw ConfigError("corpus file does not exist: " + corpus.path);
    }
    if (!(corpus.train_frac > 0.0 && corpus.validation_frac > 0.0 && corpus.train_frac + corpus.validation_frac < 1.0))
      throw ConfigError("corpus split fractions must be positive and sum below 1");
    if (pretrain.seq_len > model.max_seq_len || router.seq_len > model.max_seq_len || eval.seq_len > model.max_seq_len ||
        analysis.seq_len > model.max_seq_len)
      throw ConfigError("a sequence length exceeds model.max_seq_len");
    if (decode.prompt_len == 0) throw ConfigError("decode.prompt_len must be positive");
    if (decode.prompt_len + decode.new_tokens > model.max_seq_len + 1)
      throw ConfigError("decode prompt plus new tokens exceed model.max_seq_len");
    if (decode.router != "static" && decode.router != "dynamic") throw ConfigError("decode.router must be static or dynamic");
    parse_strategy(decode.strategy);
  }

  static DecodeStrategy parse_strategy(const std::string& s) {
    if (s == "dense") return DecodeStrategy::Dense;
    if (s == "threshold") return DecodeStrategy::Threshold;
    if (s == "strict") return DecodeStrategy::Strict;
    throw ConfigError("unknown decode strategy '" + s + "' (dense, threshold, strict)");
  }
};

inline json to_json(const PipelineConfig& c) {
  const auto& s = c.corpus.synthetic;
  return {
      {"seed", c.seed},
      {"target", c.target},
      {"out_dir", c.out_dir},
      {"rounds", c.rounds},
      {"corpus",
       {{"path", c.corpus.path},
        {"train_frac", c.corpus.train_frac},
        {"validation_frac", c.corpus.validation_frac},
        {"synthetic",
         {{"n_tokens", s.n_tokens},
          {"seed", s.seed},
          {"follow_prob", s.follow_prob},
          {"copy_prob", s.copy_prob},
          {"copy_len", s.copy_len},
          {"copy_window", s.copy_window}}}}},
      {"model", to_json(c.model)},
      {"pretrain",
       {{"steps", c.pretrain.steps},
        {"lr", c.pretrain.lr},
        {"seq_len", c.pretrain.seq_len},
        {"batch_size", c.pretrain.batch_size},
        {"weight_decay", c.pretrain.weight_decay},
        {"clip_norm", c.pretrain.clip_norm}}},
      {"ga",
       {{"population_size", c.ga.population_size},
        {"generations", c.ga.generations},
        {"mutation_prob", c.ga.mutation_prob},
        {"s_max", c.ga.s_max},
        {"mutation_step", c.ga.mutation_step},
        {"tournament_size", c.ga.tournament_size},
        {"elite_fraction", c.ga.elite_fraction},
        {"threads", c.ga.threads}}},
      {"router",
       {{"steps", c.router.steps},
        {"batch_size", c.router.batch_size},
        {"seq_len", c.router.seq_len},
        {"lr", c.router.lr},
        {"weight_decay", c.router.weight_decay},
        {"clip_norm", c.router.clip_norm}}},
      {"loss",
       {{"lambda_d", c.loss.lambda_d},
        {"lambda_s", c.loss.lambda_s},
        {"lambda_g", c.loss.lambda_g},
        {"guide_horizon", c.loss.guide_horizon}}},
      {"eval",
       {{"search_sequences", c.eval.search_sequences},
        {"test_sequences", c.eval.test_sequences},
        {"seq_len", c.eval.seq_len}}},
      {"analysis",
       {{"sequences", c.analysis.sequences},
        {"seq_len", c.analysis.seq_len},
        {"threshold", c.analysis.threshold},
        {"speedup_lengths", c.analysis.speedup_lengths},
        {"speedup_targets", c.analysis.speedup_targets},
        {"wall_clock_length", c.analysis.wall_clock_length},
        {"wall_clock_runs", c.analysis.wall_clock_runs}}},
      {"decode",
       {{"prompt_len", c.decode.prompt_len},
        {"new_tokens", c.decode.new_tokens},
        {"strategy", c.decode.strategy},
        {"router", c.decode.router},
        {"threshold", c.decode.threshold},
        {"target", c.decode.target}}},
  };
}

namespace detail {

/// Rejects keys that the default schema does not have, so typos fail loudly.
inline void check_known_keys(const json& schema, const json& j, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (schema[key].is_object()) check_known_keys(schema[key], value, path);
  }
}

template <class T>
void read_field(const json& j, const char* section, const char* key, T& out) {
  try {
    j.at(section).at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field ") + section + "." + key + ": " + e.what());
  }
}

}  // namespace detail

/// Full config from a (possibly partial) JSON document layered on the
/// defaults.
inline PipelineConfig pipeline_config_from_json(const json& patch) {
  const PipelineConfig defaults;
  json j = to_json(defaults);
  detail::check_known_keys(j, patch, "");
  j.merge_patch(patch);
  PipelineConfig c;
  try {
    j.at("seed").get_to(c.seed);
    j.at("target").get_to(c.target);
    j.at("out_dir").get_to(c.out_dir);
    j.at("rounds").get_to(c.rounds);
    j.at("corpus").at("synthetic").at("n_tokens").get_to(c.corpus.synthetic.n_tokens);
    j.at("corpus").at("synthetic").at("seed").get_to(c.corpus.synthetic.seed);
    j.at("corpus").at("synthetic").at("follow_prob").get_to(c.corpus.synthetic.follow_prob);
    j.at("corpus").at("synthetic").at("copy_prob").get_to(c.corpus.synthetic.copy_prob);
    j.at("corpus").at("synthetic").at("copy_len").get_to(c.corpus.synthetic.copy_len);
    j.at("corpus").at("synthetic").at("copy_window").get_to(c.corpus.synthetic.copy_window);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  using detail::read_field;
  read_field(j, "corpus", "path", c.corpus.path);
  read_field(j, "corpus", "train_frac", c.corpus.train_frac);
  read_field(j, "corpus", "validation_frac", c.corpus.validation_frac);
  c.model = model_config_from_json(j.at("model"));
  c.corpus.synthetic.vocab_size = c.model.vocab_size;
  read_field(j, "pretrain", "steps", c.pretrain.steps);
  read_field(j, "pretrain", "lr", c.pretrain.lr);
  read_field(j, "pretrain", "seq_len", c.pretrain.seq_len);
  read_field(j, "pretrain", "batch_size", c.pretrain.batch_size);
  read_field(j, "pretrain", "weight_decay", c.pretrain.weight_decay);
  read_field(j, "pretrain", "clip_norm", c.pretrain.clip_norm);
  read_field(j, "ga", "population_size", c.ga.population_size);
  read_field(j, "ga", "generations", c.ga.generations);
  read_field(j, "ga", "mutation_prob", c.ga.mutation_prob);
  read_field(j, "ga", "s_max", c.ga.s_max);
  read_field(j, "ga", "mutation_step", c.ga.mutation_step);
  read_field(j, "ga", "tournament_size", c.ga.tournament_size);
  read_field(j, "ga", "elite_fraction", c.ga.elite_fraction);
  read_field(j, "ga", "threads", c.ga.threads);
  read_field(j, "router", "steps", c.router.steps);
  read_field(j, "router", "batch_size", c.router.batch_size);
  read_field(j, "router", "seq_len", c.router.seq_len);
  read_field(j, "router", "lr", c.router.lr);
  read_field(j, "router", "weight_decay", c.router.weight_decay);
  read_field(j, "router", "clip_norm", c.router.clip_norm);
  read_field(j, "loss", "lambda_d", c.loss.lambda_d);
  read_field(j, "loss", "lambda_s", c.loss.lambda_s);
  read_field(j, "loss", "lambda_g", c.loss.lambda_g);
  read_field(j, "loss", "guide_horizon", c.loss.guide_horizon);
  read_field(j, "eval", "search_sequences", c.eval.search_sequences);
  read_field(j, "eval", "test_sequences", c.eval.test_sequences);
  read_field(j, "eval", "seq_len", c.eval.seq_len);
  read_field(j, "analysis", "sequences", c.analysis.sequences);
  read_field(j, "analysis", "seq_len", c.analysis.seq_len);
  read_field(j, "analysis", "threshold", c.analysis.threshold);
  read_field(j, "analysis", "speedup_lengths", c.analysis.speedup_lengths);
  read_field(j, "analysis", "speedup_targets", c.analysis.speedup_targets);
  read_field(j, "analysis", "wall_clock_length", c.analysis.wall_clock_length);
  read_field(j, "analysis", "wall_clock_runs", c.analysis.wall_clock_runs);
  read_field(j, "decode", "prompt_len", c.decode.prompt_len);
  read_field(j, "decode", "new_tokens", c.decode.new_tokens);
  read_field(j, "decode", "strategy", c.decode.strategy);
  read_field(j, "decode", "router", c.decode.router);
  read_field(j, "decode", "threshold", c.decode.threshold);
  read_field(j, "decode", "target", c.decode.target);
  return c;
}

/// Applies a dotted-key override such as ("ga.generations", "20") to a JSON
/// patch. The value is parsed as JSON when it is valid JSON, else taken as a
/// string.
inline void apply_override(json& patch, const std::string& dotted, const std::string& value) {
  if (dotted.empty()) throw ConfigError("empty override key");
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  json* node = &patch;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const auto key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("malformed override key '" + dotted + "'");
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      break;
    }
    node = &(*node)[key];
    if (!node->is_object()) *node = json::object();
    start = dot + 1;
  }
}

/// File (optional), then overrides, then FTP_SEED.
inline PipelineConfig load_pipeline_config(const std::optional<std::filesystem::path>& file,
                                           const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  json patch = json::object();
  if (file) {
    if (!std::filesystem::exists(*file)) throw ConfigError("config file does not exist: " + file->string());
    patch = json::parse(detail::read_file(*file), nullptr, false);
    if (patch.is_discarded()) throw ConfigError("config file is not valid JSON: " + file->string());
  }
  for (const auto& [k, v] : overrides) apply_override(patch, k, v);
  if (const char* env = std::getenv("FTP_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      patch["seed"] = std::stoull(env, &used);
      if (env[used] != '\0') throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError(std::string("FTP_SEED is not an unsigned integer: ") + env);
    }
  }
  auto c = pipeline_config_from_json(patch);
  c.validate();
  return c;
}

inline std::uint64_t stage_seed(std::uint64_t global, std::string_view stage) {
  return fnv1a64(stage, fnv1a64(std::to_string(global)));
}

// ---------------------------------------------------------------------------
// Artifact layout

struct Artifacts {
  std::filesystem::path dir;

  std::filesystem::path model() const { return dir / "model.ckpt"; }
  std::filesystem::path pretrain_loss() const { return dir / "pretrain_loss.csv"; }
  std::filesystem::path stage1() const { return dir / "sparsity_stage1.json"; }
  std::filesystem::path stage1_trace() const { return dir / "ga_stage1.csv"; }
  std::filesystem::path router() const { return dir / "router.ckpt"; }
  std::filesystem::path router_loss() const { return dir / "router_loss.csv"; }
  std::filesystem::path stage3() const { return dir / "sparsity_stage3.json"; }
  std::filesystem::path stage3_trace() const { return dir / "ga_stage3.csv"; }
  std::filesystem::path eval_csv() const { return dir / "eval.csv"; }
  std::filesystem::path redundancy_csv() const { return dir / "redundancy.csv"; }
  std::filesystem::path redundancy_hist_csv() const { return dir / "redundancy_hist.csv"; }
  std::filesystem::path speedup_csv() const { return dir / "speedup.csv"; }
  std::filesystem::path decode_csv(const std::string& strategy) const { return dir / ("decode_" + strategy + ".csv"); }
  std::filesystem::path report() const { return dir / "report.json"; }
  std::filesystem::path manifests() const { return dir / "manifests"; }
  std::filesystem::path manifest(const std::string& stage) const { return manifests() / (stage + ".json"); }
};

// ---------------------------------------------------------------------------
// Manifests

class ManifestBuilder {
 public:
  ManifestBuilder(std::string stage, const PipelineConfig& c)
      : start_(std::chrono::steady_clock::now()) {
    doc_ = {{"stage", std::move(stage)},
            {"config", to_json(c)},
            {"inputs", json::array()},
            {"outputs", json::array()},
            {"metrics", json::object()}};
  }

  void input(const std::filesystem::path& p) {
    doc_["inputs"].push_back({{"path", p.string()}, {"hash", file_hash(p)}});
  }
  void input_bytes(const std::string& label, const std::string& hash) {
    doc_["inputs"].push_back({{"path", label}, {"hash", hash}});
  }
  void output(const std::filesystem::path& p) {
    doc_["outputs"].push_back({{"path", p.string()}, {"hash", file_hash(p)}});
  }
  json& metrics() { return doc_["metrics"]; }

  json finish(const std::filesystem::path& where) {
    doc_["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    detail::write_file(where, doc_.dump(2) + "\n");
    return doc_;
  }

 private:
  json doc_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Shared inputs

struct LoadedCorpus {
  CorpusSplits splits;
  std::string label;
  std::string hash;
};

inline LoadedCorpus load_corpus(const PipelineConfig& c) {
  std::vector<TokenId> stream;
  LoadedCorpus out;
  if (c.corpus.path.empty()) {
    auto opt = c.corpus.synthetic;
    opt.vocab_size = c.model.vocab_size;
    stream = generate_synthetic_corpus(opt);
    out.label = "synthetic";
  } else {
    if (!std::filesystem::exists(c.corpus.path)) throw ConfigError("corpus file does not exist: " + c.corpus.path);
    stream = read_token_file(c.corpus.path);
    out.label = c.corpus.path;
    for (auto t : stream)
      if (t >= c.model.vocab_size) throw ConfigError("corpus token id exceeds model.vocab_size");
  }
  std::string bytes(stream.size() * 2, '\0');
  for (std::size_t i = 0; i < stream.size(); ++i) {
    bytes[2 * i] = static_cast<char>(stream[i] & 0xFF);
    bytes[2 * i + 1] = static_cast<char>(stream[i] >> 8);
  }
  out.hash = hex64(fnv1a64(bytes));
  out.splits = split_corpus(stream, c.corpus.train_frac, c.corpus.validation_frac);
  return out;
}

inline EvalSet search_set(const PipelineConfig& c, const LoadedCorpus& corpus) {
  auto s = make_eval_set(corpus.splits.validation, c.eval.search_sequences, c.eval.seq_len);
  if (s.empty()) throw ConfigError("validation split too short for one search sequence");
  return s;
}

inline EvalSet test_set(const PipelineConfig& c, const LoadedCorpus& corpus) {
  auto s = make_eval_set(corpus.splits.test, c.eval.test_sequences, c.eval.seq_len);
  if (s.empty()) throw ConfigError("test split too short for one evaluation sequence");
  return s;
}

inline void require_artifact(const std::filesystem::path& p, const std::string& producer) {
  if (!std::filesystem::exists(p)) {
    throw ConfigError("missing input artifact " + p.string() + " (run `ftp " + producer + "` first)");
  }
}

inline ModelWeights load_model_checked(const PipelineConfig& c, const std::filesystem::path& p) {
  require_artifact(p, "pretrain");
  auto w = load_model(p);
  if (!(w.config == c.model)) throw ConfigError("checkpoint model config differs from the pipeline config");
  return w;
}

inline void write_ga_trace(const std::filesystem::path& p, const SearchResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "generation,best_fitness\n";
  for (std::size_t g = 0; g < r.best_trace.size(); ++g) os << g << ',' << r.best_trace[g] << '\n';
  detail::write_file(p, os.str());
}

// ---------------------------------------------------------------------------
// Stages

inline json stage_pretrain(const PipelineConfig& c) {
  const Artifacts a{c.out_dir};
  ManifestBuilder m("pretrain", c);
  const auto corpus = load_corpus(c);
  m.input_bytes("corpus:" + corpus.label, corpus.hash);
  auto pc = c.pretrain;
  pc.seed = stage_seed(c.seed, "pretrain");
  const auto heldout = search_set(c, corpus);
  auto res = pretrain_dense(c.model, corpus.splits.train, pc, heldout);
  save_model(a.model(), res.weights);
  {
    std::ostringstream os;
    os.precision(17);
    os << "step,loss\n";
    for (std::size_t i = 0; i < res.train_loss.size(); ++i) os << i << ',' << res.train_loss[i] << '\n';
    detail::write_file(a.pretrain_loss(), os.str());
  }
  m.output(a.model());
  m.output(a.pretrain_loss());
  auto& met = m.metrics();
  met["initial_heldout_loss"] = res.initial_heldout_loss;
  met["final_heldout_loss"] = res.final_heldout_loss;
  met["uniform_baseline_loss"] = std::log(static_cast<double>(c.model.vocab_size));
  met["heldout_accuracy"] = evaluate_dense(res.weights, heldout).accuracy;
  return m.finish(a.manifest("pretrain"));
}

inline json stage_search_static(const PipelineConfig& c) {
  const Artifacts a{c.out_dir};
  ManifestBuilder m("search-static", c);
  const auto w = load_model_checked(c, a.model());
  m.input(a.model());
  const auto corpus = load_corpus(c);
  m.input_bytes("corpus:" + corpus.label, corpus.hash);
  auto ga = c.ga;
  ga.seed = stage_seed(c.seed, "search-static");
  const auto res = ga_search(ga, w, Router::static_router(), c.target, search_set(c, corpus));
  save_sparsity(a.stage1(), res.best.config);
  write_ga_trace(a.stage1_trace(), res);
  m.output(a.stage1());
  m.output(a.stage1_trace());
  m.metrics()["best_fitness"] = *res.best.fitness;
  m.metrics()["evaluations"] = res.evaluations;
  return m.finish(a.manifest("search-static"));
}

/// `init_router` continues from an earlier router (later rounds); otherwise
/// a fresh seeded router is trained.
inline json stage_train_router(const PipelineConfig& c, const std::filesystem::path& sparsity,
                               const std::optional<std::filesystem::path>& init_router = std::nullopt,
                               const std::string& manifest_name = "train-router") {
  const Artifacts a{c.out_dir};
  ManifestBuilder m(manifest_name, c);
  const auto w = load_model_checked(c, a.model());
  m.input(a.model());
  require_artifact(sparsity, "search-static");
  const auto config = load_sparsity(sparsity);
  if (config.n_blocks() != c.model.n_blocks) throw ConfigError("sparsity config does not match model depth");
  m.input(sparsity);
  DynamicRouterWeights init;
  if (init_router) {
    require_artifact(*init_router, "train-router");
    init = load_router(*init_router);
    m.input(*init_router);
  } else {
    init = DynamicRouterWeights::init(stage_seed(c.seed, "router-init"));
  }
  const auto corpus = load_corpus(c);
  m.input_bytes("corpus:" + corpus.label, corpus.hash);
  auto tc = c.router;
  tc.seed = stage_seed(c.seed, manifest_name);
  const auto res = train_router(w, init, config, corpus.splits.train, tc, c.loss);
  save_router(a.router(), res.router);
  write_loss_csv(a.router_loss(), res.trace);
  m.output(a.router());
  m.output(a.router_loss());
  if (!res.trace.empty()) {
    const auto& last = res.trace.back();
    m.metrics()["final"] = {{"L_d", last.l_d}, {"L_s", last.l_s}, {"L_g", last.l_g}, {"total", last.total}};
  }
  return m.finish(a.manifest(manifest_name));
}

/// Stage-3 search with the trained router, seeded with `seed_config`.
inline json stage_search_dynamic(const PipelineConfig& c, const std::filesystem::path& seed_config,
                                 const std::string& manifest_name = "search-dynamic") {
  const Artifacts a{c.out_dir};
  ManifestBuilder m(manifest_name, c);
  const auto w = load_model_checked(c, a.model());
  m.input(a.model());
  require_artifact(a.router(), "train-router");
  const auto router = load_router(a.router());
  m.input(a.router());
  require_artifact(seed_config, "search-static");
  const auto seed = load_sparsity(seed_config);
  m.input(seed_config);
  const auto corpus = load_corpus(c);
  m.input_bytes("corpus:" + corpus.label, corpus.hash);
  auto ga = c.ga;
  ga.seed = stage_seed(c.seed, manifest_name);
  const auto res = ga_search(ga, w, Router::dynamic_router(router), c.target, search_set(c, corpus), {seed});
  save_sparsity(a.stage3(), res.best.config);
  write_ga_trace(a.stage3_trace(), res);
  m.output(a.stage3());
  m.output(a.stage3_trace());
  m.metrics()["best_fitness"] = *res.best.fitness;
  m.metrics()["evaluations"] = res.evaluations;
  return m.finish(a.manifest(manifest_name));
}

struct EvalRow {
  std::string name;
  std::string router;
  double target = 0.0;
  EvalMetrics metrics;
  double retention = 0.0;
};

/// Test-split retention for every available (config, router) pairing, plus
/// validation fitness of the searched configs.
/// `extra` adds one row for a user-supplied config.
inline json stage_eval(const PipelineConfig& c, const std::optional<std::filesystem::path>& extra = std::nullopt,
                       const std::string& extra_router = "static") {
  const Artifacts a{c.out_dir};
  ManifestBuilder m("eval", c);
  const auto w = load_model_checked(c, a.model());
  m.input(a.model());
  const auto corpus = load_corpus(c);
  m.input_bytes("corpus:" + corpus.label, corpus.hash);
  const auto test = test_set(c, corpus);
  const auto val = search_set(c, corpus);

  std::optional<SparsityConfig> s1, s3, custom;
  std::optional<DynamicRouterWeights> dyn;
  if (std::filesystem::exists(a.stage1())) {
    s1 = load_sparsity(a.stage1());
    m.input(a.stage1());
  }
  if (std::filesystem::exists(a.router())) {
    dyn = load_router(a.router());
    m.input(a.router());
  }
  if (std::filesystem::exists(a.stage3())) {
    s3 = load_sparsity(a.stage3());
    m.input(a.stage3());
  }
  if (extra) {
    require_artifact(*extra, "search-static");
    custom = load_sparsity(*extra);
    if (custom->n_blocks() != c.model.n_blocks) throw ConfigError("sparsity config does not match model depth");
    m.input(*extra);
    if (extra_router == "dynamic" && !dyn) throw ConfigError("--router dynamic needs " + a.router().string());
  }

  const auto dense = evaluate_dense(w, test);
  std::vector<EvalRow> rows;
  auto add = [&](std::string name, const SparsityConfig& cfg, bool dynamic) {
    const auto r = dynamic ? Router::dynamic_router(*dyn) : Router::static_router();
    EvalRow row{std::move(name), dynamic ? "dynamic" : "static", cfg.target, evaluate_routed(w, r, cfg, test), 0.0};
    row.retention = retention_from(dense.accuracy, row.metrics.accuracy).retention;
    rows.push_back(row);
  };
  const auto uniform = SparsityConfig::uniform_schedulable(c.model.n_blocks, c.target);
  add("dense", SparsityConfig::zeros(c.model.n_blocks), false);
  add("uniform", uniform, false);
  if (dyn) add("uniform", uniform, true);
  if (s1) add("stage1", *s1, false);
  if (s1 && dyn) add("stage1", *s1, true);
  if (s3 && dyn) add("stage3", *s3, true);
  if (custom) add("custom", *custom, extra_router == "dynamic");

  std::ostringstream os;
  os.precision(17);
  os << "config,router,target,accuracy,cross_entropy,retention\n";
  json jrows = json::array();
  for (const auto& r : rows) {
    os << r.name << ',' << r.router << ',' << r.target << ',' << r.metrics.accuracy << ',' << r.metrics.cross_entropy
       << ',' << r.retention << '\n';
    jrows.push_back({{"config", r.name},
                     {"router", r.router},
                     {"target", r.target},
                     {"accuracy", r.metrics.accuracy},
                     {"cross_entropy", r.metrics.cross_entropy},
                     {"retention", r.retention}});
  }
  detail::write_file(a.eval_csv(), os.str());
  m.output(a.eval_csv());
  auto& met = m.metrics();
  met["rows"] = jrows;
  // The refinement is judged under the router it was searched with, so the
  // stage-1 config is scored with the trained router too.
  if (s1) met["stage1_static_fitness"] = evaluate_fitness(*s1, w, Router::static_router(), val);
  if (s1 && dyn) met["stage1_fitness"] = evaluate_fitness(*s1, w, Router::dynamic_router(*dyn), val);
  if (s3 && dyn) met["stage3_fitness"] = evaluate_fitness(*s3, w, Router::dynamic_router(*dyn), val);
  return m.finish(a.manifest("eval"));
}

/// Token redundancy of the trained model on the test split, and FLOPs and
/// wall-clock speedups of uniform configs. Wall clock uses a freshly
/// initialised model long enough for the requested length; timing does not
/// depend on weight values.
inline json stage_analyze(const PipelineConfig& c) {
  const Artifacts a{c.out_dir};
  ManifestBuilder m("analyze", c);
  const auto w = load_model_checked(c, a.model());
  m.input(a.model());
  const auto corpus = load_corpus(c);
  m.input_bytes("corpus:" + corpus.label, corpus.hash);

  const auto red = redundancy_analysis(w, corpus.splits.test, c.analysis.sequences, c.analysis.seq_len,
                                       stage_seed(c.seed, "analyze"), c.analysis.threshold);
  {
    std::ostringstream os;
    os.precision(17);
    os << "block,mean_similarity,fraction_above,fraction_below\n";
    for (std::size_t b = 0; b < red.n_blocks(); ++b)
      os << b << ',' << red.mean[b] << ',' << red.fraction_above[b] << ',' << red.fraction_below[b] << '\n';
    detail::write_file(a.redundancy_csv(), os.str());
    std::ostringstream hs;
    const std::size_t bins = 20;
    hs << "block,bin_low,bin_high,count\n";
    for (std::size_t b = 0; b < red.n_blocks(); ++b) {
      const auto h = red.histogram(b, bins);
      for (std::size_t i = 0; i < bins; ++i)
        hs << b << ',' << -1.0 + 2.0 * i / bins << ',' << -1.0 + 2.0 * (i + 1) / bins << ',' << h[i] << '\n';
    }
    detail::write_file(a.redundancy_hist_csv(), hs.str());
  }

  std::vector<SparsityConfig> configs;
  for (double p : c.analysis.speedup_targets) configs.push_back(SparsityConfig::uniform_schedulable(c.model.n_blocks, p));
  auto rows = speedup_report(c.model, configs, c.analysis.speedup_lengths);
  json wall = json::array();
  if (c.analysis.wall_clock_runs > 0 && c.analysis.wall_clock_length > 0) {
    auto timing_cfg = c.model;
    timing_cfg.max_seq_len = std::max(timing_cfg.max_seq_len, c.analysis.wall_clock_length);
    const auto tw = init_weights(timing_cfg, stage_seed(c.seed, "wall-clock"));
    for (const auto& cfg : configs) {
      const auto wc = measure_wall_clock(tw, cfg, c.analysis.wall_clock_length, c.analysis.wall_clock_runs,
                                         stage_seed(c.seed, "wall-clock"));
      for (auto& r : rows)
        if (r.length == c.analysis.wall_clock_length && r.target == cfg.target) r.measured = wc.ratio;
      wall.push_back({{"length", c.analysis.wall_clock_length},
                      {"target", cfg.target},
                      {"dense_ms", wc.dense_ms},
                      {"routed_ms", wc.routed_ms},
                      {"ratio", wc.ratio}});
    }
  }
  {
    std::ostringstream os;
    os.precision(17);
    os << "length,target,theoretical,measured\n";
    for (const auto& r : rows) os << r.length << ',' << r.target << ',' << r.theoretical << ',' << r.measured << '\n';
    detail::write_file(a.speedup_csv(), os.str());
  }
  m.output(a.redundancy_csv());
  m.output(a.redundancy_hist_csv());
  m.output(a.speedup_csv());
  auto& met = m.metrics();
  met["redundancy"] = {{"mean", red.mean},
                       {"ends_mean", red.ends_mean},
                       {"interior_mean", red.interior_mean},
                       {"first_group_mean", red.first_group_mean},
                       {"middle_group_mean", red.middle_group_mean},
                       {"last_group_mean", red.last_group_mean}};
  met["wall_clock"] = wall;
  return m.finish(a.manifest("analyze"));
}

/// Greedy KV-cached generation from the first prompt_len test tokens. The
/// dynamic router decodes under the stage-3 config, the static one under
/// stage 1, unless `sparsity` names another file.
inline json stage_decode(const PipelineConfig& c, const std::optional<std::filesystem::path>& sparsity = std::nullopt) {
  const Artifacts a{c.out_dir};
  const auto strategy = PipelineConfig::parse_strategy(c.decode.strategy);
  ManifestBuilder m("decode-" + c.decode.strategy, c);
  const auto w = load_model_checked(c, a.model());
  m.input(a.model());
  const bool dynamic = c.decode.router == "dynamic";
  std::optional<DynamicRouterWeights> dyn;
  if (dynamic) {
    require_artifact(a.router(), "train-router");
    dyn = load_router(a.router());
    m.input(a.router());
  }
  const auto cfg_path = sparsity ? *sparsity : (dynamic ? a.stage3() : a.stage1());
  require_artifact(cfg_path, dynamic ? "search-dynamic" : "search-static");
  const auto config = load_sparsity(cfg_path);
  if (config.n_blocks() != c.model.n_blocks) throw ConfigError("sparsity config does not match model depth");
  m.input(cfg_path);
  const auto corpus = load_corpus(c);
  m.input_bytes("corpus:" + corpus.label, corpus.hash);
  if (corpus.splits.test.size() < c.decode.prompt_len) throw ConfigError("test split shorter than decode.prompt_len");
  std::span<const TokenId> prompt(corpus.splits.test.data(), c.decode.prompt_len);

  DecodeOptions opt{strategy, c.decode.threshold, c.decode.target};
  const auto router = dynamic ? Router::dynamic_router(*dyn) : Router::static_router();
  const auto res = kv_decode(w, router, config, prompt, c.decode.new_tokens, opt);

  std::ostringstream os;
  os << "step,position,input_token,depth_sparsity,skipped_blocks,gates\n";
  double sum = 0.0;
  for (std::size_t i = 0; i < res.depth_sparsity.size(); ++i) {
    const auto& g = res.block_gates[i];
    std::string gates;
    std::size_t skipped = 0;
    for (auto b : g) {
      gates += b ? '1' : '0';
      skipped += b == 0;
    }
    os << i + 1 << ',' << prompt.size() + i << ',' << res.generated[i] << ',' << res.depth_sparsity[i] << ','
       << skipped << ',' << gates << '\n';
    sum += res.depth_sparsity[i];
  }
  const auto out = a.decode_csv(c.decode.strategy);
  detail::write_file(out, os.str());
  m.output(out);
  auto& met = m.metrics();
  met["generated"] = res.generated;
  met["mean_depth_sparsity"] = res.depth_sparsity.empty() ? 0.0 : sum / static_cast<double>(res.depth_sparsity.size());
  met["schedulable_blocks"] = schedulable_blocks(c.model.n_blocks);
  return m.finish(a.manifest("decode-" + c.decode.strategy));
}

/// Collects every manifest under <out_dir>/manifests into one document.
inline json stage_report(const PipelineConfig& c) {
  const Artifacts a{c.out_dir};
  if (!std::filesystem::exists(a.manifests())) throw ConfigError("no manifests under " + a.manifests().string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(a.manifests()))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  json stages = json::object();
  double total = 0.0;
  for (const auto& f : files) {
    auto doc = json::parse(detail::read_file(f), nullptr, false);
    if (doc.is_discarded()) throw IoError("manifest is not valid JSON: " + f.string());
    total += doc.value("wall_time_s", 0.0);
    stages[doc.value("stage", f.stem().string())] = {{"manifest", f.string()},
                                                      {"wall_time_s", doc.value("wall_time_s", 0.0)},
                                                      {"outputs", doc["outputs"]},
                                                      {"metrics", doc["metrics"]}};
  }
  json rep = {{"out_dir", c.out_dir}, {"seed", c.seed}, {"target", c.target}, {"stages", stages},
              {"total_wall_time_s", total}};
  detail::write_file(a.report(), rep.dump(2) + "\n");
  return rep;
}

/// pretrain -> search-static -> (train-router -> search-dynamic) x rounds.
/// Round r > 1 continues the router from round r - 1 under the previous
/// refined config and re-searches from it.
inline void run_pipeline(const PipelineConfig& c) {
  const Artifacts a{c.out_dir};
  stage_pretrain(c);
  stage_search_static(c);
  for (std::size_t r = 1; r <= c.rounds; ++r) {
    if (r == 1) {
      stage_train_router(c, a.stage1());
      stage_search_dynamic(c, a.stage1());
    } else {
      const auto prev = a.dir / ("sparsity_stage3.round" + std::to_string(r - 1) + ".json");
      std::filesystem::copy_file(a.stage3(), prev, std::filesystem::copy_options::overwrite_existing);
      const auto suffix = ".round" + std::to_string(r);
      stage_train_router(c, prev, a.router(), "train-router" + suffix);
      stage_search_dynamic(c, prev, "search-dynamic" + suffix);
    }
  }
}

}  // namespace ftp
