// SPDX-License-Identifier: Apache-2.0
//
// Genetic search over block-wise sparsity allocations. The first and last
// blocks are pinned dense; the remaining blocks share a budget so that the
// mean ratio over all blocks equals the overall target.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <thread>
#include <vector>

#include "json.hpp"

#include "ftp/checkpoint.hpp"
#include "ftp/evaluation.hpp"

namespace ftp {

inline constexpr double kConstraintTol = 1e-9;

struct GAConfig {
  std::size_t population_size = 50;
  std::size_t generations = 10;
  double mutation_prob = 0.2;
  std::uint64_t seed = 0;
  double s_max = 0.85;
  double mutation_step = 0.1;  // largest sparsity moved by one mutation
  std::size_t tournament_size = 4;  // parent selection among the top half
  double elite_fraction = 0.2;      // best share carried over unchanged; offspring replace the rest
  std::size_t threads = 0;  // 0: hardware concurrency

  void validate() const {
    if (population_size < 2) throw ConfigError("GA population_size must be at least 2");
    if (!(mutation_prob >= 0.0 && mutation_prob <= 1.0)) throw ConfigError("GA mutation_prob must be in [0, 1]");
    if (!(s_max > 0.0 && s_max <= 1.0)) throw ConfigError("GA s_max must be in (0, 1]");
    if (!(mutation_step > 0.0)) throw ConfigError("GA mutation_step must be positive");
    if (tournament_size == 0) throw ConfigError("GA tournament_size must be positive");
    if (!(elite_fraction > 0.0 && elite_fraction < 1.0)) throw ConfigError("GA elite_fraction must be in (0, 1)");
  }
};

struct Individual {
  SparsityConfig config;
  std::optional<double> fitness;

  bool evaluated() const { return fitness.has_value(); }
};

using Population = std::vector<Individual>;
using FitnessFn = std::function<double(const SparsityConfig&)>;

inline bool is_pinned(std::size_t block, std::size_t n_blocks) { return block == 0 || block + 1 == n_blocks; }

inline std::size_t schedulable_blocks(std::size_t n_blocks) { return n_blocks >= 3 ? n_blocks - 2 : 0; }

/// Throws unless a mean of P is reachable with pinned ends and the cap.
inline void check_budget(std::size_t n_blocks, double P, double s_max) {
  if (!(P >= 0.0 && P <= 1.0)) throw ConfigError("target sparsity must be in [0, 1]");
  if (P * static_cast<double>(n_blocks) > s_max * static_cast<double>(schedulable_blocks(n_blocks)) + kConstraintTol) {
    throw ConfigError("target sparsity " + std::to_string(P) + " is infeasible for " + std::to_string(n_blocks) +
                      " blocks with the first and last pinned and cap " + std::to_string(s_max));
  }
}

inline bool satisfies_constraint(const SparsityConfig& c, double P, double s_max) {
  const auto n = c.n_blocks();
  if (std::abs(c.mean() - P) > kConstraintTol) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = c.ratios[i];
    if (is_pinned(i, n) ? s != 0.0 : (s < 0.0 || s > s_max)) return false;
  }
  return true;
}

/// Rescales the free blocks toward the budget, then clamps to [0, s_max]
/// and redistributes the excess until the mean equals P.
inline SparsityConfig repair_to_constraint(SparsityConfig c, double P, double s_max) {
  const auto n = c.n_blocks();
  check_budget(n, P, s_max);
  c.target = P;
  if (satisfies_constraint(c, P, s_max)) return c;
  const double budget = P * static_cast<double>(n);
  std::vector<std::size_t> free_blocks;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_pinned(i, n)) {
      c.ratios[i] = 0.0;
      continue;
    }
    c.ratios[i] = std::clamp(std::isfinite(c.ratios[i]) ? c.ratios[i] : 0.0, 0.0, s_max);
    free_blocks.push_back(i);
  }
  if (budget == 0.0) {
    for (auto i : free_blocks) c.ratios[i] = 0.0;
    return c;
  }
  std::vector<char> capped(n, 0);
  for (std::size_t iter = 0; iter <= n; ++iter) {
    double fixed = 0.0, movable = 0.0;
    std::size_t n_movable = 0;
    for (auto i : free_blocks) {
      if (capped[i]) {
        fixed += c.ratios[i];
      } else {
        movable += c.ratios[i];
        ++n_movable;
      }
    }
    const double remaining = budget - fixed;
    if (n_movable == 0) break;
    for (auto i : free_blocks) {
      if (capped[i]) continue;
      c.ratios[i] = movable > 0.0 ? c.ratios[i] * remaining / movable : remaining / static_cast<double>(n_movable);
    }
    bool changed = false;
    for (auto i : free_blocks) {
      if (!capped[i] && c.ratios[i] >= s_max) {
        c.ratios[i] = s_max;
        capped[i] = 1;
        changed = true;
      }
    }
    if (!changed) break;
  }
  // Absorb rounding drift in the free block with the most room.
  const double drift = budget - c.mean() * static_cast<double>(n);
  if (drift != 0.0 && !free_blocks.empty()) {
    auto best = *std::max_element(free_blocks.begin(), free_blocks.end(), [&](auto a, auto b) {
      const double ra = drift > 0 ? s_max - c.ratios[a] : c.ratios[a];
      const double rb = drift > 0 ? s_max - c.ratios[b] : c.ratios[b];
      return ra < rb;
    });
    c.ratios[best] = std::clamp(c.ratios[best] + drift, 0.0, s_max);
  }
  if (!satisfies_constraint(c, P, s_max)) throw ConfigError("could not repair sparsity config to the target");
  return c;
}

inline Population init_population(const GAConfig& ga, std::size_t n_blocks, double P) {
  ga.validate();
  check_budget(n_blocks, P, ga.s_max);
  std::mt19937_64 rng(ga.seed);
  std::gamma_distribution<double> gamma(1.0, 1.0);
  Population pop;
  pop.reserve(ga.population_size);
  const auto free_n = schedulable_blocks(n_blocks);
  for (std::size_t k = 0; k < ga.population_size; ++k) {
    SparsityConfig c = SparsityConfig::zeros(n_blocks);
    c.target = P;
    if (P > 0.0) {
      std::vector<double> draw(free_n);
      double total = 0.0;
      for (auto& v : draw) total += (v = gamma(rng));
      for (std::size_t i = 0; i < free_n; ++i) c.ratios[i + 1] = draw[i] / total * P * static_cast<double>(n_blocks);
    }
    pop.push_back({repair_to_constraint(std::move(c), P, ga.s_max), std::nullopt});
  }
  return pop;
}

/// Per-block coin flip between the parents, then repair.
inline Individual crossover(const Individual& a, const Individual& b, double P, double s_max, std::mt19937_64& rng) {
  if (a.config.n_blocks() != b.config.n_blocks()) throw DimensionError("crossover: parents differ in block count");
  SparsityConfig child = a.config;
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < child.n_blocks(); ++i) child.ratios[i] = coin(rng) ? a.config.ratios[i] : b.config.ratios[i];
  return {repair_to_constraint(std::move(child), P, s_max), std::nullopt};
}

/// With probability mutation_prob, moves a random amount of sparsity from one
/// free block to another. Both stay within [0, s_max].
inline Individual mutate(Individual ind, const GAConfig& ga, std::mt19937_64& rng) {
  std::bernoulli_distribution fire(ga.mutation_prob);
  if (!fire(rng)) return ind;
  const auto n = ind.config.n_blocks();
  const auto free_n = schedulable_blocks(n);
  if (free_n < 2) return ind;
  std::uniform_int_distribution<std::size_t> pick(1, free_n);
  const auto from = pick(rng);
  auto to = pick(rng);
  while (to == from) to = pick(rng);
  auto& r = ind.config.ratios;
  const double room = std::min({r[from], ga.s_max - r[to], ga.mutation_step});
  if (room <= 0.0) return ind;
  const double delta = std::uniform_real_distribution<double>(0.0, room)(rng);
  r[from] -= delta;
  r[to] += delta;
  r[from] = std::max(r[from], 0.0);
  r[to] = std::min(r[to], ga.s_max);
  ind.fitness.reset();
  return ind;
}

/// Evaluates every unevaluated individual. Results land in fixed slots, so
/// the outcome does not depend on thread scheduling.
inline void evaluate_population(Population& pop, const FitnessFn& fitness, std::size_t threads) {
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < pop.size(); ++i)
    if (!pop[i].evaluated()) todo.push_back(i);
  if (todo.empty()) return;
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, todo.size());
  std::vector<double> results(todo.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (std::size_t t; (t = next.fetch_add(1)) < todo.size();) {
      try {
        results[t] = fitness(pop[todo[t]].config);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  for (std::size_t t = 0; t < todo.size(); ++t) pop[todo[t]].fitness = results[t];
}

/// Fitness descending, then ratios lexicographically ascending.
inline void sort_population(Population& pop) {
  std::sort(pop.begin(), pop.end(), [](const Individual& a, const Individual& b) {
    if (*a.fitness != *b.fitness) return *a.fitness > *b.fitness;
    return a.config.ratios < b.config.ratios;
  });
}

struct SearchResult {
  Individual best;
  std::vector<double> best_trace;  // best fitness after the initial population and after each generation
  std::size_t evaluations = 0;
  Population final_population;
};

/// Elitist GA. `seeds` replace the first members of the initial population
/// (after repair), which lets a later search start from an earlier answer.
inline SearchResult ga_search(const GAConfig& ga, std::size_t n_blocks, double P, const FitnessFn& fitness,
                              const std::vector<SparsityConfig>& seeds = {}) {
  auto pop = init_population(ga, n_blocks, P);
  for (std::size_t i = 0; i < seeds.size() && i < pop.size(); ++i) {
    if (seeds[i].n_blocks() != n_blocks) throw ConfigError("GA seed config has the wrong number of blocks");
    pop[i] = {repair_to_constraint(seeds[i], P, ga.s_max), std::nullopt};
  }
  std::mt19937_64 rng(ga.seed ^ 0xa0761d6478bd642fULL);
  SearchResult res;
  auto count_pending = [](const Population& p) {
    return static_cast<std::size_t>(std::count_if(p.begin(), p.end(), [](auto& i) { return !i.evaluated(); }));
  };
  res.evaluations += count_pending(pop);
  evaluate_population(pop, fitness, ga.threads);
  sort_population(pop);
  res.best = pop.front();
  res.best_trace.push_back(*res.best.fitness);

  const std::size_t n_parents = (pop.size() + 1) / 2;
  const std::size_t n_elite = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(ga.elite_fraction * static_cast<double>(pop.size()))), 1, pop.size() - 1);
  GAConfig forced = ga;
  forced.mutation_prob = 1.0;
  for (std::size_t gen = 0; gen < ga.generations; ++gen) {
    Population next(pop.begin(), pop.begin() + static_cast<std::ptrdiff_t>(n_elite));
    std::uniform_int_distribution<std::size_t> pick(0, n_parents - 1);
    // Tournament among the top-half parents; the population is sorted best first.
    auto choose = [&] {
      auto best = pick(rng);
      for (std::size_t t = 1; t < ga.tournament_size; ++t) best = std::min(best, pick(rng));
      return best;
    };
    while (next.size() < pop.size()) {
      const auto a = choose();
      auto b = choose();
      if (n_parents > 1)
        while (b == a) b = choose();
      auto child = mutate(crossover(pop[a], pop[b], P, ga.s_max, rng), ga, rng);
      // A copy of an existing member would waste an evaluation; force a mutation.
      for (int tries = 0; tries < 8 && std::any_of(next.begin(), next.end(), [&](const Individual& m) {
                            return m.config.ratios == child.config.ratios;
                          });
           ++tries)
        child = mutate(std::move(child), forced, rng);
      next.push_back(std::move(child));
    }
    res.evaluations += count_pending(next);
    evaluate_population(next, fitness, ga.threads);
    sort_population(next);
    pop = std::move(next);
    if (*pop.front().fitness > *res.best.fitness) res.best = pop.front();
    res.best_trace.push_back(*res.best.fitness);
  }
  res.final_population = std::move(pop);
  return res;
}

/// Held-out next-token accuracy of the routed model.
inline double evaluate_fitness(const SparsityConfig& config, const ModelWeights& w, const Router& router,
                               const EvalSet& eval_set) {
  return evaluate_routed(w, router, config, eval_set).accuracy;
}

inline SearchResult ga_search(const GAConfig& ga, const ModelWeights& w, const Router& router, double P,
                              const EvalSet& eval_set, const std::vector<SparsityConfig>& seeds = {}) {
  if (eval_set.empty()) throw ConfigError("GA search needs a non-empty evaluation set");
  return ga_search(
      ga, w.config.n_blocks, P, [&](const SparsityConfig& c) { return evaluate_fitness(c, w, router, eval_set); },
      seeds);
}

// ---------------------------------------------------------------------------
// JSON form: {"target": P, "ratios": [...], "blocks": {"i": s_i, ...}} where
// "blocks" lists the non-zero entries only and is informational.

inline nlohmann::json sparsity_to_json(const SparsityConfig& c) {
  nlohmann::json blocks = nlohmann::json::object();
  for (std::size_t i = 0; i < c.n_blocks(); ++i)
    if (c.ratios[i] != 0.0) blocks[std::to_string(i)] = c.ratios[i];
  return {{"target", c.target}, {"ratios", c.ratios}, {"blocks", blocks}};
}

inline SparsityConfig sparsity_from_json(const nlohmann::json& j) {
  SparsityConfig c;
  try {
    c.target = j.at("target").get<double>();
    c.ratios = j.at("ratios").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed sparsity config: ") + e.what());
  }
  for (double s : c.ratios)
    if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("sparsity ratio outside [0, 1]");
  if (std::abs(c.mean() - c.target) > kConstraintTol) throw ConfigError("sparsity ratios do not average to target");
  return c;
}

inline void save_sparsity(const std::filesystem::path& path, const SparsityConfig& c) {
  detail::write_file(path, sparsity_to_json(c).dump(2) + "\n");
}

inline SparsityConfig load_sparsity(const std::filesystem::path& path) {
  const auto text = detail::read_file(path);
  try {
    return sparsity_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("sparsity file " + path.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace ftp
