// Run-wide configuration and the command-line entry point. One JSON config
// file with sections for data generation, the diffusion transformer, its
// training, the evaluation suites, and sweeps; individual command-line flags
// override config fields. Every command is a pure function of (config, seed,
// input files) to output files.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckptdiff/checkpoints.hpp"
#include "ckptdiff/model.hpp"
#include "ckptdiff/pretrain.hpp"

namespace ckptdiff {

struct EvalConfig {
  std::string metric;        // "" = the dataset's first metric
  double prompt_offset = 0;  // prompt = best observed, nudged past it by this
  long align_prompts = 20, align_nets = 128;
  long probe_prompts = 8, probe_nets = 16;  // in-training alignment probe; 0 nets disables
  long onestep_inits = 5;
  long sweep_prompts = 8, sweep_inits = 8;
  long ood_steps = 10, ood_inits = 4;
  long nn_prompts = 5;
  long var_outer = 64, var_inner = 64, var_topk = 750;
  long surface_samples = 256, surface_grid = 16;
  double surface_threshold = 1e-3;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

struct SweepConfig {
  std::vector<long> hiddens{32, 128};
  std::vector<long> train_runs{0};  // runs drawn from the training split; 0 = all
  long iters = 0;                   // 0 = the train section's iteration count

  void validate() const;
  nlohmann::json to_json() const;
  static SweepConfig from_json(const nlohmann::json& j);
};

struct AppConfig {
  DataGenConfig data;
  GptConfig model;
  TrainConfig train;
  EvalConfig eval;
  SweepConfig sweep;

  void validate() const;  // cross-section consistency, before any work
  nlohmann::json to_json() const;
  static AppConfig from_json(const nlohmann::json& j);  // missing sections keep defaults
  static AppConfig load(const std::string& path);
};

// Replaces the per-section seeds with named sub-streams of one root seed, so
// each stage can be reproduced in isolation.
void derive_seeds(AppConfig& cfg, uint64_t root_seed);

// Entry point behind main(). Exit codes: 0 success, 1 usage or validation
// error, 2 runtime failure.
int run_cli(int argc, char** argv);

}  // namespace ckptdiff
