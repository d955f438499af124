// Quantitative evaluations of a trained checkpoint-diffusion model: prompt
// alignment, one-step comparison against tuned gradient baselines, prompt
// sweeps, recursive prompting, memorization scoring, variance decomposition,
// and loss-surface export. Everything here is deterministic given its seed
// and never mutates the model.
#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckptdiff/checkpoints.hpp"
#include "ckptdiff/model.hpp"
#include "ckptdiff/pretrain.hpp"

namespace ckptdiff {

// ---------- metric plumbing ----------

// True-task metric of a raw parameter vector. Supervised tasks score against
// a fixed held-out set; the policy task rolls out with fixed episode seeds,
// so equal inputs always score equally.
struct MetricEvaluator {
  std::string metric;  // "test_loss" | "test_error" | "return"
  ArchSpec arch;
  TaskDataset task;  // supervised tasks only
  CartpoleEnv env;
  long episodes = 4;
  uint64_t rollout_seed = 0;

  bool maximize() const { return metric == "return"; }
  double operator()(const std::vector<float>& theta) const;
};

// Rebuilds the dataset's task; empty metric name selects the dataset's first.
MetricEvaluator make_metric_evaluator(const DatasetManifest& manifest, const std::string& dir,
                                      const std::string& metric, uint64_t rollout_seed);

// The init scheme the dataset's runs were trained from (falls back to the
// fan-in uniform default when runs carry no record of it).
InitScheme dataset_init_scheme(const LoadedDataset& ds);

struct MetricRange {
  double lo = 0, hi = 0;
  double best = 0;  // lo for minimized metrics, hi for maximized
};
MetricRange observed_metric_range(const LoadedDataset& ds, const std::vector<size_t>& run_indices,
                                  long metric_idx, bool maximize);

std::vector<double> linspace(double lo, double hi, long n);

// ---------- statistics ----------

// 1 - sum (a_i - p_i)^2 / sum (p_i - pbar)^2; throws when the reference
// values have zero variance.
double r2_score(const std::vector<double>& reference, const std::vector<double>& achieved);

// Rank correlation with average ranks on ties; NaN when either side has no
// rank variance (e.g. all values equal).
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// ---------- prompt alignment ----------

struct PromptAlignmentResult {
  std::vector<double> prompts;
  std::vector<double> achieved;  // mean over networks, one entry per prompt
  double r2 = 0;

  nlohmann::json to_json() const;
};

// Protocol: freshly initialized nets (the same set for every prompt), one
// stochastic sample per (prompt, net), achieved metric averaged over nets.
PromptAlignmentResult prompt_alignment(const GptWeights& w, const NormStats& norm,
                                       const MetricEvaluator& eval, const MetricRange& range,
                                       InitScheme init, long num_prompts, long num_nets,
                                       uint64_t seed);

// Same protocol with input nets taken from a split's stored initial
// checkpoints (cycled); the train-vs-test difference measures memorization.
PromptAlignmentResult split_prompt_alignment(const GptWeights& w, const LoadedDataset& ds,
                                             const std::vector<size_t>& run_indices,
                                             const MetricEvaluator& eval, long metric_idx,
                                             long num_prompts, long num_nets, uint64_t seed);

// Small prompt_alignment wrapper suitable for the training loop's reports.
AlignProbe make_align_probe(const LoadedDataset& ds, const std::string& metric, long num_prompts,
                            long num_nets, uint64_t seed);

// ---------- one-step comparison ----------

struct OneStepRow {
  std::string method;
  double lr = 0, weight_decay = 0;
  double metric = 0;  // mean over inits after one update
};

struct OneStepResult {
  std::vector<OneStepRow> grid;  // every (method, lr, wd) baseline cell
  OneStepRow best_baseline;
  double init_metric = 0;  // mean metric before any update
  double gpt_metric = 0;   // mean metric after one prompted diffusion sample
  double prompt_used = 0;

  nlohmann::json to_json() const;
};

// One surrogate-gradient step (full-batch cross-entropy on the task's train
// split). method: "sgd" | "sgd-momentum" | "adamw". lr = 0 returns theta
// unchanged.
std::vector<float> one_gradient_step(const ParamVector& theta, const TaskDataset& task,
                                     const std::string& method, double lr, double wd);

// One REINFORCE update with a mean-return baseline (SGD step on the episode
// batch's surrogate loss).
std::vector<float> one_reinforce_step(const ParamVector& theta, const CartpoleEnv& env, double lr,
                                      double wd, long episodes, uint64_t seed);

// Baselines cover a 3 x 3 (lr x weight-decay) grid per method; the diffusion
// model applies one prompted stochastic sample. Means over `num_inits` fresh
// nets.
OneStepResult one_step_compare(const GptWeights& w, const NormStats& norm,
                               const MetricEvaluator& eval, InitScheme init, long num_inits,
                               double prompt, uint64_t seed);

// ---------- prompt sweep ----------

struct SweepPoint {
  long init_index = 0;
  double prompt = 0, achieved = 0;
};

struct PromptSweepResult {
  std::vector<SweepPoint> points;  // |inits| x |grid| rows
  double spearman = 0;             // pooled over all points; NaN if degenerate

  nlohmann::json to_json() const;
};

PromptSweepResult prompt_sweep(const GptWeights& w, const NormStats& norm,
                               const MetricEvaluator& eval, InitScheme init, long num_inits,
                               const std::vector<double>& grid, uint64_t seed);

// ---------- recursive prompting ----------

struct RecursiveResult {
  std::vector<double> metrics;             // length steps + 1, starting at theta0
  std::vector<std::vector<float>> thetas;  // same length, theta0 first

  nlohmann::json to_json() const;
};

// theta_{k+1} = one stochastic sample conditioned on (theta_k, its current
// metric, the fixed prompt). Step k uses the sub-stream ("step", k) of seed.
RecursiveResult recursive_prompt(const GptWeights& w, const NormStats& norm,
                                 const MetricEvaluator& eval, const std::vector<float>& theta0,
                                 double prompt, long steps, uint64_t seed);

// ---------- memorization ----------

struct NnScoreResult {
  std::vector<double> prompts;
  std::vector<double> scores;  // percent of test runs per prompt, in [0, 100]

  nlohmann::json to_json() const;
};

// Success for a test run: its generated sample lies strictly closer (raw
// Euclidean) to one of that run's own checkpoints than to every checkpoint
// in the training split. Exposed separately so constructed samples can be
// scored without a model.
double nn_score_for_samples(const std::vector<std::vector<float>>& per_test_run_samples,
                            const LoadedDataset& ds);

// Samples start from each test run's initial checkpoint with the given
// prompt.
NnScoreResult nearest_neighbor_score(const GptWeights& w, const LoadedDataset& ds, long metric_idx,
                                     const std::vector<double>& prompts, uint64_t seed);

// ---------- variance decomposition ----------

struct VarianceResult {
  std::vector<double> noise_var;  // E over nets of Var over sampling noise
  std::vector<double> init_var;   // E over sampling noise of Var over nets
  double mean_noise_var = 0, mean_init_var = 0;
  std::vector<long> top_init_idx;  // parameter indices, descending init_var

  nlohmann::json to_json() const;
};

// Shares one n_outer x n_inner grid of deterministic (eta = 0) samples:
// rows vary the input net, columns vary the initial noise. Both axes need
// at least two points.
VarianceResult variance_decomposition(const GptWeights& w, const NormStats& norm,
                                      const ArchSpec& arch, InitScheme init, double l_cur,
                                      double l_prompt, long n_outer, long n_inner, uint64_t seed,
                                      long top_k = 750);

// ---------- loss-surface export ----------

// Top-2 principal directions of the rows of `samples` (power iteration with
// deflation); throws when all rows are identical.
void top2_pca(const std::vector<std::vector<float>>& samples, std::vector<double>& mean,
              std::vector<double>& v1, std::vector<double>& v2, double* lambda1 = nullptr,
              double* lambda2 = nullptr);

struct SurfaceResult {
  std::vector<double> mean, v1, v2;              // plane origin and directions
  std::vector<std::array<double, 3>> grid;       // (c1, c2, metric), res x res rows
  std::vector<std::array<double, 4>> samples;    // retained: (c1, c2, metric, recon_dist)
  long dropped = 0;                              // samples over the filter threshold
  double max_recon_metric_delta = 0;             // |metric(sample) - metric(projection)|, max

  nlohmann::json to_json() const;
};

// Draws n_samples stochastic samples from fixed inputs, spans their top-2
// PCA plane, and evaluates the true metric on a grid_res x grid_res patch
// covering the projected samples (20% padding).
SurfaceResult pca_surface_export(const GptWeights& w, const NormStats& norm,
                                 const MetricEvaluator& eval, const std::vector<float>& theta0,
                                 double prompt, long n_samples, long grid_res, uint64_t seed,
                                 double recon_threshold = 1e-3);

// ---------- plot-file output ----------

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

}  // namespace ckptdiff
