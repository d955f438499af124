// Checkpoint datasets: many small training runs saved to disk, plus the
// sampling, augmentation, and normalization machinery the diffusion model
// trains against.
//
// Run file format (little-endian):
//   bytes 0..7   magic "GPTCKPT1"
//   u32          header length in bytes
//   header       JSON: run_id, seed, arch, metrics (names), C, D, hyper
//   C records    [u64 step][f32 metrics x m][f32 theta x D]
//
// A dataset directory holds one file per run plus manifest.json, written
// last so its presence marks a complete dataset.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckptdiff/arch.hpp"
#include "ckptdiff/rng.hpp"
#include "ckptdiff/tasks.hpp"

namespace ckptdiff {

struct Checkpoint {
  uint64_t step = 0;
  std::vector<float> theta;
  std::vector<float> metrics;  // aligned with the run's metric_names
};

struct Run {
  std::string run_id;
  uint64_t seed = 0;
  ArchSpec arch;
  std::vector<std::string> metric_names;
  nlohmann::json hyper;  // free-form summary of the training recipe
  std::vector<Checkpoint> ckpts;

  long metric_index(const std::string& name) const;
};

void write_run_file(const std::string& path, const Run& run);
Run read_run_file(const std::string& path);

// Global scale applied to every parameter value before diffusion sees it.
struct NormStats {
  double scale_factor = 1.0;
  double target_std = 0.458;

  nlohmann::json to_json() const;
  static NormStats from_json(const nlohmann::json& j);
};

// scale_factor = target_std / std(all parameter values across `train`);
// throws if the values have zero variance.
NormStats compute_norm_stats(const std::vector<const Run*>& train, double target_std);
void normalize_inplace(std::vector<float>& theta, const NormStats& stats);    // multiply
void denormalize_inplace(std::vector<float>& theta, const NormStats& stats);  // divide

// Steps at which to keep checkpoints: always 0 and total_iters, plus C-2
// drawn uniformly without replacement from the interior. Throws if C exceeds
// total_iters + 1.
std::vector<uint64_t> select_checkpoints(uint64_t total_iters, long C, uint64_t seed);

// Uniform ordered pair (i, j) with i < j from [0, count).
std::pair<size_t, size_t> sample_tuple_indices(size_t count, Rng& rng);
// The corresponding earlier/later checkpoints of a run.
std::pair<const Checkpoint*, const Checkpoint*> sample_tuple(const Run& run, Rng& rng);

// One permutation of the output units of every hidden layer. Relabeling
// hidden units (weight rows + bias entries, and the next layer's input
// columns) leaves the network function untouched.
struct Permutation {
  std::vector<std::vector<long>> hidden;  // hidden[l][new_unit] = old_unit
};

Permutation sample_permutation(const ArchSpec& arch, Rng& rng);
Permutation invert_permutation(const Permutation& perm);
ParamVector apply_permutation(const Permutation& perm, const ParamVector& theta);

// Run-level split; checkpoints of one run never straddle the boundary.
// Returns (train_indices, test_indices), both nonempty, disjoint, sorted.
std::pair<std::vector<long>, std::vector<long>> split_runs(long num_runs, double test_fraction,
                                                           uint64_t seed);

struct DatasetManifest {
  std::string task;  // "blobs" | "imagegrid" | "cartpole"
  ArchSpec arch;
  std::vector<std::string> metric_names;
  long runs = 0;           // stored (successful) runs
  long ckpts_per_run = 0;
  long D = 0;
  uint64_t seed = 0;
  long failed_runs = 0;
  std::vector<std::string> run_files;  // relative to the manifest directory
  std::vector<std::string> train_runs;
  std::vector<std::string> test_runs;
  NormStats norm;
  nlohmann::json task_config;  // enough to rebuild the task for later evals

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  void save(const std::string& dir) const;
  static DatasetManifest load(const std::string& dir);
};

struct DataGenConfig {
  std::string task = "blobs";
  ArchSpec arch;                 // defaults to the task's standard net if empty
  std::string init = "uniform";  // init_scheme_from_name
  long runs = 500;
  long ckpts_per_run = 20;
  uint64_t seed = 0;
  double test_fraction = 0.1;
  double target_std = 0.458;

  // supervised tasks
  long data_train = 2048, data_test = 1024;
  uint64_t data_seed = 1234;
  SupervisedHyper sup;
  std::string image_grid_file;  // optional pre-built image-grid dataset

  // policy task
  PolicyHyper pol;

  nlohmann::json to_json() const;
  static DataGenConfig from_json(const nlohmann::json& j);
};

// Builds the task, trains `runs` nets in parallel (each seeded independently
// from `seed`), stores the selected checkpoints, and writes the manifest.
DatasetManifest generate_dataset(const DataGenConfig& cfg, const std::string& out_dir);

// In-memory dataset with the train/test split resolved to indices.
struct LoadedDataset {
  DatasetManifest manifest;
  std::string dir;        // where it was loaded from
  std::vector<Run> runs;  // aligned with manifest.run_files
  std::vector<size_t> train_idx, test_idx;

  const Run& train_run(size_t i) const { return runs[train_idx[i]]; }
  const Run& test_run(size_t i) const { return runs[test_idx[i]]; }
};

LoadedDataset load_dataset(const std::string& dir);

// The task a dataset was generated from, rebuilt for metric evaluation.
TaskDataset rebuild_task(const DatasetManifest& manifest, const std::string& dir);

}  // namespace ckptdiff
