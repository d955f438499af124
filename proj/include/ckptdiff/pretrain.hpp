// Pre-training loop for the checkpoint diffusion transformer: draw (earlier,
// later) checkpoint tuples, permutation-augment both ends identically,
// normalize, noise the later parameters, and fit the signal prediction with
// AdamW, warmup+cosine LR, gradient clipping, and an EMA shadow.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckptdiff/checkpoints.hpp"
#include "ckptdiff/diffusion.hpp"
#include "ckptdiff/model.hpp"

namespace ckptdiff {

struct TrainConfig {
  long iters = 3000;
  long batch = 64;
  double lr = 1e-3;
  double warmup_frac = 0.05;  // fraction of iters ramping 0 -> lr
  double weight_decay = 0.1;
  double beta2 = 0.999;  // beta1 fixed at 0.9
  double clip = 1.0;     // global-norm cap; <= 0 disables
  double ema_decay = 0.995;
  bool augment = true;
  bool final_only = false;  // ablation: tuples restricted to (first, last)
  long eval_interval = 250;
  long eval_batches = 4;  // batches behind each split-loss estimate
  std::string metric;     // conditioning metric; empty = dataset's first
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// One training example. Both parameter vectors are normalized and carry the
// SAME hidden-unit permutation, so the pair stays a valid optimization step.
struct TupleSample {
  std::vector<float> theta, theta_star;
  float l_cur = 0, l_star = 0;
  long j = 1;
  std::vector<float> z;  // this sample's forward-noising draw
};

// Everything random about one sample (run choice, checkpoint pair,
// permutation, step, noise) comes from `rng`, in that order.
TupleSample draw_tuple_sample(const LoadedDataset& ds, const std::vector<size_t>& from_runs,
                              long metric_idx, long J, bool augment, bool final_only, Rng& rng);

// Mean signal-prediction loss of the batch; with `grads` non-null also runs
// backward and returns the weight gradients in visit order.
double gpt_batch_loss(const GptWeights& w, const std::vector<TupleSample>& batch,
                      const DiffusionSchedule& sched, std::vector<Tensor>* grads);

// Fresh-tuple loss over `num_batches` x `batch` samples from the given runs
// (no augmentation). Deterministic in `seed`; throws on an empty split.
double loss_on_split(const GptWeights& w, const LoadedDataset& ds,
                     const std::vector<size_t>& split_runs, long metric_idx, long num_batches,
                     long batch, uint64_t seed);

struct TrainRecord {
  long iter = 0;
  double train_loss = 0;        // mean batch loss since the previous record
  double train_split_loss = 0;  // fresh-tuple loss on the train split (raw weights)
  double test_split_loss = 0;   // same protocol on the test split; NaN if empty
  double align = 0;             // probe score on the EMA weights; NaN without a probe
  double lr = 0;
  std::string ema_path;  // EMA snapshot written at this record ("" when not saving)

  nlohmann::json to_json() const;
  static TrainRecord from_json(const nlohmann::json& j);
};

struct TrainReport {
  std::vector<TrainRecord> records;

  void save_jsonl(const std::string& path) const;  // one record per line
  static TrainReport load_jsonl(const std::string& path);
};

// Optional quality probe evaluated on the EMA weights at every record.
using AlignProbe = std::function<double(const GptWeights&)>;

struct TrainResult {
  GptWeights raw, ema;
  TrainReport report;
};

// Records land every eval_interval iterations and at the end. A non-empty
// out_dir gets a rolling EMA snapshot (model_ema.bin) plus report.jsonl,
// updated as training progresses. Bit-deterministic in the config seed for
// any worker count; aborts with a diagnostic if the loss goes non-finite.
TrainResult pretrain(const LoadedDataset& ds, const GptConfig& gcfg, const TrainConfig& tcfg,
                     const std::string& out_dir = "", const AlignProbe& probe = nullptr);

// The conditioning metric's column index, resolving an empty name to 0.
long resolve_metric_index(const DatasetManifest& manifest, const std::string& metric);

}  // namespace ckptdiff
