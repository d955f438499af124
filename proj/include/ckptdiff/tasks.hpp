#pragma once
// Datasets, metric evaluation, rollouts, and the two per-run trainers that
// produce checkpoint streams.
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ckptdiff/arch.hpp"
#include "ckptdiff/cartpole.hpp"
#include "ckptdiff/graph.hpp"
#include "ckptdiff/tensor.hpp"

namespace ckptdiff {

struct TaskDataset {
  std::string kind;  // "blobs" or "imagegrid"
  TensorT<double> train_x, test_x;
  std::vector<int> train_y, test_y;
  int num_classes = 0;
};

// Four 2-D Gaussian clusters, balanced labels, train/test drawn independently.
TaskDataset make_blobs(long n_train, long n_test, uint64_t seed);

// Synthetic 8x8 image-grid task (10 classes, class template + pixel noise).
TaskDataset make_image_grid(long n_train, long n_test, uint64_t seed);
void write_image_grid_file(const std::string& path, const TaskDataset& ds);
TaskDataset load_image_grid_file(const std::string& path);

struct Metrics {
  double test_loss = 0;   // mean cross-entropy, nats
  double test_error = 0;  // percent misclassified, [0, 100]
};
Metrics eval_metrics(const ParamVector& params, const TaskDataset& ds);

// Mean episode return of the argmax policy over `episodes` seeded episodes.
double rollout_return(const ParamVector& params, const CartpoleEnv& env_proto, long episodes,
                      uint64_t seed);

// Builds logits for a batched MLP forward from per-layer leaf tensors
// (order: W0, b0, W1, b1, ... with zero-input placeholders for absent biases).
std::vector<Tensor> layer_tensors(const ParamVector& params);
void collect_flat(const std::vector<Tensor>& layers, const ArchSpec& arch, ParamVector& out);
int build_mlp_logits(Graph& g, const ArchSpec& arch, const std::vector<int>& leaves, int x);

struct SupervisedHyper {
  std::string optimizer = "sgd-momentum";
  double lr = 0.1, momentum = 0.9, weight_decay = 5e-4;
  long batch = 64, iters = 200;
  InitScheme init = InitScheme::UniformFanIn;
};

struct PolicyHyper {
  double lr = 0.01;            // Adam
  long episodes_per_update = 8;
  long iters = 250;
  long eval_episodes = 4;      // argmax rollouts behind the recorded metric
  double baseline_decay = 0.9;
  InitScheme init = InitScheme::UniformFanIn;
};

// Called once for step 0 and once per iteration. metrics() is lazy so callers
// pay for evaluation only at the steps they keep.
using SaveHook =
    std::function<void(uint64_t step, const ParamVector& theta,
                       const std::function<std::vector<float>()>& metrics)>;

struct TrainOutcome {
  bool ok = true;
  std::string error;
};

// SGD-momentum with half-period cosine annealing on the cross-entropy loss.
TrainOutcome run_supervised_training(const ArchSpec& arch, const TaskDataset& ds,
                                     const SupervisedHyper& hyper, uint64_t seed,
                                     const SaveHook& hook);

// REINFORCE with a moving-average baseline, Adam updates; the recorded metric
// is the deterministic argmax rollout return.
TrainOutcome run_policy_training(const ArchSpec& arch, const CartpoleEnv& env,
                                 const PolicyHyper& hyper, uint64_t seed, const SaveHook& hook);

// The evaluation seed used for the metric recorded at `step` of a policy run.
inline uint64_t policy_eval_seed(uint64_t run_seed, uint64_t step) {
  return Rng(run_seed).child("metric-eval", step).seed();
}

inline std::vector<std::string> task_metric_names(const std::string& kind) {
  if (kind == "cartpole") return {"return"};
  return {"test_loss", "test_error"};
}

}  // namespace ckptdiff
