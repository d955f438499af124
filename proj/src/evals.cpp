#include "ckptdiff/evals.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "ckptdiff/diffusion.hpp"
#include "ckptdiff/optim.hpp"
#include "ckptdiff/parallel.hpp"

namespace ckptdiff {

using nlohmann::json;

// ---------- metric plumbing ----------

double MetricEvaluator::operator()(const std::vector<float>& theta) const {
  ParamVector p(arch);
  if ((long)theta.size() != arch.param_count())
    throw std::runtime_error("metric evaluator: parameter count mismatch");
  p.values = theta;
  if (metric == "return") return rollout_return(p, env, episodes, rollout_seed);
  Metrics m = eval_metrics(p, task);
  if (metric == "test_loss") return m.test_loss;
  if (metric == "test_error") return m.test_error;
  throw std::runtime_error("metric evaluator: unknown metric " + metric);
}

MetricEvaluator make_metric_evaluator(const DatasetManifest& manifest, const std::string& dir,
                                      const std::string& metric, uint64_t rollout_seed) {
  MetricEvaluator ev;
  ev.metric = metric.empty() ? manifest.metric_names.at(0) : metric;
  if (std::find(manifest.metric_names.begin(), manifest.metric_names.end(), ev.metric) ==
      manifest.metric_names.end())
    throw std::runtime_error("dataset has no metric named " + ev.metric);
  ev.arch = manifest.arch;
  if (manifest.task == "cartpole") {
    ev.episodes = manifest.task_config.value("eval_episodes", 4L);
    ev.rollout_seed = rollout_seed;
  } else {
    ev.task = rebuild_task(manifest, dir);
  }
  return ev;
}

InitScheme dataset_init_scheme(const LoadedDataset& ds) {
  if (ds.runs.empty()) return InitScheme::UniformFanIn;
  return init_scheme_from_name(ds.runs.front().hyper.value("init", "uniform-fan-in"));
}

MetricRange observed_metric_range(const LoadedDataset& ds, const std::vector<size_t>& run_indices,
                                  long metric_idx, bool maximize) {
  if (run_indices.empty()) throw std::runtime_error("observed_metric_range: no runs");
  MetricRange r;
  r.lo = std::numeric_limits<double>::infinity();
  r.hi = -r.lo;
  for (size_t ri : run_indices)
    for (const auto& c : ds.runs.at(ri).ckpts) {
      double v = c.metrics.at((size_t)metric_idx);
      r.lo = std::min(r.lo, v);
      r.hi = std::max(r.hi, v);
    }
  r.best = maximize ? r.hi : r.lo;
  return r;
}

std::vector<double> linspace(double lo, double hi, long n) {
  if (n < 1) throw std::runtime_error("linspace: need at least one point");
  if (n == 1) return {0.5 * (lo + hi)};
  std::vector<double> out((size_t)n);
  for (long i = 0; i < n; ++i) out[(size_t)i] = lo + (hi - lo) * (double)i / (double)(n - 1);
  return out;
}

// ---------- statistics ----------

double r2_score(const std::vector<double>& reference, const std::vector<double>& achieved) {
  if (reference.size() != achieved.size() || reference.empty())
    throw std::runtime_error("r2_score: size mismatch");
  double mean = std::accumulate(reference.begin(), reference.end(), 0.0) / (double)reference.size();
  double num = 0, den = 0;
  for (size_t i = 0; i < reference.size(); ++i) {
    num += (achieved[i] - reference[i]) * (achieved[i] - reference[i]);
    den += (reference[i] - mean) * (reference[i] - mean);
  }
  if (den == 0) throw std::runtime_error("r2_score: reference values have zero variance");
  return 1.0 - num / den;
}

namespace {

// Average ranks (1-based); tied values share the mean of their positions.
std::vector<double> avg_ranks(const std::vector<double>& v) {
  size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    double r = 0.5 * (double)(i + j) + 1.0;  // mean of positions i..j, 1-based
    for (size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::runtime_error("spearman: size mismatch");
  std::vector<double> rx = avg_ranks(x), ry = avg_ranks(y);
  double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / (double)rx.size();
  double my = std::accumulate(ry.begin(), ry.end(), 0.0) / (double)ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

// ---------- shared helpers ----------

namespace {

std::vector<double> eval_rows(const MetricEvaluator& eval, const Tensor& rows) {
  std::vector<double> out((size_t)rows.nrow);
  parallel_for(0, rows.nrow, [&](long i) {
    std::vector<float> th(rows.ptr(i), rows.ptr(i) + rows.ncol);
    out[(size_t)i] = eval(th);
  });
  return out;
}

Tensor stack_init_nets(const ArchSpec& arch, InitScheme init, long n, Rng& root) {
  Tensor nets(n, arch.param_count());
  for (long i = 0; i < n; ++i) {
    ParamVector p = init_params(arch, init, root.child("net", (uint64_t)i).seed());
    std::copy(p.values.begin(), p.values.end(), nets.ptr(i));
  }
  return nets;
}

void check_model_matches(const GptWeights& w, const MetricEvaluator& eval) {
  if (w.arch.param_count() != eval.arch.param_count())
    throw std::runtime_error("model and evaluator disagree on the parameter count");
}

std::vector<float> to_f32(const std::vector<double>& v) {
  std::vector<float> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = (float)v[i];
  return out;
}

}  // namespace

// ---------- prompt alignment ----------

json PromptAlignmentResult::to_json() const {
  return json{{"prompts", prompts}, {"achieved", achieved}, {"r2", r2}};
}

namespace {

PromptAlignmentResult alignment_protocol(const GptWeights& w, const NormStats& norm,
                                         const MetricEvaluator& eval, const MetricRange& range,
                                         const Tensor& nets, const std::vector<float>& l_cur,
                                         long num_prompts, Rng& root) {
  if (num_prompts < 2) throw std::runtime_error("prompt alignment: need at least two prompts");
  if (!(range.hi > range.lo))
    throw std::runtime_error("prompt alignment: degenerate prompt range");
  PromptAlignmentResult res;
  res.prompts = linspace(range.lo, range.hi, num_prompts);
  BatchDenoiseFn fn = make_denoiser(&w);
  DiffusionSchedule sched = w.cfg.schedule();
  for (long pi = 0; pi < num_prompts; ++pi) {
    std::vector<float> lp((size_t)nets.nrow, (float)res.prompts[(size_t)pi]);
    Tensor out = ddpm_sample_batch(fn, nets, l_cur, lp, sched, norm,
                                   root.child("prompt", (uint64_t)pi).seed());
    std::vector<double> ms = eval_rows(eval, out);
    res.achieved.push_back(std::accumulate(ms.begin(), ms.end(), 0.0) / (double)ms.size());
  }
  res.r2 = r2_score(res.prompts, res.achieved);
  return res;
}

}  // namespace

PromptAlignmentResult prompt_alignment(const GptWeights& w, const NormStats& norm,
                                       const MetricEvaluator& eval, const MetricRange& range,
                                       InitScheme init, long num_prompts, long num_nets,
                                       uint64_t seed) {
  check_model_matches(w, eval);
  if (num_nets < 1) throw std::runtime_error("prompt alignment: need at least one network");
  Rng root(seed);
  Tensor nets = stack_init_nets(eval.arch, init, num_nets, root);
  std::vector<float> l_cur = to_f32(eval_rows(eval, nets));
  return alignment_protocol(w, norm, eval, range, nets, l_cur, num_prompts, root);
}

PromptAlignmentResult split_prompt_alignment(const GptWeights& w, const LoadedDataset& ds,
                                             const std::vector<size_t>& run_indices,
                                             const MetricEvaluator& eval, long metric_idx,
                                             long num_prompts, long num_nets, uint64_t seed) {
  check_model_matches(w, eval);
  if (run_indices.empty()) throw std::runtime_error("split alignment: no runs");
  if (num_nets < 1) throw std::runtime_error("split alignment: need at least one network");
  Rng root(seed);
  Tensor nets(num_nets, ds.manifest.D);
  std::vector<float> l_cur((size_t)num_nets);
  for (long i = 0; i < num_nets; ++i) {
    // cycle through the split's initial checkpoints with their stored metrics
    const Run& run = ds.runs.at(run_indices[(size_t)i % run_indices.size()]);
    const Checkpoint& c = run.ckpts.front();
    std::copy(c.theta.begin(), c.theta.end(), nets.ptr(i));
    l_cur[(size_t)i] = c.metrics.at((size_t)metric_idx);
  }
  MetricRange range = observed_metric_range(ds, run_indices, metric_idx, eval.maximize());
  return alignment_protocol(w, ds.manifest.norm, eval, range, nets, l_cur, num_prompts, root);
}

AlignProbe make_align_probe(const LoadedDataset& ds, const std::string& metric, long num_prompts,
                            long num_nets, uint64_t seed) {
  auto eval = std::make_shared<MetricEvaluator>(
      make_metric_evaluator(ds.manifest, ds.dir, metric, Rng(seed).child("rollout").seed()));
  long mi = resolve_metric_index(ds.manifest, metric);
  MetricRange range = observed_metric_range(ds, ds.train_idx, mi, eval->maximize());
  NormStats norm = ds.manifest.norm;
  InitScheme init = dataset_init_scheme(ds);
  return [=](const GptWeights& w) {
    return prompt_alignment(w, norm, *eval, range, init, num_prompts, num_nets, seed).r2;
  };
}

// ---------- one-step comparison ----------

json OneStepResult::to_json() const {
  auto row = [](const OneStepRow& r) {
    return json{{"method", r.method},
                {"lr", r.lr},
                {"weight_decay", r.weight_decay},
                {"metric", r.metric}};
  };
  json g = json::array();
  for (const auto& r : grid) g.push_back(row(r));
  return json{{"grid", g},
              {"best_baseline", row(best_baseline)},
              {"init_metric", init_metric},
              {"gpt_metric", gpt_metric},
              {"prompt_used", prompt_used}};
}

std::vector<float> one_gradient_step(const ParamVector& theta, const TaskDataset& task,
                                     const std::string& method, double lr, double wd) {
  std::vector<Tensor> layers = layer_tensors(theta);
  Tensor bx(task.train_x.nrow, task.train_x.ncol);
  for (long i = 0; i < bx.size(); ++i) bx[i] = (float)task.train_x[i];
  Graph g;
  std::vector<int> lv;
  for (auto& t : layers) lv.push_back(g.leaf(t));
  int loss = g.cross_entropy(build_mlp_logits(g, theta.arch, lv, g.input(bx)), task.train_y);
  g.backward(loss);
  std::vector<Tensor> grads;
  for (int v : lv) grads.push_back(g.grad(v));
  if (method == "sgd" || method == "sgd-momentum") {
    SgdMomentum opt;
    opt.momentum = method == "sgd" ? 0.0 : 0.9;
    opt.weight_decay = wd;
    opt.step(layers, grads, lr);
  } else if (method == "adamw") {
    AdamW opt;
    opt.weight_decay = wd;
    opt.step(layers, grads, lr);
  } else {
    throw std::runtime_error("one_gradient_step: unknown method " + method);
  }
  ParamVector out;
  collect_flat(layers, theta.arch, out);
  return out.values;
}

std::vector<float> one_reinforce_step(const ParamVector& theta, const CartpoleEnv& env, double lr,
                                      double wd, long episodes, uint64_t seed) {
  if (episodes < 1) throw std::runtime_error("one_reinforce_step: need at least one episode");
  Rng root(seed);
  std::vector<std::array<double, 4>> obs;
  std::vector<int> actions;
  std::vector<long> ep_len;
  std::vector<double> ep_ret;
  TensorT<double> ob(1, 4);
  for (long e = 0; e < episodes; ++e) {
    CartpoleEnv sim = env;
    Rng er = root.child("episode", (uint64_t)e);
    sim.reset(er);
    long steps = 0;
    while (steps < sim.max_steps) {
      std::array<double, 4> o{sim.s.x, sim.s.xdot, sim.s.theta, sim.s.thetadot};
      for (int j = 0; j < 4; ++j) ob(0, j) = o[(size_t)j];
      TensorT<double> lg = forward_task(theta, ob);
      // sample from the softmax policy
      double mx = std::max(lg[0], lg[1]);
      double p0 = std::exp(lg[0] - mx), p1 = std::exp(lg[1] - mx);
      int a = er.uniform() * (p0 + p1) < p0 ? 0 : 1;
      obs.push_back(o);
      actions.push_back(a);
      bool done = sim.step(a);
      ++steps;
      if (done) break;
    }
    ep_len.push_back(steps);
    ep_ret.push_back((double)steps);
  }
  double mean_ret = std::accumulate(ep_ret.begin(), ep_ret.end(), 0.0) / (double)episodes;
  Tensor bx((long)obs.size(), 4);
  std::vector<float> weights(obs.size());
  size_t at = 0;
  for (size_t e = 0; e < ep_ret.size(); ++e) {
    // mean-return baseline; one Adam update like the dataset's trainer
    float wgt = (float)((ep_ret[e] - mean_ret) / (double)episodes);
    for (long t = 0; t < ep_len[e]; ++t, ++at) {
      for (int j = 0; j < 4; ++j) bx((long)at, j) = (float)obs[at][j];
      weights[at] = wgt;
    }
  }
  std::vector<Tensor> layers = layer_tensors(theta);
  Graph g;
  std::vector<int> lv;
  for (auto& t : layers) lv.push_back(g.leaf(t));
  int loss = g.cross_entropy(build_mlp_logits(g, theta.arch, lv, g.input(bx)), actions, weights);
  g.backward(loss);
  std::vector<Tensor> grads;
  for (int v : lv) grads.push_back(g.grad(v));
  AdamW opt;
  opt.weight_decay = wd;
  opt.step(layers, grads, lr);
  ParamVector out;
  collect_flat(layers, theta.arch, out);
  return out.values;
}

OneStepResult one_step_compare(const GptWeights& w, const NormStats& norm,
                               const MetricEvaluator& eval, InitScheme init, long num_inits,
                               double prompt, uint64_t seed) {
  check_model_matches(w, eval);
  if (num_inits < 1) throw std::runtime_error("one_step_compare: need at least one init");
  Rng root(seed);
  Tensor nets = stack_init_nets(eval.arch, init, num_inits, root);
  std::vector<double> init_ms = eval_rows(eval, nets);
  OneStepResult res;
  res.prompt_used = prompt;
  res.init_metric = std::accumulate(init_ms.begin(), init_ms.end(), 0.0) / (double)num_inits;

  struct Cell {
    std::string method;
    double lr, wd;
  };
  std::vector<Cell> cells;
  const double wds[3] = {0.0, 5e-5, 5e-4};
  if (eval.metric == "return") {
    for (double lr : {1e-3, 1e-2, 1e-1})
      for (double wd : wds) cells.push_back({"reinforce", lr, wd});
  } else {
    for (double lr : {1e-3, 1e-2, 1e-1})
      for (double wd : wds) cells.push_back({"sgd", lr, wd});
    for (double lr : {1e-3, 1e-2, 1e-1})
      for (double wd : wds) cells.push_back({"sgd-momentum", lr, wd});
    for (double lr : {1e-4, 1e-3, 1e-2})
      for (double wd : wds) cells.push_back({"adamw", lr, wd});
  }

  // one rollout seed per init, shared across cells (paired comparison)
  std::vector<uint64_t> rollout_seeds((size_t)num_inits);
  for (long i = 0; i < num_inits; ++i)
    rollout_seeds[(size_t)i] = root.child("rollout", (uint64_t)i).seed();

  long ncell = (long)cells.size();
  std::vector<double> cell_metric((size_t)(ncell * num_inits));
  parallel_for(0, ncell * num_inits, [&](long k) {
    long ci = k / num_inits, ii = k % num_inits;
    ParamVector p(eval.arch);
    p.values.assign(nets.ptr(ii), nets.ptr(ii) + nets.ncol);
    std::vector<float> stepped =
        cells[(size_t)ci].method == "reinforce"
            ? one_reinforce_step(p, eval.env, cells[(size_t)ci].lr, cells[(size_t)ci].wd, 8,
                                 rollout_seeds[(size_t)ii])
            : one_gradient_step(p, eval.task, cells[(size_t)ci].method, cells[(size_t)ci].lr,
                                cells[(size_t)ci].wd);
    cell_metric[(size_t)k] = eval(stepped);
  });
  for (long ci = 0; ci < ncell; ++ci) {
    double m = 0;
    for (long ii = 0; ii < num_inits; ++ii) m += cell_metric[(size_t)(ci * num_inits + ii)];
    res.grid.push_back({cells[(size_t)ci].method, cells[(size_t)ci].lr, cells[(size_t)ci].wd,
                        m / (double)num_inits});
  }
  res.best_baseline = res.grid.front();
  for (const auto& r : res.grid) {
    bool better = eval.maximize() ? r.metric > res.best_baseline.metric
                                  : r.metric < res.best_baseline.metric;
    if (better) res.best_baseline = r;
  }

  std::vector<float> lp((size_t)num_inits, (float)prompt);
  Tensor out = ddpm_sample_batch(make_denoiser(&w), nets, to_f32(init_ms), lp, w.cfg.schedule(),
                                 norm, root.child("gpt").seed());
  std::vector<double> gms = eval_rows(eval, out);
  res.gpt_metric = std::accumulate(gms.begin(), gms.end(), 0.0) / (double)num_inits;
  return res;
}

// ---------- prompt sweep ----------

json PromptSweepResult::to_json() const {
  json pts = json::array();
  for (const auto& p : points)
    pts.push_back(json{{"init", p.init_index}, {"prompt", p.prompt}, {"achieved", p.achieved}});
  json j{{"points", pts}};
  j["spearman"] = std::isnan(spearman) ? json() : json(spearman);
  return j;
}

PromptSweepResult prompt_sweep(const GptWeights& w, const NormStats& norm,
                               const MetricEvaluator& eval, InitScheme init, long num_inits,
                               const std::vector<double>& grid, uint64_t seed) {
  check_model_matches(w, eval);
  if (num_inits < 1 || grid.empty()) throw std::runtime_error("prompt_sweep: empty grid or inits");
  Rng root(seed);
  Tensor nets = stack_init_nets(eval.arch, init, num_inits, root);
  std::vector<float> l_cur = to_f32(eval_rows(eval, nets));
  BatchDenoiseFn fn = make_denoiser(&w);
  DiffusionSchedule sched = w.cfg.schedule();
  PromptSweepResult res;
  for (size_t gi = 0; gi < grid.size(); ++gi) {
    std::vector<float> lp((size_t)num_inits, (float)grid[gi]);
    Tensor out =
        ddpm_sample_batch(fn, nets, l_cur, lp, sched, norm, root.child("prompt", gi).seed());
    std::vector<double> ms = eval_rows(eval, out);
    for (long i = 0; i < num_inits; ++i) res.points.push_back({i, grid[gi], ms[(size_t)i]});
  }
  std::vector<double> ps, as;
  for (const auto& p : res.points) {
    ps.push_back(p.prompt);
    as.push_back(p.achieved);
  }
  res.spearman = spearman(ps, as);
  return res;
}

// ---------- recursive prompting ----------

json RecursiveResult::to_json() const {
  return json{{"metrics", metrics}, {"steps", (long)metrics.size() - 1}};
}

RecursiveResult recursive_prompt(const GptWeights& w, const NormStats& norm,
                                 const MetricEvaluator& eval, const std::vector<float>& theta0,
                                 double prompt, long steps, uint64_t seed) {
  check_model_matches(w, eval);
  if (steps < 0) throw std::runtime_error("recursive_prompt: negative step count");
  Rng root(seed);
  BatchDenoiseFn fn = make_denoiser(&w);
  DiffusionSchedule sched = w.cfg.schedule();
  RecursiveResult res;
  res.thetas.push_back(theta0);
  res.metrics.push_back(eval(theta0));
  for (long k = 0; k < steps; ++k) {
    std::vector<float> next =
        ddpm_sample(fn, res.thetas.back(), (float)res.metrics.back(), (float)prompt, sched, norm,
                    root.child("step", (uint64_t)k).seed());
    res.thetas.push_back(std::move(next));
    res.metrics.push_back(eval(res.thetas.back()));
  }
  return res;
}

// ---------- memorization ----------

json NnScoreResult::to_json() const { return json{{"prompts", prompts}, {"scores", scores}}; }

namespace {

double min_sq_dist(const std::vector<float>& v, const Run& run) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : run.ckpts) {
    double d = 0;
    for (size_t i = 0; i < v.size(); ++i) {
      double t = (double)v[i] - (double)c.theta[i];
      d += t * t;
    }
    best = std::min(best, d);
  }
  return best;
}

}  // namespace

double nn_score_for_samples(const std::vector<std::vector<float>>& per_test_run_samples,
                            const LoadedDataset& ds) {
  if (per_test_run_samples.size() != ds.test_idx.size())
    throw std::runtime_error("nn_score: need exactly one sample per test run");
  if (ds.test_idx.empty()) throw std::runtime_error("nn_score: dataset has no test runs");
  std::vector<int> hit(ds.test_idx.size());
  parallel_for(0, (long)ds.test_idx.size(), [&](long t) {
    const std::vector<float>& s = per_test_run_samples[(size_t)t];
    double same = min_sq_dist(s, ds.runs[ds.test_idx[(size_t)t]]);
    double train = std::numeric_limits<double>::infinity();
    for (size_t ri : ds.train_idx) train = std::min(train, min_sq_dist(s, ds.runs[ri]));
    hit[(size_t)t] = same < train ? 1 : 0;
  });
  double n = (double)hit.size();
  return 100.0 * std::accumulate(hit.begin(), hit.end(), 0) / n;
}

NnScoreResult nearest_neighbor_score(const GptWeights& w, const LoadedDataset& ds, long metric_idx,
                                     const std::vector<double>& prompts, uint64_t seed) {
  if (ds.test_idx.empty()) throw std::runtime_error("nn_score: dataset has no test runs");
  long n = (long)ds.test_idx.size();
  Tensor nets(n, ds.manifest.D);
  std::vector<float> l_cur((size_t)n);
  for (long t = 0; t < n; ++t) {
    const Checkpoint& c = ds.runs[ds.test_idx[(size_t)t]].ckpts.front();
    std::copy(c.theta.begin(), c.theta.end(), nets.ptr(t));
    l_cur[(size_t)t] = c.metrics.at((size_t)metric_idx);
  }
  BatchDenoiseFn fn = make_denoiser(&w);
  DiffusionSchedule sched = w.cfg.schedule();
  Rng root(seed);
  NnScoreResult res;
  res.prompts = prompts;
  for (size_t pi = 0; pi < prompts.size(); ++pi) {
    std::vector<float> lp((size_t)n, (float)prompts[pi]);
    Tensor out =
        ddpm_sample_batch(fn, nets, l_cur, lp, sched, ds.manifest.norm, root.child("prompt", pi).seed());
    std::vector<std::vector<float>> samples((size_t)n);
    for (long t = 0; t < n; ++t) samples[(size_t)t].assign(out.ptr(t), out.ptr(t) + out.ncol);
    res.scores.push_back(nn_score_for_samples(samples, ds));
  }
  return res;
}

// ---------- variance decomposition ----------

json VarianceResult::to_json() const {
  return json{{"mean_noise_var", mean_noise_var},
              {"mean_init_var", mean_init_var},
              {"top_init_idx", top_init_idx},
              {"noise_var", noise_var},
              {"init_var", init_var}};
}

VarianceResult variance_decomposition(const GptWeights& w, const NormStats& norm,
                                      const ArchSpec& arch, InitScheme init, double l_cur,
                                      double l_prompt, long n_outer, long n_inner, uint64_t seed,
                                      long top_k) {
  if (n_outer < 2 || n_inner < 2)
    throw std::runtime_error("variance decomposition: both axes need at least two points");
  long D = arch.param_count();
  if (D != w.arch.param_count())
    throw std::runtime_error("model and architecture disagree on the parameter count");
  Rng root(seed);
  Tensor nets = stack_init_nets(arch, init, n_outer, root);
  Tensor noise(n_inner, D);
  for (long b = 0; b < n_inner; ++b) {
    Rng zr = root.child("z", (uint64_t)b);
    for (long d = 0; d < D; ++d) noise(b, d) = (float)zr.normal();
  }
  BatchDenoiseFn fn = make_denoiser(&w);
  DiffusionSchedule sched = w.cfg.schedule();
  std::vector<float> lc((size_t)n_inner, (float)l_cur), lp((size_t)n_inner, (float)l_prompt);
  // S[a] = deterministic samples for net a against the shared noise rows
  std::vector<Tensor> S((size_t)n_outer);
  for (long a = 0; a < n_outer; ++a) {
    Tensor rows(n_inner, D);
    for (long b = 0; b < n_inner; ++b) std::copy(nets.ptr(a), nets.ptr(a) + D, rows.ptr(b));
    S[(size_t)a] = ddim_sample_batch(fn, rows, lc, lp, sched, 0.0, noise, norm, 0);
  }

  VarianceResult res;
  res.noise_var.assign((size_t)D, 0.0);
  res.init_var.assign((size_t)D, 0.0);
  parallel_for(0, D, [&](long d) {
    double nv = 0;
    for (long a = 0; a < n_outer; ++a) {
      double mean = 0;
      for (long b = 0; b < n_inner; ++b) mean += S[(size_t)a](b, d);
      mean /= (double)n_inner;
      double var = 0;
      for (long b = 0; b < n_inner; ++b) {
        double t = S[(size_t)a](b, d) - mean;
        var += t * t;
      }
      nv += var / (double)(n_inner - 1);
    }
    res.noise_var[(size_t)d] = nv / (double)n_outer;
    double iv = 0;
    for (long b = 0; b < n_inner; ++b) {
      double mean = 0;
      for (long a = 0; a < n_outer; ++a) mean += S[(size_t)a](b, d);
      mean /= (double)n_outer;
      double var = 0;
      for (long a = 0; a < n_outer; ++a) {
        double t = S[(size_t)a](b, d) - mean;
        var += t * t;
      }
      iv += var / (double)(n_outer - 1);
    }
    res.init_var[(size_t)d] = iv / (double)n_inner;
  });
  res.mean_noise_var =
      std::accumulate(res.noise_var.begin(), res.noise_var.end(), 0.0) / (double)D;
  res.mean_init_var = std::accumulate(res.init_var.begin(), res.init_var.end(), 0.0) / (double)D;
  std::vector<long> idx((size_t)D);
  std::iota(idx.begin(), idx.end(), 0L);
  std::stable_sort(idx.begin(), idx.end(), [&](long a, long b) {
    return res.init_var[(size_t)a] > res.init_var[(size_t)b];
  });
  idx.resize((size_t)std::min(top_k, D));
  res.top_init_idx = std::move(idx);
  return res;
}

// ---------- loss-surface export ----------

namespace {

// C v with C = X^T X / (n-1) for centered rows X, without forming C.
void cov_matvec(const std::vector<std::vector<double>>& xc, const std::vector<double>& v,
                std::vector<double>& out) {
  size_t n = xc.size(), D = v.size();
  out.assign(D, 0.0);
  for (size_t i = 0; i < n; ++i) {
    double dot = 0;
    for (size_t d = 0; d < D; ++d) dot += xc[i][d] * v[d];
    for (size_t d = 0; d < D; ++d) out[d] += dot * xc[i][d];
  }
  for (auto& o : out) o /= (double)(n - 1);
}

void normalize_vec(std::vector<double>& v) {
  double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  if (n > 0)
    for (auto& x : v) x /= n;
}

void remove_component(std::vector<double>& v, const std::vector<double>& u) {
  double dot = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
  for (size_t d = 0; d < v.size(); ++d) v[d] -= dot * u[d];
}

}  // namespace

void top2_pca(const std::vector<std::vector<float>>& samples, std::vector<double>& mean,
              std::vector<double>& v1, std::vector<double>& v2, double* lambda1, double* lambda2) {
  size_t n = samples.size();
  if (n < 2) throw std::runtime_error("pca: need at least two samples");
  size_t D = samples[0].size();
  mean.assign(D, 0.0);
  for (const auto& s : samples)
    for (size_t d = 0; d < D; ++d) mean[d] += s[d];
  for (auto& m : mean) m /= (double)n;
  std::vector<std::vector<double>> xc(n, std::vector<double>(D));
  double total = 0;
  for (size_t i = 0; i < n; ++i)
    for (size_t d = 0; d < D; ++d) {
      xc[i][d] = (double)samples[i][d] - mean[d];
      total += xc[i][d] * xc[i][d];
    }
  if (total == 0) throw std::runtime_error("pca: all samples are identical (rank-deficient)");

  // start from the largest centered row: it cannot be orthogonal to the
  // whole principal subspace
  auto largest_row = [&](const std::vector<double>* excl) {
    size_t best = 0;
    double bn = -1;
    for (size_t i = 0; i < n; ++i) {
      std::vector<double> r = xc[i];
      if (excl) remove_component(r, *excl);
      double nn = std::inner_product(r.begin(), r.end(), r.begin(), 0.0);
      if (nn > bn) {
        bn = nn;
        best = i;
      }
    }
    std::vector<double> r = xc[best];
    if (excl) remove_component(r, *excl);
    return r;
  };

  std::vector<double> tmp;
  v1 = largest_row(nullptr);
  normalize_vec(v1);
  for (int it = 0; it < 300; ++it) {
    cov_matvec(xc, v1, tmp);
    v1.swap(tmp);
    normalize_vec(v1);
  }
  cov_matvec(xc, v1, tmp);
  double l1 = std::inner_product(v1.begin(), v1.end(), tmp.begin(), 0.0);

  v2 = largest_row(&v1);
  double resid = std::inner_product(v2.begin(), v2.end(), v2.begin(), 0.0);
  if (resid < 1e-24 * total) {
    // samples lie on a line; complete with an arbitrary orthogonal direction
    size_t d0 = 0;
    for (size_t d = 1; d < D; ++d)
      if (std::abs(v1[d]) < std::abs(v1[d0])) d0 = d;
    v2.assign(D, 0.0);
    v2[d0] = 1.0;
    remove_component(v2, v1);
    normalize_vec(v2);
    if (lambda1) *lambda1 = l1;
    if (lambda2) *lambda2 = 0.0;
    return;
  }
  normalize_vec(v2);
  for (int it = 0; it < 300; ++it) {
    cov_matvec(xc, v2, tmp);
    remove_component(tmp, v1);
    v2.swap(tmp);
    normalize_vec(v2);
  }
  cov_matvec(xc, v2, tmp);
  double l2 = std::inner_product(v2.begin(), v2.end(), tmp.begin(), 0.0);
  if (lambda1) *lambda1 = l1;
  if (lambda2) *lambda2 = l2;
}

json SurfaceResult::to_json() const {
  json g = json::array(), s = json::array();
  for (const auto& r : grid) g.push_back(json{{"c1", r[0]}, {"c2", r[1]}, {"metric", r[2]}});
  for (const auto& r : samples)
    s.push_back(json{{"c1", r[0]}, {"c2", r[1]}, {"metric", r[2]}, {"recon_dist", r[3]}});
  return json{{"mean", mean},          {"v1", v1},
              {"v2", v2},              {"grid", g},
              {"samples", s},          {"dropped", dropped},
              {"max_recon_metric_delta", max_recon_metric_delta}};
}

SurfaceResult pca_surface_export(const GptWeights& w, const NormStats& norm,
                                 const MetricEvaluator& eval, const std::vector<float>& theta0,
                                 double prompt, long n_samples, long grid_res, uint64_t seed,
                                 double recon_threshold) {
  check_model_matches(w, eval);
  if (n_samples < 3) throw std::runtime_error("surface export: need at least three samples");
  if (grid_res < 2) throw std::runtime_error("surface export: grid resolution must be >= 2");
  long D = (long)theta0.size();
  Rng root(seed);
  double l0 = eval(theta0);
  Tensor rows(n_samples, D);
  for (long i = 0; i < n_samples; ++i) std::copy(theta0.begin(), theta0.end(), rows.ptr(i));
  std::vector<float> lc((size_t)n_samples, (float)l0), lp((size_t)n_samples, (float)prompt);
  Tensor out = ddpm_sample_batch(make_denoiser(&w), rows, lc, lp, w.cfg.schedule(), norm,
                                 root.child("samples").seed());
  std::vector<std::vector<float>> samples((size_t)n_samples);
  for (long i = 0; i < n_samples; ++i)
    samples[(size_t)i].assign(out.ptr(i), out.ptr(i) + out.ncol);

  SurfaceResult res;
  top2_pca(samples, res.mean, res.v1, res.v2);

  std::vector<double> c1((size_t)n_samples), c2((size_t)n_samples), rd((size_t)n_samples);
  for (long i = 0; i < n_samples; ++i) {
    double a = 0, b = 0;
    for (long d = 0; d < D; ++d) {
      double x = (double)samples[(size_t)i][(size_t)d] - res.mean[(size_t)d];
      a += x * res.v1[(size_t)d];
      b += x * res.v2[(size_t)d];
    }
    double dist = 0;
    for (long d = 0; d < D; ++d) {
      double x = (double)samples[(size_t)i][(size_t)d] - res.mean[(size_t)d] -
                 a * res.v1[(size_t)d] - b * res.v2[(size_t)d];
      dist += x * x;
    }
    c1[(size_t)i] = a;
    c2[(size_t)i] = b;
    rd[(size_t)i] = std::sqrt(dist);
  }

  auto span = [](const std::vector<double>& v, double& lo, double& hi) {
    lo = *std::min_element(v.begin(), v.end());
    hi = *std::max_element(v.begin(), v.end());
    double pad = 0.2 * (hi - lo);
    if (pad == 0) pad = 1e-3;
    lo -= pad;
    hi += pad;
  };
  double lo1, hi1, lo2, hi2;
  span(c1, lo1, hi1);
  span(c2, lo2, hi2);

  auto plane_point = [&](double a, double b) {
    std::vector<float> p((size_t)D);
    for (long d = 0; d < D; ++d)
      p[(size_t)d] =
          (float)(res.mean[(size_t)d] + a * res.v1[(size_t)d] + b * res.v2[(size_t)d]);
    return p;
  };

  // grid metrics
  Tensor gridpts(grid_res * grid_res, D);
  std::vector<std::pair<double, double>> coords;
  for (long gi = 0; gi < grid_res; ++gi)
    for (long gj = 0; gj < grid_res; ++gj) {
      double a = lo1 + (hi1 - lo1) * (double)gi / (double)(grid_res - 1);
      double b = lo2 + (hi2 - lo2) * (double)gj / (double)(grid_res - 1);
      coords.emplace_back(a, b);
      std::vector<float> p = plane_point(a, b);
      std::copy(p.begin(), p.end(), gridpts.ptr((long)coords.size() - 1));
    }
  std::vector<double> gm = eval_rows(eval, gridpts);
  for (size_t k = 0; k < coords.size(); ++k)
    res.grid.push_back({coords[k].first, coords[k].second, gm[k]});

  // retained samples: own metric, plus the projection's metric for the delta
  std::vector<double> sample_metric = eval_rows(eval, out);
  for (long i = 0; i < n_samples; ++i) {
    if (rd[(size_t)i] >= recon_threshold) {
      ++res.dropped;
      continue;
    }
    double pm = eval(plane_point(c1[(size_t)i], c2[(size_t)i]));
    res.max_recon_metric_delta =
        std::max(res.max_recon_metric_delta, std::abs(sample_metric[(size_t)i] - pm));
    res.samples.push_back({c1[(size_t)i], c2[(size_t)i], sample_metric[(size_t)i], rd[(size_t)i]});
  }
  return res;
}

// ---------- plot-file output ----------

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  for (size_t i = 0; i < header.size(); ++i) f << (i ? "," : "") << header[i];
  f << "\n";
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw std::runtime_error("csv row width mismatch");
    for (size_t i = 0; i < r.size(); ++i) f << (i ? "," : "") << r[i];
    f << "\n";
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace ckptdiff
