#include "ckptdiff/pretrain.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "ckptdiff/optim.hpp"
#include "ckptdiff/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace ckptdiff {

void TrainConfig::validate() const {
  if (iters < 0) throw std::runtime_error("iters must be >= 0");
  if (batch < 1) throw std::runtime_error("batch must be >= 1");
  if (lr <= 0) throw std::runtime_error("lr must be positive");
  if (warmup_frac < 0 || warmup_frac > 1) throw std::runtime_error("warmup_frac must be in [0,1]");
  if (weight_decay < 0) throw std::runtime_error("weight_decay must be >= 0");
  if (beta2 <= 0 || beta2 >= 1) throw std::runtime_error("beta2 must be in (0,1)");
  if (ema_decay < 0 || ema_decay >= 1) throw std::runtime_error("ema_decay must be in [0,1)");
  if (eval_interval < 1) throw std::runtime_error("eval_interval must be >= 1");
  if (eval_batches < 1) throw std::runtime_error("eval_batches must be >= 1");
}

json TrainConfig::to_json() const {
  return {{"iters", iters},
          {"batch", batch},
          {"lr", lr},
          {"warmup_frac", warmup_frac},
          {"weight_decay", weight_decay},
          {"beta2", beta2},
          {"clip", clip},
          {"ema_decay", ema_decay},
          {"augment", augment},
          {"final_only", final_only},
          {"eval_interval", eval_interval},
          {"eval_batches", eval_batches},
          {"metric", metric},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.iters = j.value("iters", c.iters);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta2 = j.value("beta2", c.beta2);
  c.clip = j.value("clip", c.clip);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.augment = j.value("augment", c.augment);
  c.final_only = j.value("final_only", c.final_only);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.eval_batches = j.value("eval_batches", c.eval_batches);
  c.metric = j.value("metric", c.metric);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

long resolve_metric_index(const DatasetManifest& manifest, const std::string& metric) {
  if (metric.empty()) return 0;
  for (size_t i = 0; i < manifest.metric_names.size(); ++i)
    if (manifest.metric_names[i] == metric) return (long)i;
  throw std::runtime_error("dataset has no metric named '" + metric + "'");
}

TupleSample draw_tuple_sample(const LoadedDataset& ds, const std::vector<size_t>& from_runs,
                              long metric_idx, long J, bool augment, bool final_only, Rng& rng) {
  if (from_runs.empty()) throw std::runtime_error("cannot sample tuples from an empty split");
  const Run& run = ds.runs[from_runs[(size_t)rng.below(from_runs.size())]];
  const Checkpoint *c1, *c2;
  if (final_only) {
    c1 = &run.ckpts.front();
    c2 = &run.ckpts.back();
  } else {
    auto pair = sample_tuple(run, rng);
    c1 = pair.first;
    c2 = pair.second;
  }
  if (metric_idx < 0 || metric_idx >= (long)c1->metrics.size())
    throw std::runtime_error("metric index out of range for this dataset");

  TupleSample s;
  if (augment) {
    ParamVector a(run.arch), b(run.arch);
    a.values = c1->theta;
    b.values = c2->theta;
    Permutation perm = sample_permutation(run.arch, rng);
    s.theta = apply_permutation(perm, a).values;  // one permutation,
    s.theta_star = apply_permutation(perm, b).values;  // both endpoints
  } else {
    s.theta = c1->theta;
    s.theta_star = c2->theta;
  }
  normalize_inplace(s.theta, ds.manifest.norm);
  normalize_inplace(s.theta_star, ds.manifest.norm);
  s.l_cur = c1->metrics[(size_t)metric_idx];
  s.l_star = c2->metrics[(size_t)metric_idx];
  s.j = 1 + (long)rng.below((uint64_t)J);
  s.z.resize(s.theta_star.size());
  for (auto& v : s.z) v = (float)rng.normal();
  return s;
}

double gpt_batch_loss(const GptWeights& w, const std::vector<TupleSample>& batch,
                      const DiffusionSchedule& sched, std::vector<Tensor>* grads) {
  long B = (long)batch.size(), D = w.layout.total;
  Tensor xj(B, D), th(B, D), target(B, D);
  std::vector<double> lc((size_t)B), ls((size_t)B), jr((size_t)B);
  for (long i = 0; i < B; ++i) {
    const TupleSample& s = batch[(size_t)i];
    if ((long)s.theta.size() != D) throw std::runtime_error("sample width mismatch");
    std::vector<float> noised = q_sample(s.theta_star, s.j, s.z, sched);
    std::copy(noised.begin(), noised.end(), xj.data.begin() + i * D);
    std::copy(s.theta.begin(), s.theta.end(), th.data.begin() + i * D);
    std::copy(s.theta_star.begin(), s.theta_star.end(), target.data.begin() + i * D);
    lc[(size_t)i] = s.l_cur;
    ls[(size_t)i] = s.l_star;
    jr[(size_t)i] = (double)s.j;
  }

  Graph g;
  GptVars v = make_leaves(g, w);
  int out = build_gpt_forward(g, v, w.cfg, w.layout, g.input(xj), g.input(th), lc, ls, jr);
  int loss = g.mse(out, g.input(target));
  double lv = g.value(loss)[0];
  if (grads) {
    g.backward(loss);
    grads->clear();
    for (int id : v.all) grads->push_back(g.grad(id));
  }
  return lv;
}

double loss_on_split(const GptWeights& w, const LoadedDataset& ds,
                     const std::vector<size_t>& split_runs, long metric_idx, long num_batches,
                     long batch, uint64_t seed) {
  if (split_runs.empty()) throw std::runtime_error("cannot evaluate loss on an empty split");
  if (num_batches < 1 || batch < 1) throw std::runtime_error("need at least one batch");
  DiffusionSchedule sched = w.cfg.schedule();
  double sum = 0;
  for (long b = 0; b < num_batches; ++b) {
    std::vector<TupleSample> samples((size_t)batch);
    parallel_for(0, batch, [&](long i) {
      Rng rng = Rng(seed).child("sample", (uint64_t)b, (uint64_t)i);
      samples[(size_t)i] =
          draw_tuple_sample(ds, split_runs, metric_idx, w.cfg.J, false, false, rng);
    });
    sum += gpt_batch_loss(w, samples, sched, nullptr);
  }
  return sum / (double)num_batches;
}

json TrainRecord::to_json() const {
  return {{"iter", iter},
          {"train_loss", train_loss},
          {"train_split_loss", train_split_loss},
          {"test_split_loss", test_split_loss},
          {"align", align},
          {"lr", lr},
          {"ema_path", ema_path}};
}

TrainRecord TrainRecord::from_json(const json& j) {
  TrainRecord r;
  auto num = [&](const char* key) {
    const json& v = j.at(key);  // non-finite values serialize as null
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  r.iter = j.at("iter").get<long>();
  r.train_loss = num("train_loss");
  r.train_split_loss = num("train_split_loss");
  r.test_split_loss = num("test_split_loss");
  r.align = num("align");
  r.lr = num("lr");
  r.ema_path = j.value("ema_path", std::string());
  return r;
}

void TrainReport::save_jsonl(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : records) out << r.to_json().dump() << "\n";
}

TrainReport TrainReport::load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  TrainReport rep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rep.records.push_back(TrainRecord::from_json(json::parse(line)));
  }
  return rep;
}

TrainResult pretrain(const LoadedDataset& ds, const GptConfig& gcfg, const TrainConfig& tcfg,
                     const std::string& out_dir, const AlignProbe& probe) {
  gcfg.validate();
  tcfg.validate();
  if (ds.train_idx.empty()) throw std::runtime_error("dataset has no training runs");
  long metric_idx = resolve_metric_index(ds.manifest, tcfg.metric);
  std::string metric_name = ds.manifest.metric_names[(size_t)metric_idx];
  DiffusionSchedule sched = gcfg.schedule();
  Rng root(tcfg.seed);

  GptWeights w = init_gpt(gcfg, ds.manifest.arch, root.child("init").seed());
  if (w.layout.total != ds.manifest.D)
    throw std::runtime_error("token layout width disagrees with the dataset");

  std::vector<Tensor> params;
  w.visit([&](const std::string&, Tensor& t) { params.push_back(t); });
  AdamW opt;
  opt.beta2 = tcfg.beta2;
  opt.weight_decay = tcfg.weight_decay;
  Ema ema;
  ema.decay = tcfg.ema_decay;
  ema.init(params);

  auto push_params = [&](GptWeights& into, const std::vector<Tensor>& from) {
    size_t k = 0;
    into.visit([&](const std::string&, Tensor& t) { t.data = from[k++].data; });
  };
  auto ema_weights = [&]() {
    GptWeights ew = w;
    push_params(ew, ema.shadow);
    return ew;
  };

  // observed range of the conditioning metric, for later prompt defaults
  double mlo = std::numeric_limits<double>::infinity(), mhi = -mlo;
  for (size_t ri : ds.train_idx)
    for (const auto& c : ds.runs[ri].ckpts) {
      mlo = std::min(mlo, (double)c.metrics[(size_t)metric_idx]);
      mhi = std::max(mhi, (double)c.metrics[(size_t)metric_idx]);
    }
  json meta = {{"metric", metric_name},
               {"task", ds.manifest.task},
               {"train_seed", tcfg.seed},
               {"augment", tcfg.augment},
               {"metric_range", {{"lo", mlo}, {"hi", mhi}}}};
  std::string report_path;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    report_path = out_dir + "/report.jsonl";
    std::ofstream(report_path, std::ios::trunc);  // start a fresh report
  }

  long warmup = std::lround(tcfg.warmup_frac * (double)tcfg.iters);
  TrainReport report;
  double interval_loss = 0;
  long interval_n = 0;
  std::vector<TupleSample> samples((size_t)tcfg.batch);
  std::vector<Tensor> grads;

  for (long iter = 0; iter < tcfg.iters; ++iter) {
    parallel_for(0, tcfg.batch, [&](long i) {
      Rng rng = root.child("sample", (uint64_t)iter, (uint64_t)i);
      samples[(size_t)i] = draw_tuple_sample(ds, ds.train_idx, metric_idx, gcfg.J, tcfg.augment,
                                             tcfg.final_only, rng);
    });
    double loss = gpt_batch_loss(w, samples, sched, &grads);
    if (!std::isfinite(loss))
      throw std::runtime_error("training loss became non-finite at iteration " +
                               std::to_string(iter) + " (lr " +
                               std::to_string(lr_at(iter, tcfg.iters, warmup, tcfg.lr)) + ")");
    interval_loss += loss;
    ++interval_n;

    clip_global_norm(grads, tcfg.clip);
    double lr = lr_at(iter, tcfg.iters, warmup, tcfg.lr);
    opt.step(params, grads, lr);
    push_params(w, params);
    ema.update(params);

    long done = iter + 1;
    if (done % tcfg.eval_interval == 0 || done == tcfg.iters) {
      TrainRecord rec;
      rec.iter = done;
      rec.train_loss = interval_loss / (double)interval_n;
      interval_loss = 0;
      interval_n = 0;
      rec.lr = lr;
      rec.train_split_loss =
          loss_on_split(w, ds, ds.train_idx, metric_idx, tcfg.eval_batches, tcfg.batch,
                        root.child("loss-train", (uint64_t)done).seed());
      rec.test_split_loss =
          ds.test_idx.empty()
              ? std::numeric_limits<double>::quiet_NaN()
              : loss_on_split(w, ds, ds.test_idx, metric_idx, tcfg.eval_batches, tcfg.batch,
                              root.child("loss-test", (uint64_t)done).seed());
      GptWeights ew = ema_weights();
      rec.align = probe ? probe(ew) : std::numeric_limits<double>::quiet_NaN();
      if (!out_dir.empty()) {
        rec.ema_path = out_dir + "/model_ema.bin";
        save_gpt(rec.ema_path, ew, ds.manifest.norm, meta);
        std::ofstream app(report_path, std::ios::app);
        app << rec.to_json().dump() << "\n";
      }
      report.records.push_back(std::move(rec));
    }
  }

  GptWeights final_ema = ema_weights();
  if (!out_dir.empty()) {  // rewrite both endpoints so a 0-iteration run still lands on disk
    save_gpt(out_dir + "/model_ema.bin", final_ema, ds.manifest.norm, meta);
    save_gpt(out_dir + "/model_raw.bin", w, ds.manifest.norm, meta);
  }
  return TrainResult{std::move(w), std::move(final_ema), std::move(report)};
}

}  // namespace ckptdiff
