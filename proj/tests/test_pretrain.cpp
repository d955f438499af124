#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "ckptdiff/parallel.hpp"
#include "ckptdiff/pretrain.hpp"

using namespace ckptdiff;

TEST_SUITE_BEGIN("pretrain");

// In-memory dataset with fabricated checkpoints: loss decays along each run,
// error tracks it; thetas are random unless constant_runs pins them per run.
static LoadedDataset synth_ds(const ArchSpec& arch, long n_runs, long n_ckpts, uint64_t seed,
                              bool constant_runs = false) {
  LoadedDataset ds;
  Rng rng(seed);
  long D = arch.param_count();
  for (long r = 0; r < n_runs; ++r) {
    Run run;
    run.run_id = "run-" + std::to_string(r);
    run.seed = seed + (uint64_t)r;
    run.arch = arch;
    run.metric_names = {"test_loss", "test_error"};
    std::vector<float> base((size_t)D);
    for (auto& v : base) v = (float)rng.normal(0.0, 0.4);
    for (long c = 0; c < n_ckpts; ++c) {
      Checkpoint ck;
      ck.step = (uint64_t)(c * 10);
      ck.theta = base;
      if (!constant_runs && c > 0)
        for (auto& v : ck.theta) v += (float)rng.normal(0.0, 0.1);
      float loss = (float)(2.0 / (1.0 + c) + 0.05 * rng.uniform());
      ck.metrics = {loss, (float)(30.0 * loss)};
      run.ckpts.push_back(std::move(ck));
    }
    ds.runs.push_back(std::move(run));
  }
  ds.manifest.task = "blobs";
  ds.manifest.arch = arch;
  ds.manifest.metric_names = {"test_loss", "test_error"};
  ds.manifest.runs = n_runs;
  ds.manifest.ckpts_per_run = n_ckpts;
  ds.manifest.D = D;
  ds.manifest.seed = seed;
  ds.manifest.norm.scale_factor = 1.145;
  for (long r = 0; r < n_runs; ++r) {
    ds.manifest.run_files.push_back(ds.runs[(size_t)r].run_id + ".bin");
    if (n_runs > 1 && r == n_runs - 1) {
      ds.manifest.test_runs.push_back(ds.runs[(size_t)r].run_id);
      ds.test_idx.push_back((size_t)r);
    } else {
      ds.manifest.train_runs.push_back(ds.runs[(size_t)r].run_id);
      ds.train_idx.push_back((size_t)r);
    }
  }
  return ds;
}

static GptConfig tiny_gpt(long J = 12) {
  GptConfig g;
  g.hidden = 16;
  g.layers = 1;
  g.heads = 2;
  g.freqs = 8;
  g.max_freq_exp = 6.0;
  g.J = J;
  g.beta_end = 0.15;
  return g;
}

TEST_CASE("config validation and round-trip") {
  TrainConfig c;
  c.validate();
  TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  TrainConfig bad = c;
  bad.ema_decay = 1.0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.batch = 0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.warmup_frac = 1.5;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.beta2 = 1.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("tuple sampling mechanics") {
  ArchSpec arch = ArchSpec::mlp({2, 8, 4}, Act::Relu);
  LoadedDataset ds = synth_ds(arch, 4, 5, 11);

  Rng rng(3);
  std::set<long> steps_seen;
  for (int rep = 0; rep < 200; ++rep) {
    TupleSample s = draw_tuple_sample(ds, ds.train_idx, 0, 12, false, false, rng);
    REQUIRE((long)s.theta.size() == arch.param_count());
    REQUIRE(s.z.size() == s.theta_star.size());
    CHECK(s.j >= 1);
    CHECK(s.j <= 12);
    steps_seen.insert(s.j);

    // the pair must be an (earlier, later) pair of one stored run, normalized
    bool matched = false;
    for (size_t ri : ds.train_idx) {
      const Run& run = ds.runs[ri];
      for (size_t a = 0; a < run.ckpts.size() && !matched; ++a)
        for (size_t b = a + 1; b < run.ckpts.size() && !matched; ++b) {
          if (s.l_cur != run.ckpts[a].metrics[0] || s.l_star != run.ckpts[b].metrics[0]) continue;
          std::vector<float> t1 = run.ckpts[a].theta, t2 = run.ckpts[b].theta;
          normalize_inplace(t1, ds.manifest.norm);
          normalize_inplace(t2, ds.manifest.norm);
          matched = t1 == s.theta && t2 == s.theta_star;
        }
    }
    CHECK(matched);
  }
  CHECK(steps_seen.size() == 12);  // every diffusion step shows up in 200 draws

  // final-only restricts to the endpoints of a run
  for (int rep = 0; rep < 50; ++rep) {
    TupleSample s = draw_tuple_sample(ds, ds.train_idx, 0, 12, false, true, rng);
    bool endpoint = false;
    for (size_t ri : ds.train_idx) {
      const Run& run = ds.runs[ri];
      endpoint |= s.l_cur == run.ckpts.front().metrics[0] &&
                  s.l_star == run.ckpts.back().metrics[0];
    }
    CHECK(endpoint);
  }

  // deterministic in the stream, metric column selectable
  Rng r1(9), r2(9);
  TupleSample a = draw_tuple_sample(ds, ds.train_idx, 1, 12, true, false, r1);
  TupleSample b = draw_tuple_sample(ds, ds.train_idx, 1, 12, true, false, r2);
  CHECK(a.theta == b.theta);
  CHECK(a.theta_star == b.theta_star);
  CHECK(a.z == b.z);
  CHECK(a.j == b.j);

  std::vector<size_t> none;
  CHECK_THROWS(draw_tuple_sample(ds, none, 0, 12, false, false, rng));
  CHECK_THROWS(draw_tuple_sample(ds, ds.train_idx, 5, 12, false, false, rng));
}

TEST_CASE("augmentation applies one permutation to both tuple endpoints") {
  ArchSpec arch = ArchSpec::mlp({2, 16, 4}, Act::Relu);
  // identical checkpoints: if the two endpoints got different permutations,
  // the permuted vectors would disagree
  LoadedDataset ds = synth_ds(arch, 2, 4, 21, /*constant_runs=*/true);
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    TupleSample s = draw_tuple_sample(ds, ds.train_idx, 0, 12, true, false, rng);
    CHECK(s.theta == s.theta_star);
  }

  // and the permutation leaves the actual network metrics unchanged
  TaskDataset task = make_blobs(256, 128, 77);
  LoadedDataset real = synth_ds(arch, 2, 4, 22);
  for (auto& run : real.runs)
    for (auto& ck : run.ckpts) {
      ParamVector pv(arch);
      pv.values = ck.theta;
      Metrics m = eval_metrics(pv, task);
      ck.metrics = {(float)m.test_loss, (float)m.test_error};
    }
  for (int rep = 0; rep < 30; ++rep) {
    TupleSample s = draw_tuple_sample(real, real.train_idx, 0, 12, true, false, rng);
    ParamVector pv(arch);
    pv.values = s.theta;
    denormalize_inplace(pv.values, real.manifest.norm);
    Metrics m = eval_metrics(pv, task);
    CHECK(std::abs(m.test_loss - (double)s.l_cur) < 1e-5);
    pv.values = s.theta_star;
    denormalize_inplace(pv.values, real.manifest.norm);
    m = eval_metrics(pv, task);
    CHECK(std::abs(m.test_loss - (double)s.l_star) < 1e-5);
  }
}

TEST_CASE("batch loss matches a direct oracle on the identity model") {
  ArchSpec arch = ArchSpec::mlp({2, 8, 4}, Act::Relu);
  LoadedDataset ds = synth_ds(arch, 3, 4, 31);
  GptConfig gcfg = tiny_gpt();
  GptWeights w = init_gpt(gcfg, arch, 1);
  DiffusionSchedule sched = gcfg.schedule();

  Rng rng(8);
  std::vector<TupleSample> batch;
  for (int i = 0; i < 6; ++i)
    batch.push_back(draw_tuple_sample(ds, ds.train_idx, 0, gcfg.J, false, false, rng));

  // the identity model predicts theta, so the loss is the mean squared
  // parameter delta of the tuples, independent of j and z
  double acc = 0;
  long n = 0;
  for (const auto& s : batch)
    for (size_t d = 0; d < s.theta.size(); ++d) {
      double diff = (double)s.theta[d] - (double)s.theta_star[d];
      acc += diff * diff;
      ++n;
    }
  double loss = gpt_batch_loss(w, batch, sched, nullptr);
  CHECK(loss == (double)(float)(acc / (double)n));  // the graph stores the scalar as float

  // gradient mode agrees on the value and yields one gradient per weight
  std::vector<Tensor> grads;
  double loss2 = gpt_batch_loss(w, batch, sched, &grads);
  CHECK(loss2 == loss);
  CHECK((long)grads.size() > 0);
  long total = 0;
  for (const auto& g : grads) total += g.size();
  CHECK(total == w.param_count());
}

TEST_CASE("loss on a split: zero for constant runs, deterministic, errors") {
  ArchSpec arch = ArchSpec::mlp({2, 8, 4}, Act::Relu);
  GptConfig gcfg = tiny_gpt();
  GptWeights w = init_gpt(gcfg, arch, 2);

  // constant-theta runs make every tuple (theta, theta); identity predicts it
  LoadedDataset constant = synth_ds(arch, 3, 4, 41, /*constant_runs=*/true);
  CHECK(loss_on_split(w, constant, constant.train_idx, 0, 2, 8, 123) == 0.0);

  LoadedDataset ds = synth_ds(arch, 3, 4, 42);
  double a = loss_on_split(w, ds, ds.train_idx, 0, 2, 8, 50);
  double b = loss_on_split(w, ds, ds.train_idx, 0, 2, 8, 50);
  double c = loss_on_split(w, ds, ds.train_idx, 0, 2, 8, 51);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a > 0.0);

  std::vector<size_t> none;
  CHECK_THROWS(loss_on_split(w, ds, none, 0, 2, 8, 50));
  CHECK_THROWS(loss_on_split(w, ds, ds.train_idx, 0, 0, 8, 50));
}

TEST_CASE("zero iterations returns the untouched identity init") {
  ArchSpec arch = ArchSpec::mlp({2, 8, 4}, Act::Relu);
  LoadedDataset ds = synth_ds(arch, 3, 4, 51);
  GptConfig gcfg = tiny_gpt();
  TrainConfig tcfg;
  tcfg.iters = 0;
  tcfg.batch = 4;
  TrainResult res = pretrain(ds, gcfg, tcfg);
  CHECK(res.report.records.empty());

  GptWeights init = init_gpt(gcfg, arch, Rng(tcfg.seed).child("init").seed());
  std::vector<float> a, b, c;
  res.raw.visit([&](const std::string&, Tensor& t) { a.insert(a.end(), t.data.begin(), t.data.end()); });
  res.ema.visit([&](const std::string&, Tensor& t) { b.insert(b.end(), t.data.begin(), t.data.end()); });
  init.visit([&](const std::string&, Tensor& t) { c.insert(c.end(), t.data.begin(), t.data.end()); });
  CHECK(a == c);
  CHECK(b == c);

  // still an exact identity map
  long D = arch.param_count();
  Tensor xj(2, D), th(2, D);
  Rng rng(6);
  for (auto& v : xj.data) v = (float)rng.normal();
  for (auto& v : th.data) v = (float)rng.normal(0.0, 0.4);
  Tensor out = gpt_apply(res.raw, xj, th, {0.5f, 1.0f}, {0.1f, 0.2f}, 3);
  for (long i = 0; i < out.size(); ++i) CHECK(out[i] == th[i]);
}

TEST_CASE("overfit smoke: one run, two checkpoints") {
  ArchSpec arch = ArchSpec::mlp({2, 8, 2}, Act::Relu);
  LoadedDataset ds = synth_ds(arch, 1, 2, 61);
  GptConfig gcfg = tiny_gpt(8);
  TrainConfig tcfg;
  tcfg.iters = 500;
  tcfg.batch = 8;
  tcfg.lr = 2e-3;
  tcfg.augment = false;
  tcfg.eval_interval = 100;
  tcfg.eval_batches = 2;
  tcfg.seed = 7;

  GptWeights init = init_gpt(gcfg, arch, Rng(tcfg.seed).child("init").seed());
  double before = loss_on_split(init, ds, ds.train_idx, 0, 4, 16, 99);
  TrainResult res = pretrain(ds, gcfg, tcfg);
  double after = loss_on_split(res.raw, ds, ds.train_idx, 0, 4, 16, 99);
  CHECK(after < 0.1 * before);

  // intervals are monotone and weights actually moved
  long prev = 0;
  for (const auto& r : res.report.records) {
    CHECK(r.iter > prev);
    prev = r.iter;
  }
  REQUIRE(res.report.records.size() == 5);
  CHECK(res.report.records.back().train_loss < res.report.records.front().train_loss);
}

TEST_CASE("determinism across reruns and worker counts; EMA differs from raw") {
  ArchSpec arch = ArchSpec::mlp({2, 8, 4}, Act::Relu);
  LoadedDataset ds = synth_ds(arch, 4, 4, 71);
  GptConfig gcfg = tiny_gpt(8);
  TrainConfig tcfg;
  tcfg.iters = 30;
  tcfg.batch = 6;
  tcfg.eval_interval = 10;
  tcfg.eval_batches = 1;
  tcfg.seed = 3;

  TrainResult r1 = pretrain(ds, gcfg, tcfg);
  int keep = job_count();
  set_jobs(3);
  TrainResult r2 = pretrain(ds, gcfg, tcfg);
  set_jobs(keep);

  REQUIRE(r1.report.records.size() == r2.report.records.size());
  for (size_t i = 0; i < r1.report.records.size(); ++i)
    CHECK(r1.report.records[i].to_json().dump() == r2.report.records[i].to_json().dump());
  std::vector<float> a, b;
  r1.raw.visit([&](const std::string&, Tensor& t) { a.insert(a.end(), t.data.begin(), t.data.end()); });
  r2.raw.visit([&](const std::string&, Tensor& t) { b.insert(b.end(), t.data.begin(), t.data.end()); });
  CHECK(a == b);

  std::vector<float> raw, ema;
  r1.raw.visit([&](const std::string&, Tensor& t) { raw.insert(raw.end(), t.data.begin(), t.data.end()); });
  r1.ema.visit([&](const std::string&, Tensor& t) { ema.insert(ema.end(), t.data.begin(), t.data.end()); });
  CHECK(raw != ema);
}

TEST_CASE("records, probe cadence, and the report file") {
  ArchSpec arch = ArchSpec::mlp({2, 8, 4}, Act::Relu);
  LoadedDataset ds = synth_ds(arch, 3, 4, 81);
  GptConfig gcfg = tiny_gpt(8);
  TrainConfig tcfg;
  tcfg.iters = 10;
  tcfg.batch = 4;
  tcfg.eval_interval = 4;
  tcfg.eval_batches = 1;

  long probe_calls = 0;
  std::string dir = "/tmp/ckptdiff_test_pretrain";
  std::filesystem::remove_all(dir);
  TrainResult res = pretrain(ds, gcfg, tcfg, dir, [&](const GptWeights& w) {
    ++probe_calls;
    return (double)w.cfg.hidden;  // arbitrary deterministic score
  });

  REQUIRE(res.report.records.size() == 3);  // 4, 8, final 10
  CHECK(res.report.records[0].iter == 4);
  CHECK(res.report.records[1].iter == 8);
  CHECK(res.report.records[2].iter == 10);
  CHECK(probe_calls == 3);
  for (const auto& r : res.report.records) {
    CHECK(r.align == 16.0);
    CHECK(std::isfinite(r.train_split_loss));
    CHECK(std::isfinite(r.test_split_loss));
    CHECK(r.ema_path == dir + "/model_ema.bin");
  }

  // the snapshot on disk is the final EMA, metric recorded in its header
  LoadedGpt snap = load_gpt(dir + "/model_ema.bin");
  CHECK(snap.meta.at("metric") == "test_loss");
  std::vector<float> a, b;
  snap.weights.visit([&](const std::string&, Tensor& t) { a.insert(a.end(), t.data.begin(), t.data.end()); });
  res.ema.visit([&](const std::string&, Tensor& t) { b.insert(b.end(), t.data.begin(), t.data.end()); });
  CHECK(a == b);

  // report.jsonl mirrors the in-memory report, including NaN-free fields
  TrainReport back = TrainReport::load_jsonl(dir + "/report.jsonl");
  REQUIRE(back.records.size() == res.report.records.size());
  for (size_t i = 0; i < back.records.size(); ++i)
    CHECK(back.records[i].to_json().dump() == res.report.records[i].to_json().dump());

  // NaN fields survive a save/load cycle as nulls
  TrainReport nanrep;
  TrainRecord rec;
  rec.iter = 1;
  rec.align = std::numeric_limits<double>::quiet_NaN();
  rec.test_split_loss = std::numeric_limits<double>::quiet_NaN();
  nanrep.records.push_back(rec);
  nanrep.save_jsonl(dir + "/nan.jsonl");
  TrainReport nb = TrainReport::load_jsonl(dir + "/nan.jsonl");
  REQUIRE(nb.records.size() == 1);
  CHECK(std::isnan(nb.records[0].align));
  CHECK(std::isnan(nb.records[0].test_split_loss));
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt data aborts with a diagnostic") {
  ArchSpec arch = ArchSpec::mlp({2, 8, 4}, Act::Relu);
  LoadedDataset ds = synth_ds(arch, 2, 3, 91);
  ds.runs[0].ckpts[1].theta[3] = std::numeric_limits<float>::quiet_NaN();
  GptConfig gcfg = tiny_gpt(8);
  TrainConfig tcfg;
  tcfg.iters = 20;
  tcfg.batch = 8;
  CHECK_THROWS_WITH_AS(pretrain(ds, gcfg, tcfg),
                       doctest::Contains("non-finite"), std::runtime_error);
}

TEST_SUITE_END();
