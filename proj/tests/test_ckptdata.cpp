#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ckptdiff/checkpoints.hpp"
#include "ckptdiff/parallel.hpp"

using namespace ckptdiff;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("ckptdata");

static std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST_CASE("checkpoint step selection") {
  CHECK(select_checkpoints(10, 2, 0) == std::vector<uint64_t>{0, 10});
  std::vector<uint64_t> all;
  for (uint64_t s = 0; s <= 10; ++s) all.push_back(s);
  CHECK(select_checkpoints(10, 11, 7) == all);
  CHECK_THROWS(select_checkpoints(10, 12, 0));
  CHECK_THROWS(select_checkpoints(10, 1, 0));

  for (uint64_t seed = 0; seed < 50; ++seed) {
    auto s = select_checkpoints(1000, 200, seed);
    CHECK(s.size() == 200);
    CHECK(s.front() == 0);
    CHECK(s.back() == 1000);
    for (size_t i = 1; i < s.size(); ++i) CHECK(s[i] > s[i - 1]);
  }
  CHECK(select_checkpoints(1000, 200, 3) == select_checkpoints(1000, 200, 3));
}

TEST_CASE("tuple sampling is ordered and uniform") {
  Rng rng(99);
  for (int i = 0; i < 1000; ++i) {
    auto [a, b] = sample_tuple_indices(2, rng);
    CHECK(a == 0);
    CHECK(b == 1);
  }

  const size_t C = 6;
  std::vector<std::vector<long>> pair_counts(C, std::vector<long>(C, 0));
  const long draws = 60000;
  for (long i = 0; i < draws; ++i) {
    auto [a, b] = sample_tuple_indices(C, rng);
    REQUIRE(a < b);
    ++pair_counts[a][b];
  }
  // conditioned on the earlier index being 0, the later index should be
  // uniform on {1..5}: chi-square with 4 dof, 0.999 quantile = 18.467
  long total0 = 0;
  for (size_t b = 1; b < C; ++b) total0 += pair_counts[0][b];
  double chi0 = 0, exp0 = (double)total0 / (C - 1);
  for (size_t b = 1; b < C; ++b) {
    double d = pair_counts[0][b] - exp0;
    chi0 += d * d / exp0;
  }
  CHECK(chi0 < 18.467);
  // and all 15 ordered pairs should be equally likely: 14 dof, 0.999
  // quantile = 36.123
  double expp = (double)draws / 15.0, chip = 0;
  for (size_t a = 0; a < C; ++a)
    for (size_t b = a + 1; b < C; ++b) {
      double d = pair_counts[a][b] - expp;
      chip += d * d / expp;
    }
  CHECK(chip < 36.123);

  CHECK_THROWS(sample_tuple_indices(1, rng));
  Run tiny;
  tiny.ckpts.resize(2);
  tiny.ckpts[0].step = 0;
  tiny.ckpts[1].step = 5;
  auto [first, second] = sample_tuple(tiny, rng);
  CHECK(first->step == 0);
  CHECK(second->step == 5);
}

TEST_CASE("permutation augmentation preserves the function") {
  ArchSpec arch = ArchSpec::mlp({2, 16, 4}, Act::Relu);
  Rng rng(5);

  Permutation ident;
  ident.hidden.push_back(std::vector<long>(16));
  for (long i = 0; i < 16; ++i) ident.hidden[0][(size_t)i] = i;
  ParamVector theta = init_params(arch, InitScheme::UniformFanIn, 1);
  CHECK(apply_permutation(ident, theta).values == theta.values);

  // deeper net with selu, plus the blobs net: outputs must agree at 1e-5
  for (const ArchSpec& a :
       {arch, ArchSpec::mlp({4, 12, 12, 2}, Act::Selu), ArchSpec::mlp({3, 8, 8, 8, 5}, Act::Relu)}) {
    double worst = 0;
    for (int rep = 0; rep < 100; ++rep) {
      ParamVector t = init_params(a, InitScheme::KaimingNormal, (uint64_t)rep + 10);
      Permutation p = sample_permutation(a, rng);
      ParamVector tp = apply_permutation(p, t);
      TensorT<double> x(3, a.input_dim());
      for (long i = 0; i < x.size(); ++i) x[i] = rng.uniform(-2, 2);
      TensorT<double> y0 = forward_task(t, x), y1 = forward_task(tp, x);
      for (long i = 0; i < y0.size(); ++i) worst = std::max(worst, std::abs(y0[i] - y1[i]));

      ParamVector back = apply_permutation(invert_permutation(p), tp);
      CHECK(back.values == t.values);  // bit-exact round-trip
    }
    CHECK(worst < 1e-5);
  }

  // metrics are invariant under relabeling
  TaskDataset ds = make_blobs(128, 128, 2);
  for (int rep = 0; rep < 100; ++rep) {
    ParamVector t = init_params(arch, InitScheme::UniformFanIn, (uint64_t)rep);
    Permutation p = sample_permutation(arch, rng);
    Metrics m0 = eval_metrics(t, ds);
    Metrics m1 = eval_metrics(apply_permutation(p, t), ds);
    CHECK(std::abs(m0.test_loss - m1.test_loss) < 1e-6);
    CHECK(m0.test_error == m1.test_error);
  }

  ArchSpec other = ArchSpec::mlp({2, 8, 4}, Act::Relu);
  Permutation wrong = sample_permutation(other, rng);
  CHECK_THROWS(apply_permutation(wrong, theta));
}

TEST_CASE("normalization") {
  Run a, b;
  a.arch = b.arch = ArchSpec::mlp({1, 2}, Act::None, false);
  a.ckpts.resize(1);
  b.ckpts.resize(1);
  a.ckpts[0].theta = {1, -1};
  b.ckpts[0].theta = {2, -2};
  NormStats s = compute_norm_stats({&a, &b}, 0.458);
  CHECK(s.scale_factor == doctest::Approx(0.458 / std::sqrt(2.5)).epsilon(1e-12));

  // round-trip: one float rounding each way, so error <= ~1.2e-7 * |theta|;
  // absolute 1e-7 over the weight range the nets actually occupy
  Rng rng(4);
  std::vector<float> theta(500);
  for (auto& v : theta) v = (float)rng.uniform(-0.8, 0.8);
  theta.push_back(2.5f);
  theta.push_back(-7.0f);
  std::vector<float> round = theta;
  normalize_inplace(round, s);
  denormalize_inplace(round, s);
  for (size_t i = 0; i < theta.size(); ++i) {
    double a = std::abs((double)theta[i]);
    if (a <= 0.8) CHECK(std::abs(round[i] - theta[i]) < 1e-7);
    CHECK(std::abs(round[i] - theta[i]) <= 1.3e-7 * std::max(1.0, a));
  }

  // after normalizing the training split its std equals the target
  std::vector<float> all;
  for (const Run* r : {&a, &b})
    for (float v : r->ckpts[0].theta) all.push_back(v);
  normalize_inplace(all, s);
  double mean = 0, var = 0;
  for (float v : all) mean += v;
  mean /= (double)all.size();
  for (float v : all) var += (v - mean) * (v - mean);
  var /= (double)all.size();
  CHECK(std::abs(std::sqrt(var) - 0.458) < 1e-6);

  Run flat;
  flat.ckpts.resize(1);
  flat.ckpts[0].theta = {3, 3, 3};
  CHECK_THROWS(compute_norm_stats({&flat}, 0.458));
  CHECK_THROWS(compute_norm_stats({}, 0.458));
}

TEST_CASE("run splitting") {
  auto [train, test] = split_runs(10, 0.2, 123);
  CHECK(train.size() == 8);
  CHECK(test.size() == 2);
  std::vector<bool> seen(10, false);
  for (long i : train) seen[(size_t)i] = true;
  for (long i : test) {
    CHECK(!seen[(size_t)i]);
    seen[(size_t)i] = true;
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](bool v) { return v; }));
  CHECK(split_runs(10, 0.2, 123) == split_runs(10, 0.2, 123));
  CHECK_THROWS(split_runs(10, 0.0, 1));
  CHECK_THROWS(split_runs(10, 1.0, 1));
}

TEST_CASE("run files round-trip bit-exactly") {
  Rng rng(8);
  Run run;
  run.run_id = "run00042";
  run.seed = 777;
  run.arch = ArchSpec::mlp({2, 16, 4}, Act::Relu);
  run.metric_names = {"test_loss", "test_error"};
  run.hyper = {{"lr", 0.1}, {"iters", 100}};
  uint64_t step = 0;
  for (int i = 0; i < 5; ++i) {
    Checkpoint c;
    c.step = step;
    step += 1 + rng.below(30);
    c.metrics = {(float)rng.uniform(0, 2), (float)rng.uniform(0, 100)};
    c.theta.resize((size_t)run.arch.param_count());
    for (auto& v : c.theta) v = (float)rng.normal();
    run.ckpts.push_back(std::move(c));
  }

  std::string path = "/tmp/ckptdiff_test_run.bin";
  write_run_file(path, run);
  Run back = read_run_file(path);
  CHECK(back.run_id == run.run_id);
  CHECK(back.seed == run.seed);
  CHECK(back.arch == run.arch);
  CHECK(back.metric_names == run.metric_names);
  CHECK(back.hyper == run.hyper);
  REQUIRE(back.ckpts.size() == run.ckpts.size());
  for (size_t i = 0; i < run.ckpts.size(); ++i) {
    CHECK(back.ckpts[i].step == run.ckpts[i].step);
    CHECK(back.ckpts[i].metrics == run.ckpts[i].metrics);
    CHECK(back.ckpts[i].theta == run.ckpts[i].theta);
  }

  std::ofstream bad(path, std::ios::binary | std::ios::trunc);
  bad << "NOTMAGIC" << std::string(64, 'x');
  bad.close();
  CHECK_THROWS(read_run_file(path));
  std::remove(path.c_str());
}

static DataGenConfig small_blobs_cfg() {
  DataGenConfig cfg;
  cfg.task = "blobs";
  cfg.runs = 4;
  cfg.ckpts_per_run = 5;
  cfg.seed = 11;
  cfg.test_fraction = 0.25;
  cfg.data_train = 128;
  cfg.data_test = 128;
  cfg.sup.iters = 40;
  return cfg;
}

TEST_CASE("dataset generation end to end") {
  DataGenConfig cfg = small_blobs_cfg();
  std::string dir = "/tmp/ckptdiff_test_ds1";
  fs::remove_all(dir);
  DatasetManifest m = generate_dataset(cfg, dir);

  CHECK(m.runs == 4);
  CHECK(m.failed_runs == 0);
  CHECK(m.D == 116);
  CHECK(m.train_runs.size() == 3);
  CHECK(m.test_runs.size() == 1);
  CHECK(m.metric_names == std::vector<std::string>{"test_loss", "test_error"});

  LoadedDataset ds = load_dataset(dir);
  CHECK(ds.runs.size() == 4);
  for (const Run& r : ds.runs) {
    REQUIRE(r.ckpts.size() == 5);
    CHECK(r.ckpts.front().step == 0);
    CHECK(r.ckpts.back().step == 40);
    for (size_t i = 1; i < r.ckpts.size(); ++i) CHECK(r.ckpts[i].step > r.ckpts[i - 1].step);
    for (const auto& c : r.ckpts) {
      for (float v : c.metrics) CHECK(std::isfinite(v));
      CHECK(c.theta.size() == 116);
    }
  }

  // training-split std after normalization hits the target
  double n = 0, sum = 0, sumsq = 0;
  for (size_t i : ds.train_idx)
    for (const auto& c : ds.runs[i].ckpts)
      for (float v : c.theta) {
        double x = (double)v * m.norm.scale_factor;
        sum += x;
        sumsq += x * x;
        n += 1;
      }
  double std_norm = std::sqrt(sumsq / n - (sum / n) * (sum / n));
  CHECK(std::abs(std_norm - cfg.target_std) < 1e-6);

  // task rebuilds to the same bytes the runs trained on
  TaskDataset task = rebuild_task(m, dir);
  CHECK(task.train_x.nrow == 128);
  CHECK(task.num_classes == 4);

  fs::remove_all(dir);
}

TEST_CASE("dataset generation is deterministic for any job count") {
  DataGenConfig cfg = small_blobs_cfg();
  std::string d1 = "/tmp/ckptdiff_test_ds_j1", d3 = "/tmp/ckptdiff_test_ds_j3";
  fs::remove_all(d1);
  fs::remove_all(d3);

  set_jobs(1);
  generate_dataset(cfg, d1);
  set_jobs(3);
  generate_dataset(cfg, d3);
  set_jobs(1);

  for (const auto& f : {"run00000.bin", "run00001.bin", "run00002.bin", "run00003.bin",
                        "manifest.json"})
    CHECK(slurp(d1 + "/" + f) == slurp(d3 + "/" + f));

  fs::remove_all(d1);
  fs::remove_all(d3);
}

TEST_CASE("policy dataset generation") {
  DataGenConfig cfg;
  cfg.task = "cartpole";
  cfg.runs = 2;
  cfg.ckpts_per_run = 3;
  cfg.seed = 21;
  cfg.test_fraction = 0.5;
  cfg.pol.iters = 25;
  cfg.pol.episodes_per_update = 4;
  std::string dir = "/tmp/ckptdiff_test_ds_pol";
  fs::remove_all(dir);
  DatasetManifest m = generate_dataset(cfg, dir);
  CHECK(m.metric_names == std::vector<std::string>{"return"});
  CHECK(m.D == 242);
  LoadedDataset ds = load_dataset(dir);
  for (const Run& r : ds.runs) {
    CHECK(r.ckpts.size() == 3);
    for (const auto& c : r.ckpts) {
      CHECK(c.metrics[0] >= 1.0f);
      CHECK(c.metrics[0] <= 500.0f);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("config round-trip") {
  DataGenConfig cfg = small_blobs_cfg();
  cfg.arch = ArchSpec::mlp({2, 8, 4}, Act::Relu);
  DataGenConfig back = DataGenConfig::from_json(cfg.to_json());
  CHECK(back.task == cfg.task);
  CHECK(back.arch == cfg.arch);
  CHECK(back.runs == cfg.runs);
  CHECK(back.ckpts_per_run == cfg.ckpts_per_run);
  CHECK(back.sup.iters == cfg.sup.iters);
  CHECK(back.test_fraction == cfg.test_fraction);
  CHECK(DataGenConfig::from_json(nlohmann::json::object()).task == "blobs");
}

TEST_SUITE_END();
