#include <doctest.h>

#include <cstdio>

#include "ckptdiff/tasks.hpp"

using namespace ckptdiff;

TEST_SUITE_BEGIN("tasks");

static ArchSpec blobs_arch() { return ArchSpec::mlp({2, 16, 4}, Act::Relu); }

TEST_CASE("arch bookkeeping") {
  ArchSpec a = blobs_arch();
  CHECK(a.param_count() == 2 * 16 + 16 + 16 * 4 + 4);
  CHECK(a.layers.size() == 2);
  CHECK(a.layers[0].act == Act::Relu);
  CHECK(a.layers[1].act == Act::None);
  ArchSpec b = ArchSpec::from_json(a.to_json());
  CHECK(a == b);
}

TEST_CASE("init schemes") {
  ArchSpec a = ArchSpec::mlp({100, 8, 4}, Act::Relu);
  ParamVector p = init_params(a, InitScheme::UniformFanIn, 5);
  for (long i = 0; i < a.layers[0].param_count(); ++i) {
    CHECK(p.values[(size_t)i] >= -0.1f);
    CHECK(p.values[(size_t)i] <= 0.1f);
  }
  ParamVector p2 = init_params(a, InitScheme::UniformFanIn, 5);
  CHECK(p.values == p2.values);
  ParamVector p3 = init_params(a, InitScheme::UniformFanIn, 6);
  CHECK(p.values != p3.values);

  CHECK_THROWS(init_scheme_from_name("bogus"));

  // orthogonal: W W^T = I along the smaller dimension, both orientations
  for (auto dims : {std::vector<long>{20, 6, 30}, std::vector<long>{6, 20, 4}}) {
    ArchSpec wide = ArchSpec::mlp(dims, Act::Relu);
    ParamVector q = init_params(wide, InitScheme::Orthogonal, 11);
    long off = 0;
    for (const auto& l : wide.layers) {
      long r = l.fan_out, c = l.fan_in;
      long small = std::min(r, c), big = std::max(r, c);
      bool rows = r <= c;
      for (long i = 0; i < small; ++i)
        for (long j = 0; j <= i; ++j) {
          double dot = 0;
          for (long k = 0; k < big; ++k) {
            double vi = q.values[(size_t)(off + (rows ? i * c + k : k * c + i))];
            double vj = q.values[(size_t)(off + (rows ? j * c + k : k * c + j))];
            dot += vi * vj;
          }
          CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-5);
        }
      off += l.param_count();
    }
  }
}

TEST_CASE("forward and metrics") {
  TaskDataset ds = make_blobs(64, 64, 3);
  ArchSpec a = blobs_arch();
  ParamVector zero(a);
  TensorT<double> logits = forward_task(zero, ds.test_x);
  for (long i = 0; i < logits.size(); ++i) CHECK(logits[i] == 0.0);
  Metrics m = eval_metrics(zero, ds);
  CHECK(m.test_loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(m.test_error == doctest::Approx(75.0));  // balanced labels, argmax ties to class 0

  // single linear layer against a hand-computed product
  ArchSpec lin = ArchSpec::mlp({2, 2}, Act::None);
  ParamVector lp(lin);
  lp.values = {1, 2, 3, 4, 0.5, -0.5};  // W = [[1,2],[3,4]], b = [0.5,-0.5]
  TensorT<double> x(1, 2);
  x(0, 0) = 2;
  x(0, 1) = -1;
  TensorT<double> y = forward_task(lp, x);
  CHECK(y(0, 0) == doctest::Approx(1 * 2 + 2 * -1 + 0.5));
  CHECK(y(0, 1) == doctest::Approx(3 * 2 + 4 * -1 - 0.5));

  TensorT<double> bad(1, 3);
  CHECK_THROWS(forward_task(lp, bad));

  // a perfect classifier on points placed exactly at the class centers
  TaskDataset exact;
  exact.kind = "blobs";
  exact.num_classes = 4;
  exact.test_x = TensorT<double>(4, 2);
  double cx[4] = {2, 0, -2, 0}, cy[4] = {0, 2, 0, -2};
  for (int c = 0; c < 4; ++c) {
    exact.test_x(c, 0) = cx[c];
    exact.test_x(c, 1) = cy[c];
    exact.test_y.push_back(c);
  }
  exact.train_x = exact.test_x;
  exact.train_y = exact.test_y;
  ArchSpec proto = ArchSpec::mlp({2, 4}, Act::None);
  ParamVector torch(proto);
  for (int c = 0; c < 4; ++c) {
    torch.values[(size_t)(c * 2 + 0)] = (float)cx[c];
    torch.values[(size_t)(c * 2 + 1)] = (float)cy[c];
  }
  CHECK(eval_metrics(torch, exact).test_error == 0.0);

  // random parameters: error hovers near chance (75%), mean over seeds
  double mean_err = 0;
  int seeds = 40;
  for (int s = 0; s < seeds; ++s)
    mean_err += eval_metrics(init_params(a, InitScheme::UniformFanIn, 100 + (uint64_t)s), ds).test_error;
  mean_err /= seeds;
  CHECK(mean_err > 55.0);
  CHECK(mean_err < 90.0);

  TaskDataset empty;
  empty.num_classes = 4;
  CHECK_THROWS(eval_metrics(zero, empty));
}

TEST_CASE("cartpole dynamics pinned to hand-computed step") {
  CartpoleEnv env;
  env.s = {0.1, 0.2, 0.05, -0.1};
  bool done = env.step(1);
  CHECK(!done);
  CHECK(std::abs(env.s.x - 0.10400000000000001) < 1e-12);
  CHECK(std::abs(env.s.xdot - 0.39437103411784763) < 1e-12);
  CHECK(std::abs(env.s.theta - 0.048) < 1e-12);
  CHECK(std::abs(env.s.thetadot - -0.3764983056420793) < 1e-12);

  CartpoleEnv out;
  out.s = {2.5, 0, 0, 0};
  CHECK(out.step(0));  // |x| beyond the track
  CartpoleEnv tilt;
  tilt.s = {0, 0, 0.3, 0};
  CHECK(tilt.step(0));  // pole past 12 degrees
}

TEST_CASE("rollouts") {
  ArchSpec pa = ArchSpec::mlp({4, 12, 12, 2}, Act::Selu);
  CartpoleEnv env;
  ParamVector p = init_params(pa, InitScheme::UniformFanIn, 9);
  double r1 = rollout_return(p, env, 4, 77);
  double r2 = rollout_return(p, env, 4, 77);
  CHECK(r1 == r2);
  CHECK(r1 >= 1.0);
  CHECK(r1 <= (double)env.max_steps);

  // constant-action policy falls fast
  ParamVector con(pa);
  con.values[(size_t)pa.layer_offset(2)] = 0;  // zero weights everywhere
  ParamVector bias(pa);
  // force logits [1, 0] via the last-layer bias
  long lastb = pa.layer_offset(2) + pa.layers[2].weight_count();
  bias.values[(size_t)lastb] = 1.0f;
  CHECK(rollout_return(bias, env, 8, 3) < 100.0);

  ArchSpec badarch = ArchSpec::mlp({3, 4, 2}, Act::Relu);
  CHECK_THROWS(rollout_return(ParamVector(badarch), env, 1, 0));
}

TEST_CASE("supervised training on blobs") {
  TaskDataset ds = make_blobs(256, 256, 42);
  ArchSpec a = blobs_arch();
  SupervisedHyper hyper;
  hyper.iters = 150;

  // 0 iterations: only the initial checkpoint is observed
  int calls = 0;
  SupervisedHyper h0 = hyper;
  h0.iters = 0;
  run_supervised_training(a, ds, h0, 1, [&](uint64_t step, const ParamVector&, auto&) {
    CHECK(step == 0);
    ++calls;
  });
  CHECK(calls == 1);

  // learning happens in at least 4 of 5 seeds, and losses improve
  int improved = 0;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    std::vector<float> first, last;
    auto out = run_supervised_training(
        a, ds, hyper, seed, [&](uint64_t step, const ParamVector&, auto& metrics) {
          if (step == 0) first = metrics();
          if (step == (uint64_t)hyper.iters) last = metrics();
        });
    CHECK(out.ok);
    CHECK(last[0] < first[0]);  // test loss always improves on this config
    if (last[1] < first[1]) ++improved;
  }
  CHECK(improved >= 4);

  // bit-reproducible checkpoint stream
  auto capture = [&](uint64_t seed) {
    std::vector<float> stream;
    run_supervised_training(a, ds, hyper, seed,
                            [&](uint64_t, const ParamVector& t, auto&) {
                              stream.insert(stream.end(), t.values.begin(), t.values.end());
                            });
    return stream;
  };
  CHECK(capture(3) == capture(3));
}

TEST_CASE("policy training on cartpole") {
  ArchSpec pa = ArchSpec::mlp({4, 12, 12, 2}, Act::Selu);
  CartpoleEnv env;
  PolicyHyper hyper;
  hyper.iters = 150;

  int calls = 0;
  PolicyHyper h0 = hyper;
  h0.iters = 0;
  run_policy_training(pa, env, h0, 1, [&](uint64_t step, const ParamVector&, auto&) {
    CHECK(step == 0);
    ++calls;
  });
  CHECK(calls == 1);

  int improved = 0;
  std::vector<double> ranges;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    double first = -1, last = -1, lo = 1e9, hi = -1e9;
    uint64_t want_last = (uint64_t)hyper.iters;
    auto out = run_policy_training(
        pa, env, hyper, seed, [&](uint64_t step, const ParamVector& theta, auto& metrics) {
          // force a handful of metric evaluations like dataset generation does
          if (step % 25 == 0 || step == want_last) {
            double r = metrics()[0];
            if (step == 0) first = r;
            if (step == want_last) last = r;
            lo = std::min(lo, r);
            hi = std::max(hi, r);
            // the recorded metric re-derives exactly from the saved seed
            CHECK(r == rollout_return(theta, env, 4, policy_eval_seed(seed, step)));
          }
        });
    CHECK(out.ok);
    if (last > first) ++improved;
    ranges.push_back(hi - lo);
  }
  CHECK(improved >= 4);
  std::sort(ranges.begin(), ranges.end());
  CHECK(ranges[2] > 50.0);  // median spread across a run is nontrivial
}

TEST_CASE("image grid task round-trips and trains") {
  TaskDataset ds = make_image_grid(200, 100, 8);
  CHECK(ds.train_x.ncol == 64);
  CHECK(ds.num_classes == 10);
  std::string path = "/tmp/ckptdiff_test_imggrid.bin";
  write_image_grid_file(path, ds);
  TaskDataset back = load_image_grid_file(path);
  CHECK(back.train_x.data == ds.train_x.data);
  CHECK(back.test_x.data == ds.test_x.data);
  CHECK(back.train_y == ds.train_y);
  CHECK(back.test_y == ds.test_y);
  CHECK(back.num_classes == ds.num_classes);
  std::remove(path.c_str());

  ArchSpec a = ArchSpec::mlp({64, 10, 10}, Act::Relu);
  SupervisedHyper hyper;
  hyper.iters = 60;
  std::vector<float> first, last;
  auto out = run_supervised_training(a, ds, hyper, 0,
                                     [&](uint64_t step, const ParamVector&, auto& metrics) {
                                       if (step == 0) first = metrics();
                                       if (step == 60) last = metrics();
                                     });
  CHECK(out.ok);
  CHECK(last[0] < first[0]);
}

TEST_SUITE_END();
