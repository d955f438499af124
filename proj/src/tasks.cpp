#include "ckptdiff/tasks.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "ckptdiff/optim.hpp"

namespace ckptdiff {

// ---------- initialization ----------

namespace {

// Gram-Schmidt with one re-orthogonalization pass; rows of a [r x c] buffer.
void orthonormalize_rows(std::vector<double>& a, long r, long c, Rng& rng) {
  for (long i = 0; i < r; ++i) {
    double* vi = a.data() + i * c;
    for (int pass = 0; pass < 2; ++pass) {
      for (long k = 0; k < i; ++k) {
        const double* vk = a.data() + k * c;
        double dot = 0;
        for (long j = 0; j < c; ++j) dot += vi[j] * vk[j];
        for (long j = 0; j < c; ++j) vi[j] -= dot * vk[j];
      }
    }
    double nrm = 0;
    for (long j = 0; j < c; ++j) nrm += vi[j] * vi[j];
    nrm = std::sqrt(nrm);
    if (nrm < 1e-8) {  // degenerate draw; replace and redo this row
      for (long j = 0; j < c; ++j) vi[j] = rng.normal();
      --i;
      continue;
    }
    for (long j = 0; j < c; ++j) vi[j] /= nrm;
  }
}

}  // namespace

ParamVector init_params(const ArchSpec& arch, InitScheme scheme, uint64_t seed) {
  ParamVector p(arch);
  Rng root(seed);
  long off = 0;
  for (size_t li = 0; li < arch.layers.size(); ++li) {
    const auto& l = arch.layers[li];
    Rng rng = root.child("layer", li);
    float* w = p.values.data() + off;
    float* b = l.has_bias ? w + l.weight_count() : nullptr;
    switch (scheme) {
      case InitScheme::UniformFanIn: {
        double lim = 1.0 / std::sqrt((double)l.fan_in);
        for (long i = 0; i < l.weight_count(); ++i) w[i] = (float)rng.uniform(-lim, lim);
        if (b)
          for (long i = 0; i < l.fan_out; ++i) b[i] = (float)rng.uniform(-lim, lim);
        break;
      }
      case InitScheme::XavierUniform: {
        double lim = std::sqrt(6.0 / (double)(l.fan_in + l.fan_out));
        for (long i = 0; i < l.weight_count(); ++i) w[i] = (float)rng.uniform(-lim, lim);
        break;
      }
      case InitScheme::KaimingNormal: {
        double std = std::sqrt(2.0 / (double)l.fan_in);
        for (long i = 0; i < l.weight_count(); ++i) w[i] = (float)rng.normal(0.0, std);
        break;
      }
      case InitScheme::Orthogonal: {
        // Orthonormalize along the smaller dimension so W W^T (or W^T W) = I.
        long r = l.fan_out, c = l.fan_in;
        bool rows_smaller = r <= c;
        long rr = rows_smaller ? r : c, cc = rows_smaller ? c : r;
        std::vector<double> buf((size_t)(rr * cc));
        for (auto& v : buf) v = rng.normal();
        orthonormalize_rows(buf, rr, cc, rng);
        for (long i = 0; i < r; ++i)
          for (long j = 0; j < c; ++j)
            w[i * c + j] = (float)(rows_smaller ? buf[i * cc + j] : buf[j * cc + i]);
        break;
      }
    }
    off += l.param_count();
  }
  // biases stay zero for schemes that do not draw them
  return p;
}

// ---------- forward + metrics ----------

TensorT<double> forward_task(const ParamVector& params, const TensorT<double>& inputs) {
  const ArchSpec& arch = params.arch;
  if (inputs.ncol != arch.input_dim()) throw std::runtime_error("forward_task: input width mismatch");
  TensorT<double> h = inputs;
  long off = 0;
  for (const auto& l : arch.layers) {
    const float* w = params.values.data() + off;
    const float* b = l.has_bias ? w + l.weight_count() : nullptr;
    TensorT<double> out(h.nrow, l.fan_out);
    for (long i = 0; i < h.nrow; ++i) {
      const double* hr = h.ptr(i);
      double* orow = out.ptr(i);
      for (long o = 0; o < l.fan_out; ++o) {
        const float* wrow = w + o * l.fan_in;
        double acc = b ? (double)b[o] : 0.0;
        for (long j = 0; j < l.fan_in; ++j) acc += hr[j] * (double)wrow[j];
        orow[o] = acc;
      }
    }
    if (l.act == Act::Relu) {
      for (auto& v : out.data) v = v > 0 ? v : 0;
    } else if (l.act == Act::Selu) {
      const double lam = 1.0507009873554805, alp = 1.6732632423543772;
      for (auto& v : out.data) v = v > 0 ? lam * v : lam * alp * (std::exp(v) - 1.0);
    }
    h = std::move(out);
    off += l.param_count();
  }
  return h;
}

Metrics eval_metrics(const ParamVector& params, const TaskDataset& ds) {
  if (ds.test_x.nrow == 0) throw std::runtime_error("eval_metrics: empty dataset");
  TensorT<double> logits = forward_task(params, ds.test_x);
  long n = logits.nrow, c = logits.ncol;
  double loss = 0;
  long wrong = 0;
  for (long i = 0; i < n; ++i) {
    const double* lr = logits.ptr(i);
    double mx = lr[0];
    long arg = 0;
    for (long j = 1; j < c; ++j)
      if (lr[j] > mx) {
        mx = lr[j];
        arg = j;
      }
    double lse = 0;
    for (long j = 0; j < c; ++j) lse += std::exp(lr[j] - mx);
    lse = mx + std::log(lse);
    loss += lse - lr[ds.test_y[(size_t)i]];
    if (arg != ds.test_y[(size_t)i]) ++wrong;
  }
  Metrics m;
  m.test_loss = loss / (double)n;
  m.test_error = 100.0 * (double)wrong / (double)n;
  return m;
}

// ---------- datasets ----------

TaskDataset make_blobs(long n_train, long n_test, uint64_t seed) {
  TaskDataset ds;
  ds.kind = "blobs";
  ds.num_classes = 4;
  const double cx[4] = {2.0, 0.0, -2.0, 0.0};
  const double cy[4] = {0.0, 2.0, 0.0, -2.0};
  const double sigma = 0.8;
  auto fill = [&](TensorT<double>& x, std::vector<int>& y, long n, Rng rng) {
    x = TensorT<double>(n, 2);
    y.resize((size_t)n);
    for (long i = 0; i < n; ++i) {
      int c = (int)(i % 4);  // balanced labels
      y[(size_t)i] = c;
      x(i, 0) = cx[c] + sigma * rng.normal();
      x(i, 1) = cy[c] + sigma * rng.normal();
    }
  };
  Rng root(seed);
  fill(ds.train_x, ds.train_y, n_train, root.child("train"));
  fill(ds.test_x, ds.test_y, n_test, root.child("test"));
  return ds;
}

TaskDataset make_image_grid(long n_train, long n_test, uint64_t seed) {
  TaskDataset ds;
  ds.kind = "imagegrid";
  ds.num_classes = 10;
  const long dim = 64;
  Rng root(seed);
  std::vector<double> templates((size_t)(10 * dim));
  {
    Rng tr = root.child("templates");
    for (auto& v : templates) v = tr.normal();
  }
  auto fill = [&](TensorT<double>& x, std::vector<int>& y, long n, Rng rng) {
    x = TensorT<double>(n, dim);
    y.resize((size_t)n);
    for (long i = 0; i < n; ++i) {
      int c = (int)(i % 10);
      y[(size_t)i] = c;
      for (long j = 0; j < dim; ++j)
        // stored as f32 in the file format, so quantize here for exact round-trips
        x(i, j) = (double)(float)(templates[(size_t)(c * dim + j)] + 0.6 * rng.normal());
    }
  };
  fill(ds.train_x, ds.train_y, n_train, root.child("train"));
  fill(ds.test_x, ds.test_y, n_test, root.child("test"));
  return ds;
}

static const char kImgMagic[9] = "GPTIMG01";

void write_image_grid_file(const std::string& path, const TaskDataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  nlohmann::json hdr{{"n_train", ds.train_x.nrow},
                     {"n_test", ds.test_x.nrow},
                     {"rows", 8},
                     {"cols", ds.train_x.ncol / 8},
                     {"num_classes", ds.num_classes}};
  std::string hs = hdr.dump();
  uint32_t len = (uint32_t)hs.size();
  f.write(kImgMagic, 8);
  f.write((const char*)&len, 4);
  f.write(hs.data(), (long)hs.size());
  auto put_pixels = [&](const TensorT<double>& x) {
    std::vector<float> buf((size_t)x.size());
    for (long i = 0; i < x.size(); ++i) buf[(size_t)i] = (float)x[i];
    f.write((const char*)buf.data(), (long)(buf.size() * 4));
  };
  auto put_labels = [&](const std::vector<int>& y) {
    std::vector<uint8_t> buf(y.size());
    for (size_t i = 0; i < y.size(); ++i) buf[i] = (uint8_t)y[i];
    f.write((const char*)buf.data(), (long)buf.size());
  };
  put_pixels(ds.train_x);
  put_pixels(ds.test_x);
  put_labels(ds.train_y);
  put_labels(ds.test_y);
  if (!f) throw std::runtime_error("write failed: " + path);
}

TaskDataset load_image_grid_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::memcmp(magic, kImgMagic, 8) != 0)
    throw std::runtime_error("bad image-grid magic in " + path);
  uint32_t len = 0;
  f.read((char*)&len, 4);
  std::string hs(len, '\0');
  f.read(hs.data(), len);
  auto hdr = nlohmann::json::parse(hs);
  TaskDataset ds;
  ds.kind = "imagegrid";
  ds.num_classes = hdr.at("num_classes").get<int>();
  long nt = hdr.at("n_train").get<long>(), ns = hdr.at("n_test").get<long>();
  long dim = hdr.at("rows").get<long>() * hdr.at("cols").get<long>();
  auto get_pixels = [&](TensorT<double>& x, long n) {
    std::vector<float> buf((size_t)(n * dim));
    f.read((char*)buf.data(), (long)(buf.size() * 4));
    x = TensorT<double>(n, dim);
    for (long i = 0; i < x.size(); ++i) x[i] = (double)buf[(size_t)i];
  };
  auto get_labels = [&](std::vector<int>& y, long n) {
    std::vector<uint8_t> buf((size_t)n);
    f.read((char*)buf.data(), n);
    y.assign(buf.begin(), buf.end());
  };
  get_pixels(ds.train_x, nt);
  get_pixels(ds.test_x, ns);
  get_labels(ds.train_y, nt);
  get_labels(ds.test_y, ns);
  if (!f) throw std::runtime_error("truncated image-grid file: " + path);
  return ds;
}

// ---------- rollouts ----------

namespace {

// Single-observation policy forward with reused buffers.
void forward_single(const ParamVector& params, const double* obs, long obs_dim,
                    std::vector<double>& h, std::vector<double>& tmp) {
  const ArchSpec& arch = params.arch;
  h.assign(obs, obs + obs_dim);
  long off = 0;
  for (const auto& l : arch.layers) {
    const float* w = params.values.data() + off;
    const float* b = l.has_bias ? w + l.weight_count() : nullptr;
    tmp.resize((size_t)l.fan_out);
    for (long o = 0; o < l.fan_out; ++o) {
      const float* wrow = w + o * l.fan_in;
      double acc = b ? (double)b[o] : 0.0;
      for (long j = 0; j < l.fan_in; ++j) acc += h[(size_t)j] * (double)wrow[j];
      tmp[(size_t)o] = acc;
    }
    if (l.act == Act::Relu) {
      for (auto& v : tmp) v = v > 0 ? v : 0;
    } else if (l.act == Act::Selu) {
      const double lam = 1.0507009873554805, alp = 1.6732632423543772;
      for (auto& v : tmp) v = v > 0 ? lam * v : lam * alp * (std::exp(v) - 1.0);
    }
    h.swap(tmp);
    off += l.param_count();
  }
}

int argmax_action(const std::vector<double>& logits) {
  int arg = 0;
  for (size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[(size_t)arg]) arg = (int)i;
  return arg;
}

}  // namespace

double rollout_return(const ParamVector& params, const CartpoleEnv& env_proto, long episodes,
                      uint64_t seed) {
  if (params.arch.input_dim() != 4 || params.arch.output_dim() != 2)
    throw std::runtime_error("rollout_return: policy must map 4 observations to 2 actions");
  Rng root(seed);
  std::vector<double> h, tmp;
  double total = 0;
  for (long e = 0; e < episodes; ++e) {
    CartpoleEnv env = env_proto;
    Rng er = root.child("episode", (uint64_t)e);
    env.reset(er);
    long steps = 0;
    while (steps < env.max_steps) {
      double obs[4] = {env.s.x, env.s.xdot, env.s.theta, env.s.thetadot};
      forward_single(params, obs, 4, h, tmp);
      bool done = env.step(argmax_action(h));
      ++steps;
      if (done) break;
    }
    total += (double)steps;
  }
  return total / (double)episodes;
}

// ---------- graph plumbing shared by the trainers ----------

std::vector<Tensor> layer_tensors(const ParamVector& params) {
  std::vector<Tensor> out;
  long off = 0;
  for (const auto& l : params.arch.layers) {
    Tensor w(l.fan_out, l.fan_in);
    std::copy_n(params.values.begin() + off, l.weight_count(), w.data.begin());
    out.push_back(std::move(w));
    if (l.has_bias) {
      Tensor b(1, l.fan_out);
      std::copy_n(params.values.begin() + off + l.weight_count(), l.fan_out, b.data.begin());
      out.push_back(std::move(b));
    }
    off += l.param_count();
  }
  return out;
}

void collect_flat(const std::vector<Tensor>& layers, const ArchSpec& arch, ParamVector& out) {
  out.arch = arch;
  out.values.resize((size_t)arch.param_count());
  long off = 0;
  size_t k = 0;
  for (const auto& l : arch.layers) {
    std::copy_n(layers[k].data.begin(), l.weight_count(), out.values.begin() + off);
    ++k;
    if (l.has_bias) {
      std::copy_n(layers[k].data.begin(), l.fan_out, out.values.begin() + off + l.weight_count());
      ++k;
    }
    off += l.param_count();
  }
}

int build_mlp_logits(Graph& g, const ArchSpec& arch, const std::vector<int>& leaves, int x) {
  int h = x;
  size_t k = 0;
  for (const auto& l : arch.layers) {
    int w = leaves[k++];
    int b = l.has_bias ? leaves[k++] : g.input(Tensor(1, l.fan_out));
    h = g.linear(h, w, b);
    if (l.act == Act::Relu) h = g.relu(h);
    if (l.act == Act::Selu) h = g.selu(h);
  }
  return h;
}

// ---------- trainers ----------

TrainOutcome run_supervised_training(const ArchSpec& arch, const TaskDataset& ds,
                                     const SupervisedHyper& hyper, uint64_t seed,
                                     const SaveHook& hook) {
  Rng root(seed);
  ParamVector theta = init_params(arch, hyper.init, root.child("init").seed());
  std::vector<Tensor> layers = layer_tensors(theta);
  SgdMomentum opt;
  opt.momentum = hyper.momentum;
  opt.weight_decay = hyper.weight_decay;

  auto metrics_of = [&](const ParamVector& p) {
    return std::function<std::vector<float>()>([&ds, p]() {
      Metrics m = eval_metrics(p, ds);
      return std::vector<float>{(float)m.test_loss, (float)m.test_error};
    });
  };
  hook(0, theta, metrics_of(theta));

  long n = ds.train_x.nrow;
  for (long iter = 1; iter <= hyper.iters; ++iter) {
    Rng br = root.child("batch", (uint64_t)iter);
    long bs = std::min(hyper.batch, n);
    Tensor bx(bs, ds.train_x.ncol);
    std::vector<int> by((size_t)bs);
    for (long i = 0; i < bs; ++i) {
      long idx = (long)br.below((uint64_t)n);
      for (long j = 0; j < bx.ncol; ++j) bx(i, j) = (float)ds.train_x(idx, j);
      by[(size_t)i] = ds.train_y[(size_t)idx];
    }
    Graph g;
    std::vector<int> lv;
    for (auto& t : layers) lv.push_back(g.leaf(t));
    int logits = build_mlp_logits(g, arch, lv, g.input(bx));
    int loss = g.cross_entropy(logits, by);
    float lval = g.value(loss)[0];
    if (!std::isfinite(lval)) {
      TrainOutcome bad;
      bad.ok = false;
      bad.error = "supervised training diverged (non-finite loss) at iteration " +
                  std::to_string(iter);
      return bad;
    }
    g.backward(loss);
    std::vector<Tensor> grads;
    for (int v : lv) grads.push_back(g.grad(v));
    opt.step(layers, grads, lr_at(iter - 1, hyper.iters, 0, hyper.lr));
    collect_flat(layers, arch, theta);
    hook((uint64_t)iter, theta, metrics_of(theta));
  }
  return {};
}

TrainOutcome run_policy_training(const ArchSpec& arch, const CartpoleEnv& env,
                                 const PolicyHyper& hyper, uint64_t seed, const SaveHook& hook) {
  Rng root(seed);
  ParamVector theta = init_params(arch, hyper.init, root.child("init").seed());
  std::vector<Tensor> layers = layer_tensors(theta);
  AdamW opt;  // wd = 0: plain Adam
  opt.weight_decay = 0.0;

  auto metrics_of = [&](const ParamVector& p, uint64_t step) {
    uint64_t es = policy_eval_seed(seed, step);
    long eps = hyper.eval_episodes;
    const CartpoleEnv& e = env;
    return std::function<std::vector<float>()>(
        [p, e, eps, es]() { return std::vector<float>{(float)rollout_return(p, e, eps, es)}; });
  };
  hook(0, theta, metrics_of(theta, 0));

  double baseline = 0;
  bool baseline_set = false;
  std::vector<double> h, tmp;
  for (long iter = 1; iter <= hyper.iters; ++iter) {
    Rng ir = root.child("rollout", (uint64_t)iter);
    std::vector<std::array<double, 4>> obs;
    std::vector<int> actions;
    std::vector<long> ep_len;
    std::vector<double> ep_ret;
    for (long e = 0; e < hyper.episodes_per_update; ++e) {
      CartpoleEnv sim = env;
      Rng er = ir.child("episode", (uint64_t)e);
      sim.reset(er);
      long steps = 0;
      while (steps < sim.max_steps) {
        std::array<double, 4> o{sim.s.x, sim.s.xdot, sim.s.theta, sim.s.thetadot};
        forward_single(theta, o.data(), 4, h, tmp);
        // sample from the softmax policy
        double mx = std::max(h[0], h[1]);
        double p0 = std::exp(h[0] - mx), p1 = std::exp(h[1] - mx);
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
    double mean_ret = 0;
    for (double r : ep_ret) mean_ret += r;
    mean_ret /= (double)ep_ret.size();
    if (!baseline_set) {
      baseline = mean_ret;
      baseline_set = true;
    }

    // REINFORCE loss: sum over steps of -(R_ep - baseline)/E * log pi(a|s)
    Tensor bx((long)obs.size(), 4);
    std::vector<float> weights(obs.size());
    size_t at = 0;
    for (size_t e = 0; e < ep_ret.size(); ++e) {
      float w = (float)((ep_ret[e] - baseline) / (double)hyper.episodes_per_update);
      for (long t = 0; t < ep_len[e]; ++t, ++at) {
        for (int j = 0; j < 4; ++j) bx((long)at, j) = (float)obs[at][j];
        weights[at] = w;
      }
    }
    Graph g;
    std::vector<int> lv;
    for (auto& t : layers) lv.push_back(g.leaf(t));
    int logits = build_mlp_logits(g, arch, lv, g.input(bx));
    int loss = g.cross_entropy(logits, actions, weights);
    if (!std::isfinite(g.value(loss)[0])) {
      TrainOutcome bad;
      bad.ok = false;
      bad.error = "policy training diverged (non-finite loss) at iteration " + std::to_string(iter);
      return bad;
    }
    g.backward(loss);
    std::vector<Tensor> grads;
    for (int v : lv) grads.push_back(g.grad(v));
    opt.step(layers, grads, hyper.lr);
    collect_flat(layers, arch, theta);
    if (!theta.all_finite()) {
      TrainOutcome bad;
      bad.ok = false;
      bad.error = "policy training diverged (non-finite parameters) at iteration " +
                  std::to_string(iter);
      return bad;
    }

    baseline = hyper.baseline_decay * baseline + (1.0 - hyper.baseline_decay) * mean_ret;
    hook((uint64_t)iter, theta, metrics_of(theta, (uint64_t)iter));
  }
  return {};
}

}  // namespace ckptdiff
