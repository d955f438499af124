#include "ckptdiff/checkpoints.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "ckptdiff/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ckptdiff {

static constexpr char kRunMagic[8] = {'G', 'P', 'T', 'C', 'K', 'P', 'T', '1'};

long Run::metric_index(const std::string& name) const {
  auto it = std::find(metric_names.begin(), metric_names.end(), name);
  if (it == metric_names.end()) throw std::runtime_error("run has no metric named " + name);
  return (long)(it - metric_names.begin());
}

// ---------- run file IO ----------

namespace {

template <class T>
void put(std::string& buf, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.append(b, sizeof(T));
}

template <class T>
T take(const std::string& buf, size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw std::runtime_error("run file truncated");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void write_run_file(const std::string& path, const Run& run) {
  long D = run.arch.param_count();
  size_t m = run.metric_names.size();
  json header = {{"run_id", run.run_id},     {"seed", run.seed},
                 {"arch", run.arch.to_json()}, {"metrics", run.metric_names},
                 {"C", run.ckpts.size()},    {"D", D},
                 {"hyper", run.hyper}};
  std::string hs = header.dump();

  std::string buf;
  buf.reserve(hs.size() + run.ckpts.size() * (8 + 4 * (m + (size_t)D)) + 64);
  buf.append(kRunMagic, sizeof(kRunMagic));
  put<uint32_t>(buf, (uint32_t)hs.size());
  buf += hs;
  uint64_t prev = 0;
  bool first = true;
  for (const auto& c : run.ckpts) {
    if ((long)c.theta.size() != D) throw std::runtime_error("checkpoint size mismatch");
    if (c.metrics.size() != m) throw std::runtime_error("checkpoint metric count mismatch");
    if (!first && c.step <= prev) throw std::runtime_error("checkpoint steps not increasing");
    first = false;
    prev = c.step;
    put<uint64_t>(buf, c.step);
    for (float v : c.metrics) put<float>(buf, v);
    buf.append(reinterpret_cast<const char*>(c.theta.data()), c.theta.size() * 4);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(buf.data(), (std::streamsize)buf.size());
  if (!out) throw std::runtime_error("write failed: " + path);
}

Run read_run_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kRunMagic) + 4 ||
      std::memcmp(buf.data(), kRunMagic, sizeof(kRunMagic)) != 0)
    throw std::runtime_error("not a run file: " + path);
  size_t pos = sizeof(kRunMagic);
  uint32_t hlen = take<uint32_t>(buf, pos);
  if (pos + hlen > buf.size()) throw std::runtime_error("run file truncated");
  json header = json::parse(buf.substr(pos, hlen));
  pos += hlen;

  Run run;
  run.run_id = header.at("run_id").get<std::string>();
  run.seed = header.at("seed").get<uint64_t>();
  run.arch = ArchSpec::from_json(header.at("arch"));
  run.metric_names = header.at("metrics").get<std::vector<std::string>>();
  run.hyper = header.value("hyper", json::object());
  size_t C = header.at("C").get<size_t>();
  long D = header.at("D").get<long>();
  if (D != run.arch.param_count()) throw std::runtime_error("run header D does not match arch");

  run.ckpts.resize(C);
  size_t m = run.metric_names.size();
  for (auto& c : run.ckpts) {
    c.step = take<uint64_t>(buf, pos);
    c.metrics.resize(m);
    for (auto& v : c.metrics) v = take<float>(buf, pos);
    if (pos + (size_t)D * 4 > buf.size()) throw std::runtime_error("run file truncated");
    c.theta.resize((size_t)D);
    std::memcpy(c.theta.data(), buf.data() + pos, (size_t)D * 4);
    pos += (size_t)D * 4;
  }
  if (pos != buf.size()) throw std::runtime_error("trailing bytes in run file: " + path);
  for (size_t i = 1; i < run.ckpts.size(); ++i)
    if (run.ckpts[i].step <= run.ckpts[i - 1].step)
      throw std::runtime_error("checkpoint steps not increasing in " + path);
  return run;
}

// ---------- normalization ----------

json NormStats::to_json() const {
  return {{"scale_factor", scale_factor}, {"target_std", target_std}};
}

NormStats NormStats::from_json(const json& j) {
  NormStats s;
  s.scale_factor = j.at("scale_factor").get<double>();
  s.target_std = j.at("target_std").get<double>();
  if (!(s.scale_factor > 0) || !(s.target_std > 0))
    throw std::runtime_error("normalization stats must be positive");
  return s;
}

NormStats compute_norm_stats(const std::vector<const Run*>& train, double target_std) {
  if (!(target_std > 0)) throw std::runtime_error("target_std must be positive");
  double n = 0, sum = 0, sumsq = 0;
  for (const Run* r : train)
    for (const auto& c : r->ckpts)
      for (float v : c.theta) {
        sum += v;
        sumsq += (double)v * v;
        n += 1;
      }
  if (n == 0) throw std::runtime_error("empty training split");
  double mean = sum / n;
  double var = sumsq / n - mean * mean;
  double sd = std::sqrt(std::max(var, 0.0));
  if (!(sd > 0) || !std::isfinite(sd))
    throw std::runtime_error("zero parameter variance in training split");
  NormStats s;
  s.target_std = target_std;
  s.scale_factor = target_std / sd;
  return s;
}

void normalize_inplace(std::vector<float>& theta, const NormStats& stats) {
  for (auto& v : theta) v = (float)((double)v * stats.scale_factor);
}

void denormalize_inplace(std::vector<float>& theta, const NormStats& stats) {
  for (auto& v : theta) v = (float)((double)v / stats.scale_factor);
}

// ---------- sampling ----------

std::vector<uint64_t> select_checkpoints(uint64_t total_iters, long C, uint64_t seed) {
  if (C < 2) throw std::runtime_error("need at least 2 checkpoints per run");
  if ((uint64_t)C > total_iters + 1)
    throw std::runtime_error("cannot select more checkpoints than distinct steps");
  std::vector<uint64_t> steps = {0, total_iters};
  if (C > 2) {
    Rng rng(seed);
    for (uint64_t v : rng.sample_without_replacement(total_iters - 1, (uint64_t)C - 2))
      steps.push_back(v + 1);  // interior steps 1..total_iters-1
  }
  std::sort(steps.begin(), steps.end());
  return steps;
}

std::pair<size_t, size_t> sample_tuple_indices(size_t count, Rng& rng) {
  if (count < 2) throw std::runtime_error("tuple sampling needs at least 2 checkpoints");
  size_t i = (size_t)rng.below(count);
  size_t j = (size_t)rng.below(count - 1);
  if (j >= i) ++j;
  return {std::min(i, j), std::max(i, j)};
}

std::pair<const Checkpoint*, const Checkpoint*> sample_tuple(const Run& run, Rng& rng) {
  auto [a, b] = sample_tuple_indices(run.ckpts.size(), rng);
  return {&run.ckpts[a], &run.ckpts[b]};
}

// ---------- permutation augmentation ----------

Permutation sample_permutation(const ArchSpec& arch, Rng& rng) {
  Permutation p;
  for (size_t l = 0; l + 1 < arch.layers.size(); ++l) {
    std::vector<long> pi(arch.layers[l].fan_out);
    for (size_t i = 0; i < pi.size(); ++i) pi[i] = (long)i;
    rng.shuffle(pi);
    p.hidden.push_back(std::move(pi));
  }
  return p;
}

Permutation invert_permutation(const Permutation& perm) {
  Permutation inv;
  for (const auto& pi : perm.hidden) {
    std::vector<long> q(pi.size());
    for (size_t i = 0; i < pi.size(); ++i) q[(size_t)pi[i]] = (long)i;
    inv.hidden.push_back(std::move(q));
  }
  return inv;
}

ParamVector apply_permutation(const Permutation& perm, const ParamVector& theta) {
  const ArchSpec& arch = theta.arch;
  size_t L = arch.layers.size();
  if (perm.hidden.size() + 1 != L) throw std::runtime_error("permutation does not match arch");
  for (size_t l = 0; l + 1 < L; ++l)
    if ((long)perm.hidden[l].size() != arch.layers[l].fan_out)
      throw std::runtime_error("permutation does not match arch");
  if ((long)theta.values.size() != arch.param_count())
    throw std::runtime_error("parameter vector does not match arch");

  ParamVector out(arch);
  long off = 0;
  for (size_t l = 0; l < L; ++l) {
    const auto& lay = arch.layers[l];
    const float* w = theta.values.data() + off;
    float* wo = out.values.data() + off;
    const std::vector<long>* rmap = l + 1 < L ? &perm.hidden[l] : nullptr;
    const std::vector<long>* cmap = l > 0 ? &perm.hidden[l - 1] : nullptr;
    for (long i = 0; i < lay.fan_out; ++i) {
      long si = rmap ? (*rmap)[(size_t)i] : i;
      for (long j = 0; j < lay.fan_in; ++j) {
        long sj = cmap ? (*cmap)[(size_t)j] : j;
        wo[i * lay.fan_in + j] = w[si * lay.fan_in + sj];
      }
    }
    if (lay.has_bias) {
      const float* b = w + lay.weight_count();
      float* bo = wo + lay.weight_count();
      for (long i = 0; i < lay.fan_out; ++i) bo[i] = b[rmap ? (*rmap)[(size_t)i] : i];
    }
    off += lay.param_count();
  }
  return out;
}

// ---------- splitting ----------

std::pair<std::vector<long>, std::vector<long>> split_runs(long num_runs, double test_fraction,
                                                           uint64_t seed) {
  long ntest = (long)std::llround(test_fraction * (double)num_runs);
  if (ntest < 1 || ntest > num_runs - 1)
    throw std::runtime_error("test fraction leaves an empty split");
  Rng rng(seed);
  auto picks = rng.sample_without_replacement((uint64_t)num_runs, (uint64_t)ntest);
  std::vector<long> test(picks.begin(), picks.end());
  std::vector<long> train;
  std::set<long> tset(test.begin(), test.end());
  for (long i = 0; i < num_runs; ++i)
    if (!tset.count(i)) train.push_back(i);
  return {train, test};
}

// ---------- manifest ----------

json DatasetManifest::to_json() const {
  return {{"task", task},
          {"arch", arch.to_json()},
          {"metrics", metric_names},
          {"runs", runs},
          {"ckpts_per_run", ckpts_per_run},
          {"D", D},
          {"seed", seed},
          {"failed_runs", failed_runs},
          {"run_files", run_files},
          {"train_runs", train_runs},
          {"test_runs", test_runs},
          {"norm", norm.to_json()},
          {"task_config", task_config}};
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  m.task = j.at("task").get<std::string>();
  m.arch = ArchSpec::from_json(j.at("arch"));
  m.metric_names = j.at("metrics").get<std::vector<std::string>>();
  m.runs = j.at("runs").get<long>();
  m.ckpts_per_run = j.at("ckpts_per_run").get<long>();
  m.D = j.at("D").get<long>();
  m.seed = j.at("seed").get<uint64_t>();
  m.failed_runs = j.value("failed_runs", 0L);
  m.run_files = j.at("run_files").get<std::vector<std::string>>();
  m.train_runs = j.at("train_runs").get<std::vector<std::string>>();
  m.test_runs = j.at("test_runs").get<std::vector<std::string>>();
  m.norm = NormStats::from_json(j.at("norm"));
  m.task_config = j.value("task_config", json::object());

  if ((long)m.run_files.size() != m.runs) throw std::runtime_error("manifest run count mismatch");
  std::set<std::string> tr(m.train_runs.begin(), m.train_runs.end());
  for (const auto& id : m.test_runs)
    if (tr.count(id)) throw std::runtime_error("train/test splits overlap");
  if (m.train_runs.size() + m.test_runs.size() != (size_t)m.runs)
    throw std::runtime_error("split does not cover all runs");
  return m;
}

void DatasetManifest::save(const std::string& dir) const {
  std::ofstream out(dir + "/manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
  out << to_json().dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir);
  json j = json::parse(in);
  return from_json(j);
}

// ---------- generation ----------

json DataGenConfig::to_json() const {
  json j = {{"task", task},
            {"init", init},
            {"runs", runs},
            {"ckpts_per_run", ckpts_per_run},
            {"seed", seed},
            {"test_fraction", test_fraction},
            {"target_std", target_std},
            {"data_train", data_train},
            {"data_test", data_test},
            {"data_seed", data_seed}};
  if (!arch.layers.empty()) j["arch"] = arch.to_json();
  if (!image_grid_file.empty()) j["image_grid_file"] = image_grid_file;
  j["sup"] = {{"optimizer", sup.optimizer}, {"lr", sup.lr},       {"momentum", sup.momentum},
              {"weight_decay", sup.weight_decay}, {"batch", sup.batch}, {"iters", sup.iters}};
  j["pol"] = {{"lr", pol.lr},
              {"episodes_per_update", pol.episodes_per_update},
              {"iters", pol.iters},
              {"eval_episodes", pol.eval_episodes},
              {"baseline_decay", pol.baseline_decay}};
  return j;
}

DataGenConfig DataGenConfig::from_json(const json& j) {
  DataGenConfig c;
  c.task = j.value("task", c.task);
  if (j.contains("arch")) c.arch = ArchSpec::from_json(j.at("arch"));
  c.init = j.value("init", c.init);
  c.runs = j.value("runs", c.runs);
  c.ckpts_per_run = j.value("ckpts_per_run", c.ckpts_per_run);
  c.seed = j.value("seed", c.seed);
  c.test_fraction = j.value("test_fraction", c.test_fraction);
  c.target_std = j.value("target_std", c.target_std);
  c.data_train = j.value("data_train", c.data_train);
  c.data_test = j.value("data_test", c.data_test);
  c.data_seed = j.value("data_seed", c.data_seed);
  c.image_grid_file = j.value("image_grid_file", c.image_grid_file);
  if (j.contains("sup")) {
    const json& s = j.at("sup");
    c.sup.optimizer = s.value("optimizer", c.sup.optimizer);
    c.sup.lr = s.value("lr", c.sup.lr);
    c.sup.momentum = s.value("momentum", c.sup.momentum);
    c.sup.weight_decay = s.value("weight_decay", c.sup.weight_decay);
    c.sup.batch = s.value("batch", c.sup.batch);
    c.sup.iters = s.value("iters", c.sup.iters);
  }
  if (j.contains("pol")) {
    const json& p = j.at("pol");
    c.pol.lr = p.value("lr", c.pol.lr);
    c.pol.episodes_per_update = p.value("episodes_per_update", c.pol.episodes_per_update);
    c.pol.iters = p.value("iters", c.pol.iters);
    c.pol.eval_episodes = p.value("eval_episodes", c.pol.eval_episodes);
    c.pol.baseline_decay = p.value("baseline_decay", c.pol.baseline_decay);
  }
  return c;
}

static ArchSpec default_arch_for_task(const std::string& task) {
  if (task == "blobs") return ArchSpec::mlp({2, 16, 4}, Act::Relu);
  if (task == "imagegrid") return ArchSpec::mlp({64, 10, 10}, Act::Relu);
  if (task == "cartpole") return ArchSpec::mlp({4, 12, 12, 2}, Act::Selu);
  throw std::runtime_error("unknown task: " + task);
}

DatasetManifest generate_dataset(const DataGenConfig& cfg, const std::string& out_dir) {
  if (cfg.runs < 2) throw std::runtime_error("need at least 2 runs");
  if (cfg.ckpts_per_run < 2) throw std::runtime_error("need at least 2 checkpoints per run");
  ArchSpec arch = cfg.arch.layers.empty() ? default_arch_for_task(cfg.task) : cfg.arch;
  InitScheme scheme = init_scheme_from_name(cfg.init);

  bool policy = cfg.task == "cartpole";
  TaskDataset ds;
  CartpoleEnv env;
  json task_config = {{"data_train", cfg.data_train},
                      {"data_test", cfg.data_test},
                      {"data_seed", cfg.data_seed}};
  if (cfg.task == "blobs") {
    ds = make_blobs(cfg.data_train, cfg.data_test, cfg.data_seed);
  } else if (cfg.task == "imagegrid") {
    if (!cfg.image_grid_file.empty()) {
      ds = load_image_grid_file(cfg.image_grid_file);
      task_config["source_file"] = "imagegrid.bin";
    } else {
      ds = make_image_grid(cfg.data_train, cfg.data_test, cfg.data_seed);
    }
  } else if (policy) {
    task_config = {{"eval_episodes", cfg.pol.eval_episodes}};
  } else {
    throw std::runtime_error("unknown task: " + cfg.task);
  }
  if (!policy) {
    if (arch.input_dim() != ds.train_x.ncol || arch.output_dim() != ds.num_classes)
      throw std::runtime_error("arch does not match task dimensions");
  } else if (arch.input_dim() != 4 || arch.output_dim() != 2) {
    throw std::runtime_error("arch does not match task dimensions");
  }

  fs::create_directories(out_dir);
  // a stale manifest must not mark a half-written dataset as complete
  fs::remove(out_dir + "/manifest.json");

  SupervisedHyper sup = cfg.sup;
  sup.init = scheme;
  PolicyHyper pol = cfg.pol;
  pol.init = scheme;
  long iters = policy ? pol.iters : sup.iters;
  auto metric_names = task_metric_names(cfg.task);
  json hyper_summary = policy ? json{{"lr", pol.lr},
                                     {"episodes_per_update", pol.episodes_per_update},
                                     {"iters", pol.iters},
                                     {"init", init_scheme_name(scheme)}}
                              : json{{"optimizer", sup.optimizer},
                                     {"lr", sup.lr},
                                     {"momentum", sup.momentum},
                                     {"weight_decay", sup.weight_decay},
                                     {"batch", sup.batch},
                                     {"iters", sup.iters},
                                     {"init", init_scheme_name(scheme)}};

  long K = cfg.runs;
  std::vector<Run> runs((size_t)K);
  std::vector<char> ok((size_t)K, 0);
  Rng root(cfg.seed);

  parallel_for(0, K, [&](long r) {
    uint64_t run_seed = root.child("run", (uint64_t)r).seed();
    char name[32];
    std::snprintf(name, sizeof(name), "run%05ld", r);
    Run& run = runs[(size_t)r];
    run.run_id = name;
    run.seed = run_seed;
    run.arch = arch;
    run.metric_names = metric_names;
    run.hyper = hyper_summary;

    auto steps = select_checkpoints((uint64_t)iters, cfg.ckpts_per_run,
                                    Rng(run_seed).child("select").seed());
    std::set<uint64_t> want(steps.begin(), steps.end());
    bool finite = true;
    SaveHook hook = [&](uint64_t step, const ParamVector& theta,
                        const std::function<std::vector<float>()>& metrics) {
      if (!want.count(step)) return;
      Checkpoint c;
      c.step = step;
      c.theta = theta.values;
      c.metrics = metrics();
      for (float v : c.metrics)
        if (!std::isfinite(v)) finite = false;
      run.ckpts.push_back(std::move(c));
    };
    TrainOutcome out;
    try {
      out = policy ? run_policy_training(arch, env, pol, run_seed, hook)
                   : run_supervised_training(arch, ds, sup, run_seed, hook);
    } catch (const std::exception&) {
      out.ok = false;
    }
    ok[(size_t)r] = out.ok && finite && (long)run.ckpts.size() == cfg.ckpts_per_run;
  });

  std::vector<long> kept;
  for (long r = 0; r < K; ++r)
    if (ok[(size_t)r]) kept.push_back(r);
  if ((long)kept.size() < 2) throw std::runtime_error("too many diverged runs to build a dataset");

  for (long r : kept) {
    const Run& run = runs[(size_t)r];
    write_run_file(out_dir + "/" + run.run_id + ".bin", run);
  }
  if (cfg.task == "imagegrid" && !cfg.image_grid_file.empty())
    write_image_grid_file(out_dir + "/imagegrid.bin", ds);

  auto [train_local, test_local] =
      split_runs((long)kept.size(), cfg.test_fraction, root.child("split").seed());

  DatasetManifest m;
  m.task = cfg.task;
  m.arch = arch;
  m.metric_names = metric_names;
  m.runs = (long)kept.size();
  m.ckpts_per_run = cfg.ckpts_per_run;
  m.D = arch.param_count();
  m.seed = cfg.seed;
  m.failed_runs = K - (long)kept.size();
  for (long r : kept) m.run_files.push_back(runs[(size_t)r].run_id + ".bin");
  for (long i : train_local) m.train_runs.push_back(runs[(size_t)kept[(size_t)i]].run_id);
  for (long i : test_local) m.test_runs.push_back(runs[(size_t)kept[(size_t)i]].run_id);
  m.task_config = task_config;

  std::vector<const Run*> train_ptrs;
  for (long i : train_local) train_ptrs.push_back(&runs[(size_t)kept[(size_t)i]]);
  m.norm = compute_norm_stats(train_ptrs, cfg.target_std);

  m.save(out_dir);  // written last: its presence marks completion
  return m;
}

LoadedDataset load_dataset(const std::string& dir) {
  LoadedDataset out;
  out.manifest = DatasetManifest::load(dir);
  out.dir = dir;
  out.runs.reserve(out.manifest.run_files.size());
  for (const auto& f : out.manifest.run_files) {
    Run r = read_run_file(dir + "/" + f);
    if ((long)r.ckpts.size() != out.manifest.ckpts_per_run)
      throw std::runtime_error("run " + r.run_id + " has the wrong checkpoint count");
    if (r.arch != out.manifest.arch)
      throw std::runtime_error("run " + r.run_id + " arch differs from manifest");
    out.runs.push_back(std::move(r));
  }
  for (const auto& id : out.manifest.train_runs) {
    auto it = std::find_if(out.runs.begin(), out.runs.end(),
                           [&](const Run& r) { return r.run_id == id; });
    if (it == out.runs.end()) throw std::runtime_error("train run missing: " + id);
    out.train_idx.push_back((size_t)(it - out.runs.begin()));
  }
  for (const auto& id : out.manifest.test_runs) {
    auto it = std::find_if(out.runs.begin(), out.runs.end(),
                           [&](const Run& r) { return r.run_id == id; });
    if (it == out.runs.end()) throw std::runtime_error("test run missing: " + id);
    out.test_idx.push_back((size_t)(it - out.runs.begin()));
  }
  return out;
}

TaskDataset rebuild_task(const DatasetManifest& manifest, const std::string& dir) {
  const json& tc = manifest.task_config;
  if (manifest.task == "blobs")
    return make_blobs(tc.value("data_train", 2048L), tc.value("data_test", 1024L),
                      tc.value("data_seed", (uint64_t)1234));
  if (manifest.task == "imagegrid") {
    if (tc.contains("source_file"))
      return load_image_grid_file(dir + "/" + tc.at("source_file").get<std::string>());
    return make_image_grid(tc.value("data_train", 2048L), tc.value("data_test", 1024L),
                           tc.value("data_seed", (uint64_t)1234));
  }
  if (manifest.task == "cartpole") {
    TaskDataset ds;
    ds.kind = "cartpole";
    return ds;
  }
  throw std::runtime_error("unknown task: " + manifest.task);
}

}  // namespace ckptdiff
