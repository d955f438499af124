#include "ckptdiff/config.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <CLI11.hpp>

#include "ckptdiff/evals.hpp"
#include "ckptdiff/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace ckptdiff {

// ---------- config sections ----------

void EvalConfig::validate() const {
  if (prompt_offset < 0) throw std::runtime_error("eval.prompt_offset must be >= 0");
  if (align_prompts < 2) throw std::runtime_error("eval.align_prompts must be >= 2");
  if (align_nets < 1) throw std::runtime_error("eval.align_nets must be >= 1");
  if (probe_prompts < 0 || probe_nets < 0)
    throw std::runtime_error("eval.probe sizes must be >= 0");
  if (probe_nets > 0 && probe_prompts < 2)
    throw std::runtime_error("eval.probe_prompts must be >= 2 when the probe is enabled");
  if (onestep_inits < 1) throw std::runtime_error("eval.onestep_inits must be >= 1");
  if (sweep_prompts < 2) throw std::runtime_error("eval.sweep_prompts must be >= 2");
  if (sweep_inits < 1) throw std::runtime_error("eval.sweep_inits must be >= 1");
  if (ood_steps < 1) throw std::runtime_error("eval.ood_steps must be >= 1");
  if (ood_inits < 1) throw std::runtime_error("eval.ood_inits must be >= 1");
  if (nn_prompts < 1) throw std::runtime_error("eval.nn_prompts must be >= 1");
  if (var_outer < 2 || var_inner < 2)
    throw std::runtime_error("eval.var_outer and eval.var_inner must be >= 2");
  if (var_topk < 1) throw std::runtime_error("eval.var_topk must be >= 1");
  if (surface_samples < 3) throw std::runtime_error("eval.surface_samples must be >= 3");
  if (surface_grid < 2) throw std::runtime_error("eval.surface_grid must be >= 2");
  if (surface_threshold <= 0) throw std::runtime_error("eval.surface_threshold must be positive");
}

json EvalConfig::to_json() const {
  return json{{"metric", metric},
              {"prompt_offset", prompt_offset},
              {"align_prompts", align_prompts},
              {"align_nets", align_nets},
              {"probe_prompts", probe_prompts},
              {"probe_nets", probe_nets},
              {"onestep_inits", onestep_inits},
              {"sweep_prompts", sweep_prompts},
              {"sweep_inits", sweep_inits},
              {"ood_steps", ood_steps},
              {"ood_inits", ood_inits},
              {"nn_prompts", nn_prompts},
              {"var_outer", var_outer},
              {"var_inner", var_inner},
              {"var_topk", var_topk},
              {"surface_samples", surface_samples},
              {"surface_grid", surface_grid},
              {"surface_threshold", surface_threshold},
              {"seed", seed}};
}

EvalConfig EvalConfig::from_json(const json& j) {
  EvalConfig c;
  c.metric = j.value("metric", c.metric);
  c.prompt_offset = j.value("prompt_offset", c.prompt_offset);
  c.align_prompts = j.value("align_prompts", c.align_prompts);
  c.align_nets = j.value("align_nets", c.align_nets);
  c.probe_prompts = j.value("probe_prompts", c.probe_prompts);
  c.probe_nets = j.value("probe_nets", c.probe_nets);
  c.onestep_inits = j.value("onestep_inits", c.onestep_inits);
  c.sweep_prompts = j.value("sweep_prompts", c.sweep_prompts);
  c.sweep_inits = j.value("sweep_inits", c.sweep_inits);
  c.ood_steps = j.value("ood_steps", c.ood_steps);
  c.ood_inits = j.value("ood_inits", c.ood_inits);
  c.nn_prompts = j.value("nn_prompts", c.nn_prompts);
  c.var_outer = j.value("var_outer", c.var_outer);
  c.var_inner = j.value("var_inner", c.var_inner);
  c.var_topk = j.value("var_topk", c.var_topk);
  c.surface_samples = j.value("surface_samples", c.surface_samples);
  c.surface_grid = j.value("surface_grid", c.surface_grid);
  c.surface_threshold = j.value("surface_threshold", c.surface_threshold);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

void SweepConfig::validate() const {
  if (hiddens.empty()) throw std::runtime_error("sweep.hiddens must not be empty");
  for (long h : hiddens)
    if (h < 1) throw std::runtime_error("sweep.hiddens entries must be >= 1");
  if (train_runs.empty()) throw std::runtime_error("sweep.train_runs must not be empty");
  for (long r : train_runs)
    if (r < 0) throw std::runtime_error("sweep.train_runs entries must be >= 0");
  if (iters < 0) throw std::runtime_error("sweep.iters must be >= 0");
}

json SweepConfig::to_json() const {
  return json{{"hiddens", hiddens}, {"train_runs", train_runs}, {"iters", iters}};
}

SweepConfig SweepConfig::from_json(const json& j) {
  SweepConfig c;
  c.hiddens = j.value("hiddens", c.hiddens);
  c.train_runs = j.value("train_runs", c.train_runs);
  c.iters = j.value("iters", c.iters);
  c.validate();
  return c;
}

void AppConfig::validate() const {
  if (data.task != "blobs" && data.task != "imagegrid" && data.task != "cartpole")
    throw std::runtime_error("unknown task: " + data.task);
  if (data.runs < 2)
    throw std::runtime_error("data.runs must be >= 2 so both splits are nonempty");
  if (data.ckpts_per_run < 2) throw std::runtime_error("data.ckpts_per_run must be >= 2");
  if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0))
    throw std::runtime_error("data.test_fraction must lie strictly between 0 and 1");
  (void)init_scheme_from_name(data.init);  // rejects unknown schemes
  model.validate();  // includes: M must be smaller than the transformer hidden size
  train.validate();
  eval.validate();
  sweep.validate();
}

json AppConfig::to_json() const {
  return json{{"data", data.to_json()},
              {"model", model.to_json()},
              {"train", train.to_json()},
              {"eval", eval.to_json()},
              {"sweep", sweep.to_json()}};
}

AppConfig AppConfig::from_json(const json& j) {
  AppConfig c;
  if (j.contains("data")) c.data = DataGenConfig::from_json(j.at("data"));
  if (j.contains("model")) c.model = GptConfig::from_json(j.at("model"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  if (j.contains("eval")) c.eval = EvalConfig::from_json(j.at("eval"));
  if (j.contains("sweep")) c.sweep = SweepConfig::from_json(j.at("sweep"));
  return c;
}

AppConfig AppConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  json j;
  f >> j;
  return from_json(j);
}

void derive_seeds(AppConfig& cfg, uint64_t root_seed) {
  Rng root(root_seed);
  cfg.data.seed = root.child("data").seed();
  cfg.train.seed = root.child("train").seed();
  cfg.eval.seed = root.child("eval").seed();
}

// ---------- command implementations ----------

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

void save_config(const AppConfig& cfg, const std::string& dir) {
  write_text(dir + "/config.json", cfg.to_json().dump(2) + "\n");
}

// prompt one step beyond the best observed metric, in the improving direction
double default_prompt(bool maximize, const MetricRange& range, double offset) {
  return maximize ? range.hi + offset : range.lo - offset;
}

struct EvalContext {
  LoadedGpt model;
  LoadedDataset ds;
  MetricEvaluator eval;
  long metric_idx = 0;
  MetricRange range;
  double prompt = 0;
  InitScheme scheme = InitScheme::UniformFanIn;
};

EvalContext make_context(const AppConfig& cfg, const std::string& model_path,
                         const std::string& data_dir) {
  EvalContext cx;
  cx.model = load_gpt(model_path);
  cx.ds = load_dataset(data_dir);
  std::string metric = cx.model.meta.value("metric", cfg.eval.metric);
  cx.eval = make_metric_evaluator(cx.ds.manifest, cx.ds.dir, metric,
                                  Rng(cfg.eval.seed).child("rollout").seed());
  cx.metric_idx = resolve_metric_index(cx.ds.manifest, metric);
  cx.range = observed_metric_range(cx.ds, cx.ds.train_idx, cx.metric_idx, cx.eval.maximize());
  cx.prompt = default_prompt(cx.eval.maximize(), cx.range, cfg.eval.prompt_offset);
  cx.scheme = dataset_init_scheme(cx.ds);
  if (cx.model.weights.arch.param_count() != cx.ds.manifest.D)
    throw std::runtime_error("model and dataset disagree on the parameter count");
  return cx;
}

int cmd_gen_data(const AppConfig& cfg, const std::string& out) {
  fs::create_directories(out);
  DatasetManifest m = generate_dataset(cfg.data, out);
  save_config(cfg, out);
  std::printf("dataset: %ld runs x %ld checkpoints (%ld failed attempts) in %s\n", m.runs,
              m.ckpts_per_run, m.failed_runs, out.c_str());
  LoadedDataset ds = load_dataset(out);
  for (size_t mi = 0; mi < m.metric_names.size(); ++mi) {
    std::vector<size_t> all(ds.runs.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    MetricRange r = observed_metric_range(ds, all, (long)mi, false);
    std::printf("metric %s: %.6g .. %.6g\n", m.metric_names[mi].c_str(), r.lo, r.hi);
  }
  return 0;
}

int cmd_train(const AppConfig& cfg, const std::string& data_dir, const std::string& out) {
  LoadedDataset ds = load_dataset(data_dir);
  fs::create_directories(out);
  save_config(cfg, out);
  AlignProbe probe;
  if (cfg.eval.probe_nets > 0)
    probe = make_align_probe(ds, cfg.train.metric, cfg.eval.probe_prompts, cfg.eval.probe_nets,
                             cfg.eval.seed);
  TrainResult r = pretrain(ds, cfg.model, cfg.train, out, probe);
  for (const auto& rec : r.report.records)
    std::printf("iter %ld: loss %.6g  train-split %.6g  test-split %.6g  align %.4g\n", rec.iter,
                rec.train_loss, rec.train_split_loss, rec.test_split_loss, rec.align);
  std::printf("model: %s/model_ema.bin (%ld records)\n", out.c_str(),
              (long)r.report.records.size());
  return 0;
}

int cmd_optimize(const AppConfig& cfg, const std::string& model_path, const std::string& data_dir,
                 const std::string& out_file, double prompt, bool prompt_set, long steps,
                 const std::string& init_name, const std::string& init_file) {
  EvalContext cx = make_context(cfg, model_path, data_dir);
  std::vector<float> theta0;
  json init_desc;
  if (!init_file.empty()) {
    Run src = read_run_file(init_file);
    theta0 = src.ckpts.back().theta;
    if ((long)theta0.size() != cx.ds.manifest.D)
      throw std::runtime_error("init file parameter count does not match the model");
    init_desc = init_file;
  } else {
    InitScheme s = init_name.empty() ? cx.scheme : init_scheme_from_name(init_name);
    theta0 = init_params(cx.ds.manifest.arch, s, Rng(cfg.eval.seed).child("optimize-init").seed())
                 .values;
    init_desc = init_scheme_name(s);
  }
  double p = prompt_set ? prompt : cx.prompt;
  if (p < cx.range.lo || p > cx.range.hi)
    std::fprintf(stderr,
                 "warning: prompt %.6g lies outside the observed metric range [%.6g, %.6g]; "
                 "extrapolation is unreliable\n",
                 p, cx.range.lo, cx.range.hi);
  RecursiveResult rr = recursive_prompt(cx.model.weights, cx.model.norm, cx.eval, theta0, p, steps,
                                        Rng(cfg.eval.seed).child("optimize").seed());
  Run out;
  out.run_id = "optimize";
  out.seed = cfg.eval.seed;
  out.arch = cx.ds.manifest.arch;
  out.metric_names = {cx.eval.metric};
  out.hyper = json{{"prompt", p}, {"steps", steps}, {"init", init_desc}};
  for (size_t k = 0; k < rr.thetas.size(); ++k) {
    Checkpoint c;
    c.step = (uint64_t)k;
    c.theta = rr.thetas[k];
    c.metrics = {(float)rr.metrics[k]};
    out.ckpts.push_back(std::move(c));
  }
  write_run_file(out_file, out);
  for (size_t k = 0; k < rr.metrics.size(); ++k)
    std::printf("step %zu: %s %.6g\n", k, cx.eval.metric.c_str(), rr.metrics[k]);
  std::printf("trajectory: %s\n", out_file.c_str());
  return 0;
}

void write_result(const std::string& out, const std::string& name, const json& j,
                  const std::vector<std::string>& header,
                  const std::vector<std::vector<std::string>>& rows) {
  write_text(out + "/" + name + ".json", j.dump(2) + "\n");
  write_csv(out + "/" + name + ".csv", header, rows);
}

int cmd_eval(const AppConfig& cfg, const std::string& model_path, const std::string& data_dir,
             const std::string& suite, const std::string& out) {
  EvalContext cx = make_context(cfg, model_path, data_dir);
  fs::create_directories(out);
  save_config(cfg, out);
  Rng eroot(cfg.eval.seed);
  const GptWeights& w = cx.model.weights;
  const NormStats& norm = cx.model.norm;
  const EvalConfig& ec = cfg.eval;
  bool all = suite == "all";

  if (all || suite == "alignment") {
    PromptAlignmentResult r = prompt_alignment(w, norm, cx.eval, cx.range, cx.scheme,
                                               ec.align_prompts, ec.align_nets,
                                               eroot.child("alignment").seed());
    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < r.prompts.size(); ++i)
      rows.push_back({fmt(r.prompts[i]), fmt(r.achieved[i])});
    write_result(out, "alignment", r.to_json(), {"prompt", "achieved"}, rows);
    std::printf("alignment: r2 %.4f over %ld prompts x %ld nets\n", r.r2, ec.align_prompts,
                ec.align_nets);
  }
  if (all || suite == "onestep") {
    OneStepResult r = one_step_compare(w, norm, cx.eval, cx.scheme, ec.onestep_inits, cx.prompt,
                                       eroot.child("onestep").seed());
    std::vector<std::vector<std::string>> rows;
    for (const auto& g : r.grid)
      rows.push_back({g.method, fmt(g.lr), fmt(g.weight_decay), fmt(g.metric)});
    rows.push_back({"init", "", "", fmt(r.init_metric)});
    rows.push_back({"gpt", "", "", fmt(r.gpt_metric)});
    write_result(out, "onestep", r.to_json(), {"method", "lr", "weight_decay", "metric"}, rows);
    std::printf("onestep: init %.6g  best baseline %.6g (%s lr %g wd %g)  one-step %.6g\n",
                r.init_metric, r.best_baseline.metric, r.best_baseline.method.c_str(),
                r.best_baseline.lr, r.best_baseline.weight_decay, r.gpt_metric);
  }
  if (all || suite == "sweep") {
    std::vector<double> grid = linspace(cx.range.lo, cx.range.hi, ec.sweep_prompts);
    PromptSweepResult r = prompt_sweep(w, norm, cx.eval, cx.scheme, ec.sweep_inits, grid,
                                       eroot.child("sweep").seed());
    std::vector<std::vector<std::string>> rows;
    for (const auto& pt : r.points)
      rows.push_back({std::to_string(pt.init_index), fmt(pt.prompt), fmt(pt.achieved)});
    write_result(out, "sweep", r.to_json(), {"init", "prompt", "achieved"}, rows);
    std::printf("sweep: spearman %.4f over %zu points\n", r.spearman, r.points.size());
  }
  if (all || suite == "ood") {
    const InitScheme schemes[2] = {InitScheme::KaimingNormal, InitScheme::Orthogonal};
    json js{{"prompt", cx.prompt}, {"steps", ec.ood_steps}, {"schemes", json::array()}};
    std::vector<std::vector<std::string>> rows;
    for (size_t si = 0; si < 2; ++si) {
      json sj{{"scheme", init_scheme_name(schemes[si])}, {"metrics", json::array()}};
      for (long i = 0; i < ec.ood_inits; ++i) {
        std::vector<float> t0 =
            init_params(cx.ds.manifest.arch, schemes[si],
                        eroot.child("ood-init", si, (uint64_t)i).seed())
                .values;
        RecursiveResult r = recursive_prompt(w, norm, cx.eval, t0, cx.prompt, ec.ood_steps,
                                             eroot.child("ood", si, (uint64_t)i).seed());
        sj["metrics"].push_back(r.metrics);
        for (size_t k = 0; k < r.metrics.size(); ++k)
          rows.push_back({init_scheme_name(schemes[si]), std::to_string(i), std::to_string(k),
                          fmt(r.metrics[k])});
      }
      js["schemes"].push_back(std::move(sj));
    }
    write_result(out, "ood", js, {"scheme", "init", "step", "metric"}, rows);
    std::printf("ood: %ld recursive steps, %ld inits per scheme\n", ec.ood_steps, ec.ood_inits);
  }
  if (all || suite == "nnscore") {
    std::vector<double> prompts = linspace(cx.range.lo, cx.range.hi, ec.nn_prompts);
    NnScoreResult r = nearest_neighbor_score(w, cx.ds, cx.metric_idx, prompts,
                                             eroot.child("nnscore").seed());
    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < r.prompts.size(); ++i)
      rows.push_back({fmt(r.prompts[i]), fmt(r.scores[i])});
    write_result(out, "nnscore", r.to_json(), {"prompt", "score"}, rows);
    double m = std::accumulate(r.scores.begin(), r.scores.end(), 0.0) / (double)r.scores.size();
    std::printf("nnscore: mean %.1f%% over %ld prompts\n", m, ec.nn_prompts);
  }
  if (all || suite == "variance") {
    double worst = cx.eval.maximize() ? cx.range.lo : cx.range.hi;
    VarianceResult r = variance_decomposition(w, norm, cx.ds.manifest.arch, cx.scheme, worst,
                                              cx.prompt, ec.var_outer, ec.var_inner,
                                              eroot.child("variance").seed(), ec.var_topk);
    std::vector<std::vector<std::string>> rows;
    for (size_t d = 0; d < r.noise_var.size(); ++d)
      rows.push_back({std::to_string(d), fmt(r.noise_var[d]), fmt(r.init_var[d])});
    write_result(out, "variance", r.to_json(), {"param", "noise_var", "init_var"}, rows);
    std::printf("variance: mean init %.6g vs mean noise %.6g\n", r.mean_init_var,
                r.mean_noise_var);
  }
  if (all || suite == "surface") {
    std::vector<float> t0 =
        init_params(cx.ds.manifest.arch, cx.scheme, eroot.child("surface-init").seed()).values;
    SurfaceResult r = pca_surface_export(w, norm, cx.eval, t0, cx.prompt, ec.surface_samples,
                                         ec.surface_grid, eroot.child("surface").seed(),
                                         ec.surface_threshold);
    std::vector<std::vector<std::string>> rows;
    for (const auto& g : r.grid) rows.push_back({"grid", fmt(g[0]), fmt(g[1]), fmt(g[2])});
    for (const auto& s : r.samples) rows.push_back({"sample", fmt(s[0]), fmt(s[1]), fmt(s[2])});
    write_result(out, "surface", r.to_json(), {"kind", "c1", "c2", "metric"}, rows);
    std::printf("surface: %zu retained samples, %ld dropped, max metric delta %.3g\n",
                r.samples.size(), r.dropped, r.max_recon_metric_delta);
  }
  return 0;
}

int cmd_sweep(const AppConfig& cfg, const std::string& data_dir, const std::string& out) {
  if (cfg.eval.probe_nets < 1)
    throw std::runtime_error("sweep needs the alignment probe (eval.probe_nets >= 1)");
  LoadedDataset ds = load_dataset(data_dir);
  fs::create_directories(out);
  save_config(cfg, out);
  std::vector<std::vector<std::string>> rows;
  long failures = 0;
  for (size_t hi = 0; hi < cfg.sweep.hiddens.size(); ++hi)
    for (size_t ri = 0; ri < cfg.sweep.train_runs.size(); ++ri) {
      long hidden = cfg.sweep.hiddens[hi];
      long nruns = cfg.sweep.train_runs[ri];
      GptConfig mc = cfg.model;
      mc.hidden = hidden;
      TrainConfig tc = cfg.train;
      if (cfg.sweep.iters > 0) tc.iters = cfg.sweep.iters;
      tc.seed = Rng(cfg.train.seed).child("cell", hi, ri).seed();
      std::string label = "h" + std::to_string(hidden) + "_r" +
                          (nruns > 0 ? std::to_string(nruns) : std::string("all"));
      std::string status = "ok";
      double best = std::numeric_limits<double>::quiet_NaN();
      long best_iter = -1;
      try {
        LoadedDataset sub = ds;
        if (nruns > 0) {
          if ((size_t)nruns > sub.train_idx.size())
            throw std::runtime_error("sweep cell wants more training runs than the dataset has");
          sub.train_idx.resize((size_t)nruns);
        }
        AlignProbe probe = make_align_probe(sub, tc.metric, cfg.eval.probe_prompts,
                                            cfg.eval.probe_nets, cfg.eval.seed);
        TrainResult r = pretrain(sub, mc, tc, out + "/" + label, probe);
        for (const auto& rec : r.report.records)
          if (!std::isnan(rec.align) && (best_iter < 0 || rec.align > best)) {
            best = rec.align;
            best_iter = rec.iter;
          }
      } catch (const std::exception& e) {
        status = std::string("failed: ") + e.what();
        ++failures;
      }
      rows.push_back({std::to_string(hidden), std::to_string(nruns), std::to_string(tc.seed),
                      status, fmt(best), std::to_string(best_iter)});
      std::printf("cell %s: %s  best align %.4g at iter %ld\n", label.c_str(), status.c_str(),
                  best, best_iter);
    }
  write_csv(out + "/sweep.csv", {"hidden", "train_runs", "train_seed", "status", "best_align",
                                 "best_iter"},
            rows);
  std::printf("sweep: %zu cells, %ld failed, table %s/sweep.csv\n", rows.size(), failures,
              out.c_str());
  return 0;
}

}  // namespace

// ---------- command line ----------

int run_cli(int argc, char** argv) {
  CLI::App app{"diffusion models over neural-network checkpoints"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 0;
  int jobs = 0;
  auto* opt_config =
      app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  auto* opt_seed =
      app.add_option("--seed", seed, "root seed; derives the data/train/eval sub-streams");
  auto* opt_jobs = app.add_option("--jobs", jobs, "worker threads (results are identical for any "
                                                  "value)")
                       ->check(CLI::PositiveNumber);
  (void)opt_config;
  (void)opt_jobs;

  struct {
    std::string task, init, out;
    long runs = 0, ckpts = 0;
  } g;
  auto* gen = app.add_subcommand("gen-data", "train many task networks and store checkpoints");
  auto* g_task = gen->add_option("--task", g.task, "blobs | imagegrid | cartpole");
  auto* g_runs = gen->add_option("--runs", g.runs, "training runs to store");
  auto* g_ckpts = gen->add_option("--ckpts", g.ckpts, "checkpoints kept per run");
  auto* g_init = gen->add_option("--init", g.init, "weight init scheme for the task networks");
  gen->add_option("--out", g.out, "dataset directory")->required();

  struct {
    std::string data, out, metric, mode;
    long iters = 0, batch = 0, eval_interval = 0, hidden = 0, layers = 0, heads = 0, chunk = 0;
    double lr = 0;
    bool no_augment = false, final_only = false;
  } t;
  auto* train = app.add_subcommand("train", "pre-train the diffusion transformer on a dataset");
  train->add_option("--data", t.data, "dataset directory")->required()->check(
      CLI::ExistingDirectory);
  train->add_option("--out", t.out, "output directory")->required();
  auto* t_iters = train->add_option("--iters", t.iters, "training iterations");
  auto* t_batch = train->add_option("--batch", t.batch, "batch size");
  auto* t_lr = train->add_option("--lr", t.lr, "peak learning rate");
  auto* t_ei = train->add_option("--eval-interval", t.eval_interval, "iterations per report row");
  auto* t_metric = train->add_option("--metric", t.metric, "conditioning metric name");
  auto* t_hidden = train->add_option("--hidden", t.hidden, "transformer width");
  auto* t_layers = train->add_option("--layers", t.layers, "transformer depth");
  auto* t_heads = train->add_option("--heads", t.heads, "attention heads");
  auto* t_mode = train->add_option("--mode", t.mode, "parameter tokenization: layer | chunked");
  auto* t_chunk = train->add_option("--chunk-size", t.chunk, "max parameters per token (chunked)");
  train->add_flag("--no-augment", t.no_augment, "disable permutation augmentation");
  train->add_flag("--final-only", t.final_only, "train on (initial, final) pairs only");

  struct {
    std::string model, data, out, init, init_file;
    double prompt = 0;
    long steps = 1;
  } o;
  auto* opt = app.add_subcommand("optimize", "sample updated parameters from a trained model");
  opt->add_option("--model", o.model, "model file")->required()->check(CLI::ExistingFile);
  opt->add_option("--data", o.data, "dataset directory (task rebuild + metric evaluation)")
      ->required()
      ->check(CLI::ExistingDirectory);
  opt->add_option("--out", o.out, "output trajectory file (run-record format)")->required();
  auto* o_prompt = opt->add_option("--prompt", o.prompt, "prompted metric value");
  opt->add_option("--steps", o.steps, "recursive sampling steps")->check(CLI::PositiveNumber);
  opt->add_option("--init", o.init, "starting-net init scheme (default: the dataset's)");
  opt->add_option("--init-file", o.init_file, "start from the last checkpoint of this run file")
      ->check(CLI::ExistingFile);

  struct {
    std::string model, data, out, suite = "all";
  } e;
  auto* ev = app.add_subcommand("eval", "run evaluation suites against a trained model");
  ev->add_option("--model", e.model, "model file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", e.data, "dataset directory")->required()->check(
      CLI::ExistingDirectory);
  ev->add_option("--out", e.out, "output directory")->required();
  ev->add_option("--suite", e.suite, "which evaluation to run")
      ->check(CLI::IsMember({"alignment", "onestep", "sweep", "ood", "nnscore", "variance",
                             "surface", "all"}));

  struct {
    std::string data, out;
    std::vector<long> hiddens, train_runs;
    long iters = 0;
  } s;
  auto* sw = app.add_subcommand("sweep", "train a grid of models and tabulate alignment");
  sw->add_option("--data", s.data, "dataset directory")->required()->check(
      CLI::ExistingDirectory);
  sw->add_option("--out", s.out, "output directory")->required();
  auto* s_hiddens =
      sw->add_option("--hiddens", s.hiddens, "transformer widths")->delimiter(',');
  auto* s_runs =
      sw->add_option("--train-runs", s.train_runs, "training-split sizes (0 = all)")->delimiter(',');
  auto* s_iters = sw->add_option("--iters", s.iters, "iterations per cell");

  for (auto* sub : {gen, train, opt, ev, sw}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h);
  } catch (const CLI::ParseError& pe) {
    app.exit(pe);
    return 1;
  }

  AppConfig cfg;
  try {
    if (!config_path.empty()) cfg = AppConfig::load(config_path);
    if (opt_seed->count()) derive_seeds(cfg, seed);
    if (g_task->count()) cfg.data.task = g.task;
    if (g_runs->count()) cfg.data.runs = g.runs;
    if (g_ckpts->count()) cfg.data.ckpts_per_run = g.ckpts;
    if (g_init->count()) cfg.data.init = g.init;
    if (t_iters->count()) cfg.train.iters = t.iters;
    if (t_batch->count()) cfg.train.batch = t.batch;
    if (t_lr->count()) cfg.train.lr = t.lr;
    if (t_ei->count()) cfg.train.eval_interval = t.eval_interval;
    if (t_metric->count()) cfg.train.metric = t.metric;
    if (t_hidden->count()) cfg.model.hidden = t.hidden;
    if (t_layers->count()) cfg.model.layers = t.layers;
    if (t_heads->count()) cfg.model.heads = t.heads;
    if (t_mode->count()) cfg.model.token_mode = t.mode;
    if (t_chunk->count()) cfg.model.M = t.chunk;
    if (t.no_augment) cfg.train.augment = false;
    if (t.final_only) cfg.train.final_only = true;
    if (s_hiddens->count()) cfg.sweep.hiddens = s.hiddens;
    if (s_runs->count()) cfg.sweep.train_runs = s.train_runs;
    if (s_iters->count()) cfg.sweep.iters = s.iters;
    if (jobs > 0) set_jobs(jobs);
    cfg.validate();
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "config error: %s\n", ex.what());
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(cfg, g.out);
    if (train->parsed()) return cmd_train(cfg, t.data, t.out);
    if (opt->parsed())
      return cmd_optimize(cfg, o.model, o.data, o.out, o.prompt, o_prompt->count() > 0, o.steps,
                          o.init, o.init_file);
    if (ev->parsed()) return cmd_eval(cfg, e.model, e.data, e.suite, e.out);
    if (sw->parsed()) return cmd_sweep(cfg, s.data, s.out);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 2;
  }
  return 0;
}

}  // namespace ckptdiff
