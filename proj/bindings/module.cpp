// Python bindings. Heavy state stays on disk (datasets, models); the
// functions here mirror the CLI verbs and hand results back as JSON strings
// so the python side stays schema-free.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "ckptdiff/checkpoints.hpp"
#include "ckptdiff/config.hpp"
#include "ckptdiff/evals.hpp"
#include "ckptdiff/model.hpp"
#include "ckptdiff/pretrain.hpp"

namespace py = pybind11;
using json = nlohmann::json;
using namespace ckptdiff;

namespace {

AppConfig parse_config(const std::string& config_json) {
  return AppConfig::from_json(config_json.empty() ? json::object() : json::parse(config_json));
}

std::string dataset_summary(const std::string& dir) {
  LoadedDataset ds = load_dataset(dir);
  json out{{"task", ds.manifest.task},
           {"runs", ds.manifest.runs},
           {"ckpts_per_run", ds.manifest.ckpts_per_run},
           {"param_count", ds.manifest.D},
           {"metrics", ds.manifest.metric_names},
           {"train_runs", ds.train_idx.size()},
           {"test_runs", ds.test_idx.size()}};
  json ranges = json::object();
  for (size_t mi = 0; mi < ds.manifest.metric_names.size(); ++mi) {
    std::vector<size_t> all(ds.runs.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    MetricRange r = observed_metric_range(ds, all, (long)mi, false);
    ranges[ds.manifest.metric_names[mi]] = {{"lo", r.lo}, {"hi", r.hi}};
  }
  out["metric_ranges"] = ranges;
  return out.dump();
}

std::string gen_data(const std::string& config_json, const std::string& out_dir) {
  AppConfig cfg = parse_config(config_json);
  cfg.validate();
  DatasetManifest m = generate_dataset(cfg.data, out_dir);
  return m.to_json().dump();
}

std::string train(const std::string& config_json, const std::string& data_dir,
                  const std::string& out_dir) {
  AppConfig cfg = parse_config(config_json);
  cfg.validate();
  LoadedDataset ds = load_dataset(data_dir);
  AlignProbe probe;
  if (cfg.eval.probe_nets > 0)
    probe = make_align_probe(ds, cfg.train.metric, cfg.eval.probe_prompts, cfg.eval.probe_nets,
                             cfg.eval.seed);
  TrainResult r = pretrain(ds, cfg.model, cfg.train, out_dir, probe);
  json recs = json::array();
  for (const auto& rec : r.report.records) recs.push_back(rec.to_json());
  return json{{"records", recs}, {"model", out_dir + "/model_ema.bin"}}.dump();
}

std::string sample(const std::string& model_path, const std::string& data_dir, py::object prompt,
                   long steps, uint64_t seed) {
  LoadedGpt gpt = load_gpt(model_path);
  LoadedDataset ds = load_dataset(data_dir);
  std::string metric = gpt.meta.value("metric", std::string());
  MetricEvaluator ev =
      make_metric_evaluator(ds.manifest, ds.dir, metric, Rng(seed).child("rollout").seed());
  long mi = resolve_metric_index(ds.manifest, metric);
  MetricRange range = observed_metric_range(ds, ds.train_idx, mi, ev.maximize());
  double p = prompt.is_none() ? range.best : prompt.cast<double>();
  std::vector<float> theta0 =
      init_params(ds.manifest.arch, dataset_init_scheme(ds), Rng(seed).child("init").seed())
          .values;
  RecursiveResult rr = recursive_prompt(gpt.weights, gpt.norm, ev, theta0, p, steps,
                                        Rng(seed).child("optimize").seed());
  json out = rr.to_json();
  out["prompt"] = p;
  out["metric"] = ev.metric;
  return out.dump();
}

std::string alignment(const std::string& model_path, const std::string& data_dir, long num_prompts,
                      long num_nets, uint64_t seed) {
  LoadedGpt gpt = load_gpt(model_path);
  LoadedDataset ds = load_dataset(data_dir);
  std::string metric = gpt.meta.value("metric", std::string());
  MetricEvaluator ev =
      make_metric_evaluator(ds.manifest, ds.dir, metric, Rng(seed).child("rollout").seed());
  long mi = resolve_metric_index(ds.manifest, metric);
  MetricRange range = observed_metric_range(ds, ds.train_idx, mi, ev.maximize());
  PromptAlignmentResult r = prompt_alignment(gpt.weights, gpt.norm, ev, range,
                                             dataset_init_scheme(ds), num_prompts, num_nets,
                                             Rng(seed).child("alignment").seed());
  return r.to_json().dump();
}

int cli(const std::vector<std::string>& args) {
  std::vector<std::string> storage;
  storage.push_back("ckptdiff");
  for (const auto& a : args) storage.push_back(a);
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  return run_cli((int)argv.size(), argv.data());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "diffusion models over neural-network checkpoints";
  m.def("gen_data", &gen_data, py::arg("config_json"), py::arg("out_dir"),
        "Generate a checkpoint dataset; returns the manifest as JSON.");
  m.def("dataset_summary", &dataset_summary, py::arg("dir"),
        "Sizes, metrics, and observed metric ranges of a dataset, as JSON.");
  m.def("train", &train, py::arg("config_json"), py::arg("data_dir"), py::arg("out_dir"),
        "Pre-train the diffusion transformer; returns the report as JSON.");
  m.def("sample", &sample, py::arg("model_path"), py::arg("data_dir"),
        py::arg("prompt") = py::none(), py::arg("steps") = 1, py::arg("seed") = 0,
        "Recursively sample updated parameters; returns metrics per step as JSON.");
  m.def("alignment", &alignment, py::arg("model_path"), py::arg("data_dir"),
        py::arg("num_prompts") = 20, py::arg("num_nets") = 128, py::arg("seed") = 0,
        "Prompt-alignment evaluation; returns prompts, achieved metrics, and R^2 as JSON.");
  m.def("cli", &cli, py::arg("args"), "Run a CLI invocation in-process; returns the exit code.");
}
