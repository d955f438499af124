#pragma once
// Task-network architecture descriptors and flat parameter vectors.
// Layout convention: layer-major; per layer the weight [fan_out x fan_in]
// row-major, then the bias [fan_out].
#include <json.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "ckptdiff/rng.hpp"
#include "ckptdiff/tensor.hpp"

namespace ckptdiff {

enum class Act { None, Relu, Selu };

inline std::string act_name(Act a) {
  switch (a) {
    case Act::Relu: return "relu";
    case Act::Selu: return "selu";
    default: return "none";
  }
}
inline Act act_from_name(const std::string& s) {
  if (s == "relu") return Act::Relu;
  if (s == "selu") return Act::Selu;
  if (s == "none") return Act::None;
  throw std::runtime_error("unknown activation: " + s);
}

struct LayerSpec {
  long fan_in = 0, fan_out = 0;
  bool has_bias = true;
  Act act = Act::None;

  long weight_count() const { return fan_in * fan_out; }
  long param_count() const { return weight_count() + (has_bias ? fan_out : 0); }
  bool operator==(const LayerSpec&) const = default;
};

struct ArchSpec {
  std::vector<LayerSpec> layers;

  long param_count() const {
    long d = 0;
    for (const auto& l : layers) d += l.param_count();
    return d;
  }
  long input_dim() const { return layers.front().fan_in; }
  long output_dim() const { return layers.back().fan_out; }

  // Offset of layer l's weight block in the flat vector.
  long layer_offset(size_t l) const {
    long off = 0;
    for (size_t i = 0; i < l; ++i) off += layers[i].param_count();
    return off;
  }

  // An MLP dims[0] -> dims[1] -> ... with the given activation on all hidden
  // layers and none on the output.
  static ArchSpec mlp(const std::vector<long>& dims, Act hidden_act, bool bias = true) {
    ArchSpec a;
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
      LayerSpec l;
      l.fan_in = dims[i];
      l.fan_out = dims[i + 1];
      l.has_bias = bias;
      l.act = (i + 2 < dims.size()) ? hidden_act : Act::None;
      a.layers.push_back(l);
    }
    return a;
  }

  bool operator==(const ArchSpec&) const = default;

  nlohmann::json to_json() const {
    nlohmann::json js = nlohmann::json::array();
    for (const auto& l : layers)
      js.push_back({{"in", l.fan_in},
                    {"out", l.fan_out},
                    {"bias", l.has_bias},
                    {"act", act_name(l.act)}});
    return nlohmann::json{{"layers", js}};
  }
  static ArchSpec from_json(const nlohmann::json& js) {
    ArchSpec a;
    for (const auto& l : js.at("layers")) {
      LayerSpec s;
      s.fan_in = l.at("in").get<long>();
      s.fan_out = l.at("out").get<long>();
      s.has_bias = l.at("bias").get<bool>();
      s.act = act_from_name(l.at("act").get<std::string>());
      a.layers.push_back(s);
    }
    return a;
  }
};

struct ParamVector {
  ArchSpec arch;
  std::vector<float> values;

  ParamVector() = default;
  explicit ParamVector(ArchSpec a) : arch(std::move(a)) {
    values.assign((size_t)arch.param_count(), 0.0f);
  }
  long size() const { return (long)values.size(); }
  bool all_finite() const {
    for (float v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

enum class InitScheme { UniformFanIn, XavierUniform, KaimingNormal, Orthogonal };

inline InitScheme init_scheme_from_name(const std::string& s) {
  if (s == "uniform-fan-in" || s == "uniform") return InitScheme::UniformFanIn;
  if (s == "xavier-uniform" || s == "xavier") return InitScheme::XavierUniform;
  if (s == "kaiming-normal" || s == "kaiming") return InitScheme::KaimingNormal;
  if (s == "orthogonal") return InitScheme::Orthogonal;
  throw std::runtime_error("unknown init scheme: " + s);
}
inline std::string init_scheme_name(InitScheme s) {
  switch (s) {
    case InitScheme::UniformFanIn: return "uniform-fan-in";
    case InitScheme::XavierUniform: return "xavier-uniform";
    case InitScheme::KaimingNormal: return "kaiming-normal";
    case InitScheme::Orthogonal: return "orthogonal";
  }
  return "?";
}

ParamVector init_params(const ArchSpec& arch, InitScheme scheme, uint64_t seed);

// Plain forward pass (no graph); math in double for determinism and accuracy.
TensorT<double> forward_task(const ParamVector& params, const TensorT<double>& inputs);

}  // namespace ckptdiff
