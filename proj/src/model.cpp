#include "ckptdiff/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "ckptdiff/rng.hpp"

using nlohmann::json;

namespace ckptdiff {

TokenLayout build_layout(const ArchSpec& arch, const std::string& mode, long M) {
  if (mode != "layer" && mode != "chunked")
    throw std::runtime_error("token mode must be 'layer' or 'chunked'");
  if (mode == "chunked" && M < 1) throw std::runtime_error("chunked mode needs M >= 1");
  TokenLayout lay;
  lay.mode = mode;
  lay.M = mode == "chunked" ? M : 0;
  long off = 0;
  auto emit = [&](long layer, bool is_bias, long len) {
    if (len == 0) return;
    if (mode == "layer") {
      lay.tokens.push_back({layer, is_bias, off, len});
      off += len;
      return;
    }
    for (long done = 0; done < len; done += M) {
      long piece = std::min(M, len - done);
      lay.tokens.push_back({layer, is_bias, off, piece});
      off += piece;
    }
  };
  for (size_t l = 0; l < arch.layers.size(); ++l) {
    emit((long)l, false, arch.layers[l].weight_count());
    if (arch.layers[l].has_bias) emit((long)l, true, arch.layers[l].fan_out);
  }
  lay.total = off;
  return lay;
}

void GptConfig::validate() const {
  if (hidden < 1 || layers < 1 || heads < 1) throw std::runtime_error("bad transformer shape");
  if (hidden % heads != 0) throw std::runtime_error("heads must divide the hidden size");
  if (freqs < 1) throw std::runtime_error("need at least one encoder frequency");
  if (max_freq_exp < 0) throw std::runtime_error("max frequency exponent must be nonnegative");
  if (J < 1) throw std::runtime_error("need at least one diffusion step");
  if (!(beta_start > 0) || !(beta_end < 1) || !(beta_start < beta_end))
    throw std::runtime_error("schedule betas must satisfy 0 < beta_start < beta_end < 1");
  if (token_mode != "layer" && token_mode != "chunked")
    throw std::runtime_error("token mode must be 'layer' or 'chunked'");
  if (token_mode == "chunked") {
    if (M < 1) throw std::runtime_error("chunked mode needs M >= 1");
    if (M >= hidden)
      throw std::runtime_error(
          "M must be smaller than the transformer hidden size (token encoders would compress)");
  }
}

json GptConfig::to_json() const {
  return {{"hidden", hidden},      {"layers", layers},
          {"heads", heads},        {"token_mode", token_mode},
          {"M", M},                {"freqs", freqs},
          {"max_freq_exp", max_freq_exp}, {"J", J},
          {"beta_start", beta_start},     {"beta_end", beta_end}};
}

GptConfig GptConfig::from_json(const json& j) {
  GptConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.token_mode = j.value("token_mode", c.token_mode);
  c.M = j.value("M", c.M);
  c.freqs = j.value("freqs", c.freqs);
  c.max_freq_exp = j.value("max_freq_exp", c.max_freq_exp);
  c.J = j.value("J", c.J);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.validate();
  return c;
}

std::vector<float> encode_scalar(double x, long num_freqs, double max_freq_exp) {
  if (num_freqs < 1) throw std::runtime_error("need at least one encoder frequency");
  TensorT<float> rows = encode_scalar_rows<float>({x}, num_freqs, max_freq_exp);
  return rows.data;
}

GptWeights init_gpt(const GptConfig& cfg, const ArchSpec& arch, uint64_t seed) {
  cfg.validate();
  if (arch.layers.empty()) throw std::runtime_error("empty architecture");
  GptWeights w;
  w.cfg = cfg;
  w.arch = arch;
  w.layout = build_layout(arch, cfg.token_mode, cfg.M);

  long H = cfg.hidden, L2 = 2 * cfg.freqs;
  long P = (long)w.layout.tokens.size(), T = 2 * P + 3;
  Rng rng(seed);
  auto randn = [&](long r, long c) {
    Tensor t(r, c);
    for (auto& v : t.data) v = (float)rng.normal(0.0, 0.02);
    return t;
  };
  auto zeros = [](long r, long c) { return Tensor(r, c); };
  auto ones = [](long r, long c) {
    Tensor t(r, c);
    for (auto& v : t.data) v = 1.0f;
    return t;
  };

  for (const TokenDesc& d : w.layout.tokens) {
    w.enc_t_w.push_back(randn(H, d.length));
    w.enc_t_b.push_back(zeros(1, H));
  }
  for (const TokenDesc& d : w.layout.tokens) {
    w.enc_x_w.push_back(randn(H, d.length));
    w.enc_x_b.push_back(zeros(1, H));
  }
  w.enc_l_w = randn(H, L2);
  w.enc_l_b = zeros(1, H);
  w.enc_ls_w = randn(H, L2);
  w.enc_ls_b = zeros(1, H);
  w.enc_j_w = randn(H, L2);
  w.enc_j_b = zeros(1, H);
  w.pos = zeros(T, H);
  for (long l = 0; l < cfg.layers; ++l) {
    GptBlockT<float> b;
    b.ln1_g = ones(1, H);
    b.ln1_b = zeros(1, H);
    b.qkv_w = randn(3 * H, H);
    b.qkv_b = zeros(1, 3 * H);
    b.proj_w = randn(H, H);
    b.proj_b = zeros(1, H);
    b.ln2_g = ones(1, H);
    b.ln2_b = zeros(1, H);
    b.fc_w = randn(4 * H, H);
    b.fc_b = zeros(1, 4 * H);
    b.mlp_w = randn(H, 4 * H);
    b.mlp_b = zeros(1, H);
    w.blocks.push_back(std::move(b));
  }
  w.lnf_g = ones(1, H);
  w.lnf_b = zeros(1, H);
  for (const TokenDesc& d : w.layout.tokens) {
    w.dec_w.push_back(zeros(d.length, H));
    w.dec_b.push_back(zeros(1, d.length));
  }
  return w;
}

Tensor gpt_apply(const GptWeights& w, const Tensor& x_j, const Tensor& theta,
                 const std::vector<float>& l_cur, const std::vector<float>& l_star, long j) {
  Graph g;
  GptVars v = make_leaves(g, w);
  int xj = g.input(x_j);
  int th = g.input(theta);
  std::vector<double> lc(l_cur.begin(), l_cur.end()), ls(l_star.begin(), l_star.end());
  std::vector<double> jr((size_t)theta.nrow, (double)j);
  int out = build_gpt_forward(g, v, w.cfg, w.layout, xj, th, lc, ls, jr);
  return g.value(out);
}

BatchDenoiseFn make_denoiser(const GptWeights* w) {
  return [w](const Tensor& x_j, const Tensor& theta, const std::vector<float>& l_cur,
             const std::vector<float>& l_prompt, long j) {
    return gpt_apply(*w, x_j, theta, l_cur, l_prompt, j);
  };
}

// ---------- model file ----------

static constexpr char kModelMagic[8] = {'G', 'P', 'T', 'M', 'O', 'D', 'L', '1'};

void save_gpt(const std::string& path, const GptWeights& w, const NormStats& norm,
              const nlohmann::json& meta) {
  json tensors = json::array();
  std::vector<const Tensor*> order;
  const_cast<GptWeights&>(w).visit([&](const std::string& name, Tensor& t) {
    tensors.push_back({{"name", name}, {"rows", t.nrow}, {"cols", t.ncol}});
    order.push_back(&t);
  });
  json header = {{"config", w.cfg.to_json()},
                 {"arch", w.arch.to_json()},
                 {"norm", norm.to_json()},
                 {"meta", meta},
                 {"tensors", tensors}};
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(kModelMagic, sizeof(kModelMagic));
  uint32_t hlen = (uint32_t)hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(hs.data(), (std::streamsize)hs.size());
  for (const Tensor* t : order)
    out.write(reinterpret_cast<const char*>(t->data.data()), (std::streamsize)(t->size() * 4));
  if (!out) throw std::runtime_error("write failed: " + path);
}

LoadedGpt load_gpt(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kModelMagic, 8) != 0)
    throw std::runtime_error("not a model file: " + path);
  uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 4);
  std::string hs((size_t)hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw std::runtime_error("model file truncated: " + path);
  json header = json::parse(hs);

  LoadedGpt out;
  GptConfig cfg = GptConfig::from_json(header.at("config"));
  ArchSpec arch = ArchSpec::from_json(header.at("arch"));
  out.norm = NormStats::from_json(header.at("norm"));
  out.meta = header.value("meta", json::object());
  out.weights = init_gpt(cfg, arch, 0);

  const json& tensors = header.at("tensors");
  size_t i = 0;
  bool bad = false;
  out.weights.visit([&](const std::string& name, Tensor& t) {
    if (bad) return;
    if (i >= tensors.size()) {
      bad = true;
      return;
    }
    const json& meta = tensors[i++];
    if (meta.at("name") != name || meta.at("rows") != t.nrow || meta.at("cols") != t.ncol) {
      bad = true;
      return;
    }
    in.read(reinterpret_cast<char*>(t.data.data()), (std::streamsize)(t.size() * 4));
  });
  if (bad || i != tensors.size() || !in)
    throw std::runtime_error("model tensors do not match the header: " + path);
  in.peek();
  if (!in.eof()) throw std::runtime_error("trailing bytes in model file: " + path);
  return out;
}

}  // namespace ckptdiff
