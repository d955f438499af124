// The checkpoint-to-checkpoint transformer: tokenizes two parameter streams
// (conditioning theta and noised future x_j) plus three scalar tokens
// (current metric, prompted metric, diffusion step), runs a non-causal
// pre-norm transformer, decodes only the x_j-stream positions, and adds the
// decoded update onto theta. Zero-initialized decoders and positional
// embeddings make the whole network an exact identity at init.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckptdiff/arch.hpp"
#include "ckptdiff/diffusion.hpp"
#include "ckptdiff/graph.hpp"
#include "ckptdiff/tensor.hpp"

namespace ckptdiff {

// ---------- tokenization ----------

struct TokenDesc {
  long layer = 0;       // source layer in the ArchSpec
  bool is_bias = false; // weight or bias group
  long offset = 0;      // into the flat parameter vector
  long length = 0;
};

struct TokenLayout {
  std::string mode;  // "layer" | "chunked"
  long M = 0;        // max parameters per token (chunked mode)
  std::vector<TokenDesc> tokens;
  long total = 0;  // flat parameter count; tokens tile [0, total) in order
};

// Weight and bias of each layer become separate tokens; chunked mode further
// splits each group into ceil(len / M) pieces of at most M parameters.
TokenLayout build_layout(const ArchSpec& arch, const std::string& mode, long M = 0);

// ---------- configuration ----------

struct GptConfig {
  long hidden = 128, layers = 4, heads = 4;
  std::string token_mode = "layer";
  long M = 0;           // chunked mode only; must stay below `hidden`
  long freqs = 128;     // scalar encoder frequency count L
  double max_freq_exp = 14.0;  // top frequency 2^E
  long J = 60;          // diffusion steps baked into the model
  double beta_start = 1e-4, beta_end = 0.2;

  void validate() const;
  DiffusionSchedule schedule() const { return make_linear_schedule(J, beta_start, beta_end); }
  nlohmann::json to_json() const;
  static GptConfig from_json(const nlohmann::json& j);
};

// Frequencies log-uniform from 2^0 to 2^E; output interleaves
// [sin(w_1 x), cos(w_1 x), sin(w_2 x), cos(w_2 x), ...], length 2L.
std::vector<float> encode_scalar(double x, long num_freqs, double max_freq_exp);

template <class S>
TensorT<S> encode_scalar_rows(const std::vector<double>& xs, long L, double E) {
  TensorT<S> out((long)xs.size(), 2 * L);
  for (size_t r = 0; r < xs.size(); ++r)
    for (long k = 0; k < L; ++k) {
      double w = std::exp2(L == 1 ? 0.0 : E * (double)k / (double)(L - 1));
      out((long)r, 2 * k) = (S)std::sin(w * xs[r]);
      out((long)r, 2 * k + 1) = (S)std::cos(w * xs[r]);
    }
  return out;
}

// ---------- weights ----------

template <class S>
struct GptBlockT {
  TensorT<S> ln1_g, ln1_b;
  TensorT<S> qkv_w, qkv_b;    // [3H, H], [1, 3H]
  TensorT<S> proj_w, proj_b;  // [H, H], [1, H]
  TensorT<S> ln2_g, ln2_b;
  TensorT<S> fc_w, fc_b;      // [4H, H], [1, 4H]
  TensorT<S> mlp_w, mlp_b;    // [H, 4H], [1, H]
};

template <class S>
struct GptWeightsT {
  GptConfig cfg;
  ArchSpec arch;
  TokenLayout layout;

  // unique per-token linear encoders for both parameter streams
  std::vector<TensorT<S>> enc_t_w, enc_t_b;  // conditioning theta stream
  std::vector<TensorT<S>> enc_x_w, enc_x_b;  // noised future stream
  TensorT<S> enc_l_w, enc_l_b;               // current metric token
  TensorT<S> enc_ls_w, enc_ls_b;             // prompted metric token
  TensorT<S> enc_j_w, enc_j_b;               // diffusion step token
  TensorT<S> pos;                            // [T, H] learned positions
  std::vector<GptBlockT<S>> blocks;
  TensorT<S> lnf_g, lnf_b;
  // per-token decoders, x_j stream only, no sharing
  std::vector<TensorT<S>> dec_w, dec_b;  // [len, H], [1, len]

  long seq_len() const { return 2 * (long)layout.tokens.size() + 3; }

  long param_count() const {
    long n = 0;
    const_cast<GptWeightsT<S>*>(this)->visit([&](const std::string&, TensorT<S>& t) { n += t.size(); });
    return n;
  }

  template <class F>
  void visit(F&& f) {
    for (size_t t = 0; t < enc_t_w.size(); ++t) {
      f("enc_t_w." + std::to_string(t), enc_t_w[t]);
      f("enc_t_b." + std::to_string(t), enc_t_b[t]);
    }
    for (size_t t = 0; t < enc_x_w.size(); ++t) {
      f("enc_x_w." + std::to_string(t), enc_x_w[t]);
      f("enc_x_b." + std::to_string(t), enc_x_b[t]);
    }
    f("enc_l_w", enc_l_w);
    f("enc_l_b", enc_l_b);
    f("enc_ls_w", enc_ls_w);
    f("enc_ls_b", enc_ls_b);
    f("enc_j_w", enc_j_w);
    f("enc_j_b", enc_j_b);
    f("pos", pos);
    for (size_t l = 0; l < blocks.size(); ++l) {
      std::string p = "block" + std::to_string(l) + ".";
      GptBlockT<S>& blk = blocks[l];
      f(p + "ln1_g", blk.ln1_g);
      f(p + "ln1_b", blk.ln1_b);
      f(p + "qkv_w", blk.qkv_w);
      f(p + "qkv_b", blk.qkv_b);
      f(p + "proj_w", blk.proj_w);
      f(p + "proj_b", blk.proj_b);
      f(p + "ln2_g", blk.ln2_g);
      f(p + "ln2_b", blk.ln2_b);
      f(p + "fc_w", blk.fc_w);
      f(p + "fc_b", blk.fc_b);
      f(p + "mlp_w", blk.mlp_w);
      f(p + "mlp_b", blk.mlp_b);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
    for (size_t t = 0; t < dec_w.size(); ++t) {
      f("dec_w." + std::to_string(t), dec_w[t]);
      f("dec_b." + std::to_string(t), dec_b[t]);
    }
  }

  template <class T>
  GptWeightsT<T> cast() const {
    GptWeightsT<T> out;
    out.cfg = cfg;
    out.arch = arch;
    out.layout = layout;
    std::vector<const TensorT<S>*> src;
    const_cast<GptWeightsT<S>*>(this)->visit(
        [&](const std::string&, TensorT<S>& t) { src.push_back(&t); });
    out.allocate_like(*this);
    size_t i = 0;
    out.visit([&](const std::string&, TensorT<T>& t) { t = src[i++]->template cast<T>(); });
    return out;
  }

  // mirror another instantiation's shapes (data uninitialized)
  template <class O>
  void allocate_like(const GptWeightsT<O>& o) {
    auto shape = [](const auto& t) { return std::make_pair(t.nrow, t.ncol); };
    auto mk = [&](const auto& t) { return TensorT<S>(shape(t).first, shape(t).second); };
    enc_t_w.clear();
    enc_t_b.clear();
    enc_x_w.clear();
    enc_x_b.clear();
    for (const auto& t : o.enc_t_w) enc_t_w.push_back(mk(t));
    for (const auto& t : o.enc_t_b) enc_t_b.push_back(mk(t));
    for (const auto& t : o.enc_x_w) enc_x_w.push_back(mk(t));
    for (const auto& t : o.enc_x_b) enc_x_b.push_back(mk(t));
    enc_l_w = mk(o.enc_l_w);
    enc_l_b = mk(o.enc_l_b);
    enc_ls_w = mk(o.enc_ls_w);
    enc_ls_b = mk(o.enc_ls_b);
    enc_j_w = mk(o.enc_j_w);
    enc_j_b = mk(o.enc_j_b);
    pos = mk(o.pos);
    blocks.clear();
    for (const auto& b : o.blocks) {
      GptBlockT<S> n;
      n.ln1_g = mk(b.ln1_g);
      n.ln1_b = mk(b.ln1_b);
      n.qkv_w = mk(b.qkv_w);
      n.qkv_b = mk(b.qkv_b);
      n.proj_w = mk(b.proj_w);
      n.proj_b = mk(b.proj_b);
      n.ln2_g = mk(b.ln2_g);
      n.ln2_b = mk(b.ln2_b);
      n.fc_w = mk(b.fc_w);
      n.fc_b = mk(b.fc_b);
      n.mlp_w = mk(b.mlp_w);
      n.mlp_b = mk(b.mlp_b);
      blocks.push_back(std::move(n));
    }
    lnf_g = mk(o.lnf_g);
    lnf_b = mk(o.lnf_b);
    dec_w.clear();
    dec_b.clear();
    for (const auto& t : o.dec_w) dec_w.push_back(mk(t));
    for (const auto& t : o.dec_b) dec_b.push_back(mk(t));
  }
};

using GptWeights = GptWeightsT<float>;

// Zero decoders, zero positions, ln gains 1, projections normal(0, 0.02).
GptWeights init_gpt(const GptConfig& cfg, const ArchSpec& arch, uint64_t seed);

// ---------- forward pass ----------

// Leaf ids for every weight tensor of one graph, in visit order.
struct GptVars {
  std::vector<int> all;
};

template <class S>
GptVars make_leaves(GraphT<S>& g, const GptWeightsT<S>& w) {
  GptVars v;
  const_cast<GptWeightsT<S>&>(w).visit(
      [&](const std::string&, TensorT<S>& t) { v.all.push_back(g.leaf(t)); });
  return v;
}

// Builds the denoiser forward pass on g from already-created input leaves
// x_j and theta (both [B, D]); returns the x0 prediction var, [B, D].
// Scalars enter as frequency-encoded tokens, one value per row; every
// diffusion step must be an integer in [1, cfg.J].
template <class S>
int build_gpt_forward(GraphT<S>& g, const GptVars& v, const GptConfig& cfg,
                      const TokenLayout& layout, int xj_var, int th_var,
                      const std::vector<double>& l_cur, const std::vector<double>& l_star,
                      const std::vector<double>& j_rows) {
  long P = (long)layout.tokens.size(), T = 2 * P + 3, H = cfg.hidden;
  long B = g.value(th_var).nrow;
  for (double j : j_rows)
    if (j < 1 || j > (double)cfg.J || j != std::floor(j))
      throw std::runtime_error("diffusion step out of range");
  if (g.value(xj_var).ncol != layout.total || g.value(th_var).ncol != layout.total)
    throw std::runtime_error("parameter width does not match the token layout");
  if (g.value(xj_var).nrow != B) throw std::runtime_error("batch size mismatch");
  if ((long)l_cur.size() != B || (long)l_star.size() != B || (long)j_rows.size() != B)
    throw std::runtime_error("one conditioning scalar per row required");

  // leaf ids by visit order; names resolved once per graph build
  size_t i = 0;
  auto next = [&]() { return v.all[i++]; };
  std::vector<int> etw(P), etb(P), exw(P), exb(P);
  for (long t = 0; t < P; ++t) {
    etw[(size_t)t] = next();
    etb[(size_t)t] = next();
  }
  for (long t = 0; t < P; ++t) {
    exw[(size_t)t] = next();
    exb[(size_t)t] = next();
  }
  int elw = next(), elb = next(), elsw = next(), elsb = next(), ejw = next(), ejb = next();
  int pos = next();
  struct B4 {
    int ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, mlp_w, mlp_b;
  };
  std::vector<B4> blk((size_t)cfg.layers);
  for (auto& b : blk) {
    b.ln1_g = next();
    b.ln1_b = next();
    b.qkv_w = next();
    b.qkv_b = next();
    b.proj_w = next();
    b.proj_b = next();
    b.ln2_g = next();
    b.ln2_b = next();
    b.fc_w = next();
    b.fc_b = next();
    b.mlp_w = next();
    b.mlp_b = next();
  }
  int lnf_g = next(), lnf_b = next();
  std::vector<int> dw(P), db(P);
  for (long t = 0; t < P; ++t) {
    dw[(size_t)t] = next();
    db[(size_t)t] = next();
  }

  // token order: [theta tokens][x_j tokens][l][l*][j]
  std::vector<int> embeds;
  embeds.reserve((size_t)T);
  for (long t = 0; t < P; ++t) {
    const TokenDesc& d = layout.tokens[(size_t)t];
    embeds.push_back(g.linear(g.slice_cols(th_var, d.offset, d.length), etw[(size_t)t],
                              etb[(size_t)t]));
  }
  for (long t = 0; t < P; ++t) {
    const TokenDesc& d = layout.tokens[(size_t)t];
    embeds.push_back(g.linear(g.slice_cols(xj_var, d.offset, d.length), exw[(size_t)t],
                              exb[(size_t)t]));
  }
  long L = cfg.freqs;
  double E = cfg.max_freq_exp;
  embeds.push_back(g.linear(g.input(encode_scalar_rows<S>(l_cur, L, E)), elw, elb));
  embeds.push_back(g.linear(g.input(encode_scalar_rows<S>(l_star, L, E)), elsw, elsb));
  embeds.push_back(g.linear(g.input(encode_scalar_rows<S>(j_rows, L, E)), ejw, ejb));

  int x = g.add_rowwise(g.stack_rows(embeds), pos);  // [B*T, H], pos period T
  for (const B4& b : blk) {
    int h = g.layernorm(x, b.ln1_g, b.ln1_b);
    int a = g.attention(g.linear(h, b.qkv_w, b.qkv_b), T, cfg.heads);
    x = g.add(x, g.linear(a, b.proj_w, b.proj_b));
    int h2 = g.layernorm(x, b.ln2_g, b.ln2_b);
    int f = g.gelu(g.linear(h2, b.fc_w, b.fc_b));
    x = g.add(x, g.linear(f, b.mlp_w, b.mlp_b));
  }
  x = g.layernorm(x, lnf_g, lnf_b);

  std::vector<int> pieces;
  pieces.reserve((size_t)P);
  for (long t = 0; t < P; ++t)
    pieces.push_back(g.linear(g.gather_row(x, T, P + t), dw[(size_t)t], db[(size_t)t]));
  (void)H;
  return g.add(th_var, g.concat_cols(pieces));  // global residual on theta
}

// Inference-only forward: builds a throwaway graph and returns the values.
Tensor gpt_apply(const GptWeights& w, const Tensor& x_j, const Tensor& theta,
                 const std::vector<float>& l_cur, const std::vector<float>& l_star, long j);

// Adapter for the samplers; `w` must outlive the returned function.
BatchDenoiseFn make_denoiser(const GptWeights* w);

// ---------- model file ----------

// `meta` is free-form provenance stored in the header (conditioning metric,
// source dataset, training settings) and returned verbatim on load.
void save_gpt(const std::string& path, const GptWeights& w, const NormStats& norm,
              const nlohmann::json& meta = nlohmann::json::object());

struct LoadedGpt {
  GptWeights weights;
  NormStats norm;
  nlohmann::json meta;
};
LoadedGpt load_gpt(const std::string& path);

}  // namespace ckptdiff
