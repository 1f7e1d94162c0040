#pragma once
// Neural network building blocks shared by the coarse and fine models:
// linear / conv layers, pre-norm transformer encoder, AdamW with cosine
// learning-rate schedule.  Layers are plain structs holding Params; forward()
// builds autodiff graph nodes on the caller's tape.

#include <string>
#include <unordered_map>
#include <vector>

#include "bstrat/autodiff.hpp"
#include "bstrat/rng.hpp"
#include "bstrat/tensor.hpp"

namespace bstrat::nn {

using ad::NamedParams;
using ad::Param;
using ad::Tape;
using ad::Var;

// ----- init / misc -----------------------------------------------------------

void init_uniform_fanin(Param& p, int fan_in, Rng& rng);
void init_normal(Param& p, double stddev, Rng& rng);
void init_constant(Param& p, double x);

// classic fixed sine/cosine position table [len, d]
Tensor sinusoidal_positions(int len, int d);

// entries are 0 with probability p, else 1/(1-p)
Tensor make_dropout_mask(const std::vector<int>& shape, double p, Rng& rng);

std::vector<Param*> params_of(const NamedParams& named);

// ----- layers ----------------------------------------------------------------

struct Linear {
  Param W;  // [din, dout]
  Param b;  // [dout]
  bool has_bias = true;

  void init(int din, int dout, Rng& rng, bool bias = true);
  Var forward(Tape& t, Var x);  // x: [N, din]
  void collect(const std::string& prefix, NamedParams& out);
};

struct Conv1d {
  Param w;  // [Co, Ci, K]
  Param b;  // [Co]
  int stride = 1, pad = 0;

  void init(int ci, int co, int k, int stride, int pad, Rng& rng);
  Var forward(Tape& t, Var x);  // x: [B, Ci, L]
  void collect(const std::string& prefix, NamedParams& out);
};

struct ConvTranspose1d {
  Param w;  // [Ci, Co, K]
  Param b;  // [Co]
  int stride = 1, pad = 0, out_pad = 0;

  void init(int ci, int co, int k, int stride, int pad, int out_pad, Rng& rng);
  Var forward(Tape& t, Var x);
  void collect(const std::string& prefix, NamedParams& out);
};

struct GroupNorm {
  Param gamma, beta;  // [C]
  int groups = 1;
  double eps = 1e-5;

  void init(int channels, int groups);
  Var forward(Tape& t, Var x);  // x: [B, C, L]
  void collect(const std::string& prefix, NamedParams& out);
};

struct LayerNorm {
  Param gamma, beta;  // [d]
  double eps = 1e-5;

  void init(int d);
  Var forward(Tape& t, Var x);  // x: [N, d]
  void collect(const std::string& prefix, NamedParams& out);
};

struct MultiheadSelfAttention {
  int d = 0, heads = 1;
  double dropout = 0.0;  // applied to the per-head mixed output during training
  Linear wq, wk, wv, wo;

  void init(int d, int heads, double dropout, Rng& rng);
  // x: [S, L, d].  probs_out (optional) receives the pre-dropout attention
  // probabilities as a [S*heads, L, L] non-differentiable var.
  Var forward(Tape& t, Var x, bool training, Rng* rng, Var* probs_out);
  void collect(const std::string& prefix, NamedParams& out);
};

// Pre-norm transformer encoder layer:
//   x = x + attn(ln1(x));  x = x + fc2(drop(gelu(fc1(ln2(x)))))
struct TransformerLayer {
  int d = 0, ffn = 0;
  double mlp_dropout = 0.0;
  LayerNorm ln1, ln2;
  MultiheadSelfAttention attn;
  Linear fc1, fc2;

  void init(int d, int heads, int ffn, double attn_dropout, double mlp_dropout, Rng& rng);
  Var forward(Tape& t, Var x, bool training, Rng* rng, Var* probs_out);
  void collect(const std::string& prefix, NamedParams& out);
};

struct TransformerStack {
  std::vector<TransformerLayer> layers;

  void init(int n_layers, int d, int heads, int ffn, double attn_dropout, double mlp_dropout,
            Rng& rng);
  // probs_per_layer (optional) collects each layer's attention probabilities.
  Var forward(Tape& t, Var x, bool training, Rng* rng, std::vector<Var>* probs_per_layer);
  void collect(const std::string& prefix, NamedParams& out);
};

// ----- optimization ------------------------------------------------------------

struct AdamW {
  double beta1 = 0.9, beta2 = 0.99, eps = 1e-8, weight_decay = 0.0;
  int64_t t = 0;

  void step(const std::vector<Param*>& params, double lr);
  static void zero_grad(const std::vector<Param*>& params);

 private:
  struct Slot {
    Tensor m, v;
  };
  std::unordered_map<Param*, Slot> state_;
};

// Linear warmup to base_lr, then cosine decay to min_lr.  Epoch-granular.
struct CosineSchedule {
  double base_lr = 1e-3, min_lr = 1e-5;
  int warmup_epochs = 0, total_epochs = 1;

  double lr_at(int epoch) const;  // epoch is 0-based
};

}  // namespace bstrat::nn
