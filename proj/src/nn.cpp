#include "bstrat/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace bstrat::nn {

// ===== init / misc ===========================================================

void init_uniform_fanin(Param& p, int fan_in, Rng& rng) {
  if (fan_in <= 0) throw std::invalid_argument("init_uniform_fanin: fan_in must be positive");
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : p.value.v) x = rng.uniform(-a, a);
  p.zero_grad();
}

void init_normal(Param& p, double stddev, Rng& rng) {
  for (double& x : p.value.v) x = rng.normal(0.0, stddev);
  p.zero_grad();
}

void init_constant(Param& p, double x) {
  p.value.fill(x);
  p.zero_grad();
}

Tensor sinusoidal_positions(int len, int d) {
  Tensor pos({len, d});
  for (int i = 0; i < len; ++i) {
    for (int j = 0; j < d; j += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(j) / d);
      pos.at(i, j) = std::sin(i * freq);
      if (j + 1 < d) pos.at(i, j + 1) = std::cos(i * freq);
    }
  }
  return pos;
}

Tensor make_dropout_mask(const std::vector<int>& shape, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("make_dropout_mask: p must be in [0,1)");
  Tensor m(shape);
  const double keep_scale = 1.0 / (1.0 - p);
  for (double& x : m.v) x = rng.uniform01() < p ? 0.0 : keep_scale;
  return m;
}

std::vector<Param*> params_of(const NamedParams& named) {
  std::vector<Param*> out;
  out.reserve(named.size());
  for (const auto& [name, p] : named) out.push_back(p);
  return out;
}

// ===== layers ================================================================

void Linear::init(int din, int dout, Rng& rng, bool bias) {
  W = Param(Tensor({din, dout}));
  init_uniform_fanin(W, din, rng);
  has_bias = bias;
  if (bias) {
    b = Param(Tensor({dout}));
    init_uniform_fanin(b, din, rng);
  }
}

Var Linear::forward(Tape& t, Var x) {
  Var w = ad::param(t, W);
  Var bias = has_bias ? ad::param(t, b) : Var{};
  return ad::linear(x, w, bias);
}

void Linear::collect(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".w", &W);
  if (has_bias) out.emplace_back(prefix + ".b", &b);
}

void Conv1d::init(int ci, int co, int k, int stride_, int pad_, Rng& rng) {
  stride = stride_;
  pad = pad_;
  w = Param(Tensor({co, ci, k}));
  b = Param(Tensor({co}));
  init_uniform_fanin(w, ci * k, rng);
  init_uniform_fanin(b, ci * k, rng);
}

Var Conv1d::forward(Tape& t, Var x) {
  return ad::conv1d(x, ad::param(t, w), ad::param(t, b), stride, pad);
}

void Conv1d::collect(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".w", &w);
  out.emplace_back(prefix + ".b", &b);
}

void ConvTranspose1d::init(int ci, int co, int k, int stride_, int pad_, int out_pad_, Rng& rng) {
  stride = stride_;
  pad = pad_;
  out_pad = out_pad_;
  w = Param(Tensor({ci, co, k}));
  b = Param(Tensor({co}));
  init_uniform_fanin(w, ci * k, rng);
  init_uniform_fanin(b, ci * k, rng);
}

Var ConvTranspose1d::forward(Tape& t, Var x) {
  return ad::conv1d_transpose(x, ad::param(t, w), ad::param(t, b), stride, pad, out_pad);
}

void ConvTranspose1d::collect(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".w", &w);
  out.emplace_back(prefix + ".b", &b);
}

void GroupNorm::init(int channels, int groups_) {
  groups = groups_;
  if (groups < 1 || channels % groups != 0)
    throw std::invalid_argument("GroupNorm: groups must divide channels");
  gamma = Param(Tensor({channels}));
  beta = Param(Tensor({channels}));
  init_constant(gamma, 1.0);
  init_constant(beta, 0.0);
}

Var GroupNorm::forward(Tape& t, Var x) {
  return ad::group_norm(x, ad::param(t, gamma), ad::param(t, beta), groups, eps);
}

void GroupNorm::collect(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".gamma", &gamma);
  out.emplace_back(prefix + ".beta", &beta);
}

void LayerNorm::init(int d) {
  gamma = Param(Tensor({d}));
  beta = Param(Tensor({d}));
  init_constant(gamma, 1.0);
  init_constant(beta, 0.0);
}

Var LayerNorm::forward(Tape& t, Var x) {
  return ad::layer_norm(x, ad::param(t, gamma), ad::param(t, beta), eps);
}

void LayerNorm::collect(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".gamma", &gamma);
  out.emplace_back(prefix + ".beta", &beta);
}

void MultiheadSelfAttention::init(int d_, int heads_, double dropout_, Rng& rng) {
  d = d_;
  heads = heads_;
  dropout = dropout_;
  if (heads < 1 || d % heads != 0)
    throw std::invalid_argument("MultiheadSelfAttention: heads must divide d");
  wq.init(d, d, rng);
  wk.init(d, d, rng);
  wv.init(d, d, rng);
  wo.init(d, d, rng);
}

Var MultiheadSelfAttention::forward(Tape& t, Var x, bool training, Rng* rng, Var* probs_out) {
  const Tensor& xv = x.val();
  if (xv.ndim() != 3 || xv.dim(2) != d)
    throw std::invalid_argument("MultiheadSelfAttention: expects [S,L,d] input");
  const int S = xv.dim(0), L = xv.dim(1);
  const int hd = d / heads;
  Var flat = ad::reshape(x, {S * L, d});
  Var q = ad::split_heads(ad::reshape(wq.forward(t, flat), {S, L, d}), S, L, heads);
  Var k = ad::split_heads(ad::reshape(wk.forward(t, flat), {S, L, d}), S, L, heads);
  Var v = ad::split_heads(ad::reshape(wv.forward(t, flat), {S, L, d}), S, L, heads);
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Var probs;
  Var mixed = ad::attention(q, k, v, att_scale, &probs);
  if (probs_out) *probs_out = probs;
  if (training && dropout > 0.0 && rng)
    mixed = ad::dropout_mask(mixed, make_dropout_mask(mixed.val().shape, dropout, *rng));
  Var merged = ad::merge_heads(mixed, S, L, heads);
  Var out = wo.forward(t, ad::reshape(merged, {S * L, d}));
  return ad::reshape(out, {S, L, d});
}

void MultiheadSelfAttention::collect(const std::string& prefix, NamedParams& out) {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
}

void TransformerLayer::init(int d_, int heads, int ffn_, double attn_dropout, double mlp_dropout_,
                            Rng& rng) {
  d = d_;
  ffn = ffn_;
  mlp_dropout = mlp_dropout_;
  ln1.init(d);
  ln2.init(d);
  attn.init(d, heads, attn_dropout, rng);
  fc1.init(d, ffn, rng);
  fc2.init(ffn, d, rng);
}

Var TransformerLayer::forward(Tape& t, Var x, bool training, Rng* rng, Var* probs_out) {
  const Tensor& xv = x.val();
  const int S = xv.dim(0), L = xv.dim(1);
  Var normed = ad::reshape(ln1.forward(t, ad::reshape(x, {S * L, d})), {S, L, d});
  Var att = attn.forward(t, normed, training, rng, probs_out);
  Var h = ad::add(x, att);
  Var n2 = ln2.forward(t, ad::reshape(h, {S * L, d}));
  Var mid = ad::gelu(fc1.forward(t, n2));
  if (training && mlp_dropout > 0.0 && rng)
    mid = ad::dropout_mask(mid, make_dropout_mask(mid.val().shape, mlp_dropout, *rng));
  Var ff = ad::reshape(fc2.forward(t, mid), {S, L, d});
  return ad::add(h, ff);
}

void TransformerLayer::collect(const std::string& prefix, NamedParams& out) {
  ln1.collect(prefix + ".ln1", out);
  attn.collect(prefix + ".attn", out);
  ln2.collect(prefix + ".ln2", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

void TransformerStack::init(int n_layers, int d, int heads, int ffn, double attn_dropout,
                            double mlp_dropout, Rng& rng) {
  layers.assign(static_cast<size_t>(n_layers), TransformerLayer{});
  for (auto& l : layers) l.init(d, heads, ffn, attn_dropout, mlp_dropout, rng);
}

Var TransformerStack::forward(Tape& t, Var x, bool training, Rng* rng,
                              std::vector<Var>* probs_per_layer) {
  if (probs_per_layer) probs_per_layer->clear();
  for (auto& l : layers) {
    Var probs;
    x = l.forward(t, x, training, rng, probs_per_layer ? &probs : nullptr);
    if (probs_per_layer) probs_per_layer->push_back(probs);
  }
  return x;
}

void TransformerStack::collect(const std::string& prefix, NamedParams& out) {
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(prefix + ".layer" + std::to_string(i), out);
}

// ===== optimization ==========================================================

void AdamW::step(const std::vector<Param*>& params, double lr) {
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (Param* p : params) {
    auto it = state_.find(p);
    if (it == state_.end()) {
      Slot slot;
      slot.m = Tensor(p->value.shape);
      slot.v = Tensor(p->value.shape);
      it = state_.emplace(p, std::move(slot)).first;
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    for (size_t i = 0; i < p->value.v.size(); ++i) {
      const double g = p->grad.v[i];
      m.v[i] = beta1 * m.v[i] + (1.0 - beta1) * g;
      v.v[i] = beta2 * v.v[i] + (1.0 - beta2) * g * g;
      const double mhat = m.v[i] / bc1;
      const double vhat = v.v[i] / bc2;
      p->value.v[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->value.v[i]);
    }
  }
}

void AdamW::zero_grad(const std::vector<Param*>& params) {
  for (Param* p : params) p->zero_grad();
}

double CosineSchedule::lr_at(int epoch) const {
  if (warmup_epochs > 0 && epoch < warmup_epochs)
    return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
  const int span = total_epochs - warmup_epochs;
  if (span <= 1) return min_lr;
  const double progress =
      static_cast<double>(epoch - warmup_epochs) / static_cast<double>(span - 1);
  const double clamped = progress < 0.0 ? 0.0 : (progress > 1.0 ? 1.0 : progress);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * clamped));
}

}  // namespace bstrat::nn
