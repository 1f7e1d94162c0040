#include "bstrat/dpq_vqvae.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace bstrat {

using ad::Tape;
using ad::Var;

namespace {

// Normalizes each row to unit length; rows with (near-)zero norm stay zero.
void l2_normalize_rows(Tensor& t) {
  const int n = t.dim(0), d = t.dim(1);
  for (int i = 0; i < n; ++i) {
    double sq = 0.0;
    for (int j = 0; j < d; ++j) sq += t.at(i, j) * t.at(i, j);
    const double norm = std::sqrt(sq);
    if (norm > 1e-12)
      for (int j = 0; j < d; ++j) t.at(i, j) /= norm;
  }
}

}  // namespace

void DpqConfig::validate() const {
  if (groups < 1) throw std::invalid_argument("DpqConfig: groups must be >= 1");
  if (n_codes < 1) throw std::invalid_argument("DpqConfig: n_codes must be >= 1");
  if (code_dim < 1) throw std::invalid_argument("DpqConfig: code_dim must be >= 1");
  if (d < 1) throw std::invalid_argument("DpqConfig: d must be >= 1");
  if (beta < 0.0) throw std::invalid_argument("DpqConfig: beta must be >= 0");
  if (ema_gamma < 0.0 || ema_gamma >= 1.0)
    throw std::invalid_argument("DpqConfig: ema_gamma must be in [0, 1)");
  if (ema_eps <= 0.0) throw std::invalid_argument("DpqConfig: ema_eps must be > 0");
}

void DpqQuantizer::init(const DpqConfig& c, Rng& rng) {
  c.validate();
  cfg = c;
  e2c_in.resize(static_cast<size_t>(cfg.groups));
  e2c_out.resize(static_cast<size_t>(cfg.groups));
  c2e.resize(static_cast<size_t>(cfg.groups));
  codes.clear();
  ema_size.clear();
  ema_sum.clear();
  for (int g = 0; g < cfg.groups; ++g) {
    e2c_in[static_cast<size_t>(g)].init(cfg.d, cfg.d, rng);
    e2c_out[static_cast<size_t>(g)].init(cfg.d, cfg.code_dim, rng);
    c2e[static_cast<size_t>(g)].init(cfg.code_dim, cfg.d, rng);

    Tensor cb({cfg.n_codes, cfg.code_dim});
    for (int j = 0; j < cfg.n_codes; ++j)
      for (int k = 0; k < cfg.code_dim; ++k) cb.at(j, k) = rng.normal();
    l2_normalize_rows(cb);
    codes.push_back(cb);
    // unit size per code with sums equal to the codes keeps the EMA invariant
    // codes = sums / smoothed(sizes) true from the start
    ema_size.emplace_back(std::vector<int>{cfg.n_codes});
    ema_size.back().fill(1.0);
    ema_sum.push_back(cb);
  }
}

ad::NamedParams DpqQuantizer::named_params() {
  ad::NamedParams out;
  for (int g = 0; g < cfg.groups; ++g) {
    const std::string prefix = "group" + std::to_string(g);
    e2c_in[static_cast<size_t>(g)].collect(prefix + ".e2c_in", out);
    e2c_out[static_cast<size_t>(g)].collect(prefix + ".e2c_out", out);
    c2e[static_cast<size_t>(g)].collect(prefix + ".c2e", out);
  }
  return out;
}

namespace {

// Nearest code per query row, both sides l2-normalized, Euclidean argmin with
// ties to the smallest index.
std::vector<int> nearest_codes(const Tensor& queries, const Tensor& codebook) {
  Tensor qn = queries, cn = codebook;
  l2_normalize_rows(qn);
  l2_normalize_rows(cn);
  const int n = qn.dim(0), m = cn.dim(0), d = qn.dim(1);
  std::vector<int> idx(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    double best = 0.0;
    int best_j = -1;
    for (int j = 0; j < m; ++j) {
      double dist = 0.0;
      for (int k = 0; k < d; ++k) {
        const double diff = qn.at(i, k) - cn.at(j, k);
        dist += diff * diff;
      }
      if (best_j < 0 || dist < best) {
        best = dist;
        best_j = j;
      }
    }
    idx[static_cast<size_t>(i)] = best_j;
  }
  return idx;
}

}  // namespace

DpqQuantizer::QuantizeOut DpqQuantizer::quantize(Tape& t, Var e) {
  return quantize_with_indices(t, e, {});
}

DpqQuantizer::QuantizeOut DpqQuantizer::quantize_with_indices(
    Tape& t, Var e, const std::vector<std::vector<int>>& fixed) {
  if (e.val().ndim() != 2 || e.val().dim(1) != cfg.d)
    throw std::invalid_argument("quantize: embeddings must be [N, d]");
  const int n = e.val().dim(0);
  const bool pinned = !fixed.empty();
  if (pinned && static_cast<int>(fixed.size()) != cfg.groups)
    throw std::invalid_argument("quantize: fixed indices must have one list per group");

  QuantizeOut out;
  for (int g = 0; g < cfg.groups; ++g) {
    Var h = ad::tanh_act(e2c_in[static_cast<size_t>(g)].forward(t, e));
    Var zc = e2c_out[static_cast<size_t>(g)].forward(t, h);  // [N, code_dim]

    std::vector<int> idx;
    if (pinned) {
      idx = fixed[static_cast<size_t>(g)];
      if (static_cast<int>(idx.size()) != n)
        throw std::invalid_argument("quantize: fixed index list length mismatch");
      for (int i : idx)
        if (i < 0 || i >= cfg.n_codes)
          throw std::invalid_argument("quantize: fixed index out of range");
    } else {
      idx = nearest_codes(zc.val(), codes[static_cast<size_t>(g)]);
    }

    // raw (unnormalized) stored codes are what flows onward
    Tensor picked({n, cfg.code_dim});
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < cfg.code_dim; ++k)
        picked.at(i, k) = codes[static_cast<size_t>(g)].at(idx[static_cast<size_t>(i)], k);

    Var st = ad::straight_through(zc, picked);
    Var emb = c2e[static_cast<size_t>(g)].forward(t, st);  // [N, d]

    out.indices.push_back(std::move(idx));
    out.z_c.push_back(zc);
    out.picked.push_back(std::move(picked));
    out.z_q_embed.push_back(emb);
    out.z = (g == 0) ? emb : ad::add(out.z, emb);
  }
  return out;
}

void DpqQuantizer::ema_update(const QuantizeOut& out) {
  if (static_cast<int>(out.indices.size()) != cfg.groups)
    throw std::invalid_argument("ema_update: result group count mismatch");
  const double g1 = cfg.ema_gamma, g2 = 1.0 - cfg.ema_gamma;
  for (int g = 0; g < cfg.groups; ++g) {
    const std::vector<int>& idx = out.indices[static_cast<size_t>(g)];
    Tensor zn = out.z_c[static_cast<size_t>(g)].val();  // [N, code_dim]
    l2_normalize_rows(zn);

    Tensor counts({cfg.n_codes});
    Tensor sums({cfg.n_codes, cfg.code_dim});
    for (size_t i = 0; i < idx.size(); ++i) {
      const int j = idx[i];
      counts.at(j) += 1.0;
      for (int k = 0; k < cfg.code_dim; ++k)
        sums.at(j, k) += zn.at(static_cast<int>(i), k);
    }

    Tensor& size = ema_size[static_cast<size_t>(g)];
    Tensor& sum = ema_sum[static_cast<size_t>(g)];
    double total = 0.0;
    for (int j = 0; j < cfg.n_codes; ++j) {
      size.at(j) = g1 * size.at(j) + g2 * counts.at(j);
      total += size.at(j);
      for (int k = 0; k < cfg.code_dim; ++k)
        sum.at(j, k) = g1 * sum.at(j, k) + g2 * sums.at(j, k);
    }
    for (int j = 0; j < cfg.n_codes; ++j) {
      const double smoothed =
          (size.at(j) + cfg.ema_eps) / (total + cfg.n_codes * cfg.ema_eps) * total;
      for (int k = 0; k < cfg.code_dim; ++k)
        codes[static_cast<size_t>(g)].at(j, k) = sum.at(j, k) / smoothed;
    }
  }
}

double DpqQuantizer::ema_invariant_gap() const {
  double gap = 0.0;
  for (int g = 0; g < cfg.groups; ++g) {
    const Tensor& size = ema_size[static_cast<size_t>(g)];
    const Tensor& sum = ema_sum[static_cast<size_t>(g)];
    double total = 0.0;
    for (int j = 0; j < cfg.n_codes; ++j) total += size.at(j);
    for (int j = 0; j < cfg.n_codes; ++j) {
      const double smoothed =
          (size.at(j) + cfg.ema_eps) / (total + cfg.n_codes * cfg.ema_eps) * total;
      for (int k = 0; k < cfg.code_dim; ++k) {
        const double want = sum.at(j, k) / smoothed;
        gap = std::max(gap, std::abs(codes[static_cast<size_t>(g)].at(j, k) - want));
      }
    }
  }
  return gap;
}

VqLosses vq_losses(Tape& t, const DpqQuantizer::QuantizeOut& q, Var reconstruction,
                   const Tensor& targets, const DpqConfig& cfg) {
  if (reconstruction.val().shape != targets.shape)
    throw std::invalid_argument("vq_losses: reconstruction/target shape mismatch");

  Var rgs = ad::sum_all(ad::square(ad::sub(reconstruction, ad::constant(t, targets))));

  Var commit;
  for (int g = 0; g < cfg.groups; ++g) {
    Var term = ad::sum_all(ad::square(ad::sub(
        q.z_c[static_cast<size_t>(g)], ad::constant(t, q.picked[static_cast<size_t>(g)]))));
    commit = (g == 0) ? term : ad::add(commit, term);
  }
  // the codex-update term ||sg(z_c) - c||^2 equals the commitment numerically;
  // it enters the objective as a constant because EMA, not SGD, moves the codes
  const double commit_value = commit.scalar();

  Var pc;
  if (cfg.groups >= 2) {
    for (int a = 0; a < cfg.groups; ++a)
      for (int b = a + 1; b < cfg.groups; ++b) {
        Var dots =
            ad::rows_dot(q.z_q_embed[static_cast<size_t>(a)], q.z_q_embed[static_cast<size_t>(b)]);
        if (cfg.abs_partial_correlation) dots = ad::abs_op(dots);
        Var term = ad::sum_all(dots);
        pc = pc.valid() ? ad::add(pc, term) : term;
      }
  } else {
    pc = ad::constant(t, Tensor::scalar(0.0));
  }

  VqLosses out;
  out.rgs = rgs.scalar();
  out.vq = commit_value + cfg.beta * commit_value;
  out.pc = pc.scalar();
  out.objective = ad::add(rgs, ad::add(ad::scale(commit, cfg.beta), pc));
  out.total = ad::add(out.objective, ad::constant(t, Tensor::scalar(commit_value)));
  return out;
}

Tensor fine_targets(const Tensor& window, int stride_samples) {
  if (window.ndim() != 2) throw std::invalid_argument("fine_targets: window must be [C, T]");
  if (stride_samples < 1) throw std::invalid_argument("fine_targets: stride must be >= 1");
  const int c = window.dim(0), total = window.dim(1);
  const int n = total / stride_samples;
  Tensor out({n, c, stride_samples});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int s = 0; s < stride_samples; ++s)
        out.at(i, ch, s) = window.at(ch, i * stride_samples + s);
  return out;
}

void FineDecoder::init(int channels_, int d_, int layers, int heads, int ffn, double dropout,
                       Rng& rng) {
  if (channels_ < 1 || d_ < 1) throw std::invalid_argument("FineDecoder: bad dimensions");
  channels = channels_;
  d = d_;
  transformer.init(layers, d, heads, ffn, dropout, dropout, rng);
  up1.init(d, d, 3, 2, 1, 1, rng);
  up2.init(d, d, 3, 2, 1, 1, rng);
  up3.init(d, d, 3, 2, 1, 1, rng);
  up4.init(d, d, 9, 5, 2, 0, rng);
  out.init(d, channels, rng);
}

ad::NamedParams FineDecoder::named_params() {
  ad::NamedParams np;
  transformer.collect("transformer", np);
  up1.collect("up1", np);
  up2.collect("up2", np);
  up3.collect("up3", np);
  up4.collect("up4", np);
  out.collect("out", np);
  return np;
}

Var FineDecoder::decode(Tape& t, Var z, bool training, Rng* rng) {
  if (z.val().ndim() != 2 || z.val().dim(1) != d)
    throw std::invalid_argument("decode: input must be [N, d]");
  const int n = z.val().dim(0);

  Var x = ad::add(z, ad::constant(t, nn::sinusoidal_positions(n, d)));
  x = ad::reshape(x, {1, n, d});
  x = transformer.forward(t, x, training, rng, nullptr);

  Var u = ad::transpose_last2(x);  // [1, d, N]
  u = ad::gelu(up1.forward(t, u));
  u = ad::gelu(up2.forward(t, u));
  u = ad::gelu(up3.forward(t, u));
  u = up4.forward(t, u);  // [1, d, 40N]
  const int len = u.val().dim(2);

  Var y = ad::reshape(ad::transpose_last2(u), {len, d});
  y = out.forward(t, y);                             // [40N, C]
  return ad::transpose_last2(ad::reshape(y, {n, len / n, channels}));  // [N, C, 40]
}

void VqVaeModel::init(const FineConfig& enc_cfg, const DpqConfig& dpq_cfg, int dec_layers,
                      Rng& rng) {
  if (enc_cfg.d != dpq_cfg.d)
    throw std::invalid_argument("VqVaeModel: encoder and quantizer widths differ");
  if (dec_layers < 1) throw std::invalid_argument("VqVaeModel: decoder needs >= 1 layer");
  decoder_layers = dec_layers;
  encoder.init(enc_cfg, rng);
  quantizer.init(dpq_cfg, rng);
  decoder.init(enc_cfg.channels, enc_cfg.d, dec_layers, enc_cfg.heads, enc_cfg.ffn,
               enc_cfg.dropout, rng);
}

ad::NamedParams VqVaeModel::named_params() {
  ad::NamedParams np;
  for (auto& [name, p] : encoder.named_params()) np.emplace_back("encoder." + name, p);
  for (auto& [name, p] : quantizer.named_params()) np.emplace_back("quantizer." + name, p);
  for (auto& [name, p] : decoder.named_params()) np.emplace_back("decoder." + name, p);
  return np;
}

void VqVaeTrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("VqVaeTrainConfig: epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs)
    throw std::invalid_argument("VqVaeTrainConfig: warmup outside [0, epochs]");
  if (batch_windows < 1) throw std::invalid_argument("VqVaeTrainConfig: batch must be >= 1");
  if (base_lr <= 0.0 || min_lr <= 0.0 || min_lr > base_lr)
    throw std::invalid_argument("VqVaeTrainConfig: bad learning rates");
  if (weight_decay < 0.0) throw std::invalid_argument("VqVaeTrainConfig: bad weight decay");
}

namespace {

double perplexity_of(const std::vector<int64_t>& hist) {
  int64_t total = 0;
  for (int64_t c : hist) total += c;
  if (total == 0) return 0.0;
  double h = 0.0;
  for (int64_t c : hist) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return std::exp(h);
}

}  // namespace

VqVaeTrainStats train_vqvae(VqVaeModel& model, const Recording& rec, const AugmentConfig& aug,
                            const VqVaeTrainConfig& cfg, std::vector<std::string>* log_lines) {
  cfg.validate();
  const FineConfig& enc_cfg = model.encoder.cfg;
  if (model.encoder.cfg.channels != rec.channels)
    throw std::invalid_argument("train_vqvae: model/recording channel mismatch");
  if (std::abs(rec.sample_rate_hz - enc_cfg.sample_rate_hz) > 1e-9)
    throw std::invalid_argument("train_vqvae: recording rate does not match the model");

  PretrainWindows pw(rec, aug);
  const int S = pw.segments();
  if (S < 1) throw std::invalid_argument("train_vqvae: recording yields no windows");
  const int stride = enc_cfg.stride_samples();

  ad::NamedParams named = model.named_params();
  std::vector<ad::Param*> params = nn::params_of(named);
  nn::AdamW opt;
  opt.weight_decay = cfg.weight_decay;
  nn::CosineSchedule sched{cfg.base_lr, cfg.min_lr, cfg.warmup_epochs, cfg.epochs};

  Rng order_rng(mix_seed(cfg.seed, 0x0d9c));
  Rng dropout_rng(mix_seed(cfg.seed, 0xd90f));
  const int groups = model.quantizer.cfg.groups;

  VqVaeTrainStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = sched.lr_at(epoch);
    std::vector<int> order(static_cast<size_t>(S));
    for (int i = 0; i < S; ++i) order[static_cast<size_t>(i)] = i;
    order_rng.shuffle(order);

    nn::AdamW::zero_grad(params);
    int pending = 0;
    VqVaeEpochStats es;
    std::vector<std::vector<int64_t>> hist(
        static_cast<size_t>(groups),
        std::vector<int64_t>(static_cast<size_t>(model.quantizer.cfg.n_codes), 0));

    for (int idx = 0; idx < S; ++idx) {
      const int seg = order[static_cast<size_t>(idx)];
      Tensor window = pw.fetch(seg, epoch);

      Tape tape;
      Var tokens = model.encoder.tokenize(tape, window);
      Var e = model.encoder.encode(tape, tokens, nullptr, true, &dropout_rng);
      DpqQuantizer::QuantizeOut q = model.quantizer.quantize(tape, e);
      Var recon = model.decoder.decode(tape, q.z, true, &dropout_rng);
      const int n = e.val().dim(0);
      Tensor targets = fine_targets(window, stride);
      if (targets.dim(0) != n) throw std::logic_error("train_vqvae: patch count mismatch");
      VqLosses losses = vq_losses(tape, q, recon, targets, model.quantizer.cfg);

      const double total = losses.total.scalar();
      if (!std::isfinite(total))
        throw std::runtime_error("train_vqvae: loss diverged (non-finite) at epoch " +
                                 std::to_string(epoch) + ", segment " + std::to_string(seg) +
                                 " (rgs=" + std::to_string(losses.rgs) +
                                 ", vq=" + std::to_string(losses.vq) +
                                 ", pc=" + std::to_string(losses.pc) + ")");

      tape.backward(ad::scale(losses.objective, 1.0 / cfg.batch_windows));
      model.quantizer.ema_update(q);

      es.rgs += losses.rgs;
      es.vq += losses.vq;
      es.pc += losses.pc;
      es.total += total;
      for (int g = 0; g < groups; ++g)
        for (int i : q.indices[static_cast<size_t>(g)])
          ++hist[static_cast<size_t>(g)][static_cast<size_t>(i)];

      ++pending;
      if (pending == cfg.batch_windows || idx == S - 1) {
        opt.step(params, lr);
        nn::AdamW::zero_grad(params);
        pending = 0;
      }
    }

    es.rgs /= S;
    es.vq /= S;
    es.pc /= S;
    es.total /= S;
    for (int g = 0; g < groups; ++g)
      es.perplexity.push_back(perplexity_of(hist[static_cast<size_t>(g)]));
    stats.epochs.push_back(es);

    if (log_lines != nullptr) {
      nlohmann::json line = {{"stage", "vqvae"}, {"epoch", epoch},      {"rgs", es.rgs},
                             {"vq", es.vq},     {"pc", es.pc},          {"total", es.total},
                             {"lr", lr},        {"perplexity", es.perplexity}};
      log_lines->push_back(line.dump());
    }
  }
  return stats;
}

}  // namespace bstrat
