#include "bstrat/coarse_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "bstrat/rng.hpp"

namespace bstrat {

using ad::Tape;
using ad::Var;

namespace {

int conv_out_len(int len, int k, int stride, int pad) {
  return (len + 2 * pad - k) / stride + 1;
}

// Group-norm group count: 32 when it divides the width (the usual default),
// otherwise groups of four, otherwise one group.
int gn_groups(int channels) {
  if (channels % 32 == 0) return 32;
  if (channels % 4 == 0) return channels / 4;
  return 1;
}

}  // namespace

void CoarseConfig::validate() const {
  if (d < 1 || conv_channels < 1 || temporal_layers < 0 || spatial_layers < 0 || heads < 1 ||
      ffn < 1)
    throw std::invalid_argument("CoarseConfig: bad model dimensions");
  if (d % heads != 0) throw std::invalid_argument("CoarseConfig: d must divide into heads");
  if (!(patch_s > 0.0) || !(sample_rate_hz > 0.0))
    throw std::invalid_argument("CoarseConfig: bad patch length or sample rate");
  if (!(replace_ratio > 0.0) || replace_ratio > 0.5)
    throw std::invalid_argument("CoarseConfig: replace_ratio must be in (0, 0.5]");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("CoarseConfig: bad dropout");
  if (donor_pool < 1) throw std::invalid_argument("CoarseConfig: donor_pool must be positive");
  if (epochs < 1 || warmup_epochs < 0 || batch_windows < 1)
    throw std::invalid_argument("CoarseConfig: bad optimizer schedule");
  if (!(base_lr > 0.0) || !(min_lr > 0.0) || weight_decay < 0.0)
    throw std::invalid_argument("CoarseConfig: bad optimizer values");
}

CoarsePatchGrid make_patch_grid(const Tensor& window, double sample_rate_hz, double patch_s) {
  if (window.ndim() != 2) throw std::invalid_argument("make_patch_grid: window must be [C, T]");
  if (!(sample_rate_hz > 0.0) || !(patch_s > 0.0))
    throw std::invalid_argument("make_patch_grid: bad rate or patch length");
  const int C = window.dim(0), T = window.dim(1);
  const int W = static_cast<int>(std::llround(patch_s * sample_rate_hz));
  const int N = T / W;  // trailing remainder is dropped
  if (N < 1) throw std::invalid_argument("make_patch_grid: window shorter than one patch");
  CoarsePatchGrid grid;
  grid.patches = Tensor({C, N, W});
  for (int c = 0; c < C; ++c)
    for (int n = 0; n < N; ++n)
      for (int t = 0; t < W; ++t) grid.patches.at(c, n, t) = window.at(c, n * W + t);
  return grid;
}

SpatialContextBatch make_context_batch(const Tensor& window, const std::vector<Tensor>& donors,
                                       double sample_rate_hz, const CoarseConfig& cfg,
                                       uint64_t seed) {
  cfg.validate();
  if (window.ndim() != 2) throw std::invalid_argument("make_context_batch: window must be [C, T]");
  if (donors.empty()) throw std::invalid_argument("make_context_batch: donor pool is empty");
  for (const Tensor& d : donors)
    if (d.shape != window.shape)
      throw std::invalid_argument("make_context_batch: donor shape mismatch");
  const int C = window.dim(0), T = window.dim(1);
  const int n_rep = std::max(1, static_cast<int>(std::lround(cfg.replace_ratio * C)));
  if (C < 2 * n_rep)
    throw std::invalid_argument("make_context_batch: too few channels to balance labels");

  Rng rng(mix_seed(seed, 0xba7c));
  std::vector<int> order(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) order[static_cast<size_t>(c)] = c;
  rng.shuffle(order);

  SpatialContextBatch batch;
  batch.replaced.assign(static_cast<size_t>(C), 0);
  Tensor corrupted = window;
  for (int i = 0; i < n_rep; ++i) {
    const int c = order[static_cast<size_t>(i)];
    batch.replaced[static_cast<size_t>(c)] = 1;
    const Tensor& donor = donors[static_cast<size_t>(rng.below(donors.size()))];
    for (int t = 0; t < T; ++t) corrupted.at(c, t) = donor.at(c, t);
    batch.scored.push_back(c);
    batch.labels.push_back(1.0);
  }
  // the shuffled tail holds the unreplaced channels; take the next n_rep
  for (int i = n_rep; i < 2 * n_rep; ++i) {
    batch.scored.push_back(order[static_cast<size_t>(i)]);
    batch.labels.push_back(0.0);
  }
  batch.corrupted = make_patch_grid(corrupted, sample_rate_hz, cfg.patch_s);
  return batch;
}

void CoarseModel::init(int channels_, const CoarseConfig& cfg_, bool with_coords, Rng& rng) {
  cfg = cfg_;
  cfg.validate();
  if (channels_ < 1) throw std::invalid_argument("CoarseModel: need at least one channel");
  channels = channels_;
  use_coords = with_coords;

  const int cc = cfg.conv_channels;
  const int w = static_cast<int>(std::llround(cfg.patch_s * cfg.sample_rate_hz));
  const int l1 = conv_out_len(w, 9, 5, 4);
  const int l2 = conv_out_len(l1, 9, 5, 4);
  const int l3 = conv_out_len(l2, 3, 2, 1);
  if (l3 < 1) throw std::invalid_argument("CoarseModel: patch too short for the conv stack");

  conv1.resize(static_cast<size_t>(channels));
  conv2.resize(static_cast<size_t>(channels));
  conv3.resize(static_cast<size_t>(channels));
  gn1.resize(static_cast<size_t>(channels));
  gn2.resize(static_cast<size_t>(channels));
  gn3.resize(static_cast<size_t>(channels));
  proj.resize(static_cast<size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    conv1[static_cast<size_t>(c)].init(1, cc, 9, 5, 4, rng);
    conv2[static_cast<size_t>(c)].init(cc, cc, 9, 5, 4, rng);
    conv3[static_cast<size_t>(c)].init(cc, cc, 3, 2, 1, rng);
    gn1[static_cast<size_t>(c)].init(cc, gn_groups(cc));
    gn2[static_cast<size_t>(c)].init(cc, gn_groups(cc));
    gn3[static_cast<size_t>(c)].init(cc, gn_groups(cc));
    proj[static_cast<size_t>(c)].init(cc * l3, cfg.d, rng);
  }
  temporal.init(cfg.temporal_layers, cfg.d, cfg.heads, cfg.ffn, cfg.dropout, cfg.dropout, rng);
  spatial.init(cfg.spatial_layers, cfg.d, cfg.heads, cfg.ffn, cfg.dropout, cfg.dropout, rng);
  spatial_embed = ad::Param(Tensor({channels, cfg.d}));
  nn::init_normal(spatial_embed, 0.02, rng);
  coord_map.init(3, cfg.d, rng);
  context_head.init(cfg.scalar_context_feature ? 1 : cfg.d, 1, rng);
}

ad::NamedParams CoarseModel::named_params() {
  ad::NamedParams out;
  for (int c = 0; c < channels; ++c) {
    const std::string p = "tok" + std::to_string(c);
    conv1[static_cast<size_t>(c)].collect(p + ".conv1", out);
    gn1[static_cast<size_t>(c)].collect(p + ".gn1", out);
    conv2[static_cast<size_t>(c)].collect(p + ".conv2", out);
    gn2[static_cast<size_t>(c)].collect(p + ".gn2", out);
    conv3[static_cast<size_t>(c)].collect(p + ".conv3", out);
    gn3[static_cast<size_t>(c)].collect(p + ".gn3", out);
    proj[static_cast<size_t>(c)].collect(p + ".proj", out);
  }
  temporal.collect("temporal", out);
  spatial.collect("spatial", out);
  if (use_coords)
    coord_map.collect("coord_map", out);
  else
    out.emplace_back("spatial_embed", &spatial_embed);
  context_head.collect("context_head", out);
  return out;
}

Var CoarseModel::tokenize(Tape& t, const CoarsePatchGrid& grid) {
  if (grid.channels() != channels)
    throw std::invalid_argument("tokenize: grid channel count does not match the model");
  const int C = channels, N = grid.n_patches(), W = grid.patch_len();
  const int expect_w = static_cast<int>(std::llround(cfg.patch_s * cfg.sample_rate_hz));
  if (W != expect_w) throw std::invalid_argument("tokenize: patch length does not match the model");

  std::vector<Var> per_channel;
  per_channel.reserve(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    Tensor in({N, 1, W});
    for (int n = 0; n < N; ++n)
      for (int s = 0; s < W; ++s) in.at(n, 0, s) = grid.patches.at(c, n, s);
    Var x = ad::constant(t, std::move(in));
    x = conv1[static_cast<size_t>(c)].forward(t, x);
    x = gn1[static_cast<size_t>(c)].forward(t, x);
    x = ad::gelu(x);
    x = conv2[static_cast<size_t>(c)].forward(t, x);
    x = gn2[static_cast<size_t>(c)].forward(t, x);
    x = ad::gelu(x);
    x = conv3[static_cast<size_t>(c)].forward(t, x);
    x = gn3[static_cast<size_t>(c)].forward(t, x);
    x = ad::gelu(x);
    const int flat = x.val().dim(1) * x.val().dim(2);
    x = ad::reshape(x, {N, flat});
    per_channel.push_back(proj[static_cast<size_t>(c)].forward(t, x));  // [N, d]
  }
  return ad::reshape(ad::concat_rows(per_channel), {C, N, cfg.d});
}

Var CoarseModel::temporal_forward(Tape& t, Var tokens, bool training, Rng* rng) {
  const int N = tokens.val().dim(1);
  Var x = ad::add_cols_const(tokens, nn::sinusoidal_positions(N, cfg.d));
  return temporal.forward(t, x, training, rng, nullptr);
}

Var CoarseModel::spatial_forward(Tape& t, Var e_t, const Tensor* coords, bool training, Rng* rng,
                                 Tensor* attn_out) {
  const int C = e_t.val().dim(0), N = e_t.val().dim(1);
  Var x = ad::permute01(e_t);  // [N, C, d]
  Var se;
  if (use_coords) {
    if (coords == nullptr || coords->ndim() != 2 || coords->dim(0) != C || coords->dim(1) != 3)
      throw std::invalid_argument("spatial_forward: model expects [C, 3] coordinates");
    se = coord_map.forward(t, ad::constant(t, *coords));
  } else {
    se = ad::param(t, spatial_embed);
  }
  x = ad::add_cols_broadcast(x, se);

  std::vector<Var> probs;
  Var y = spatial.forward(t, x, training, rng, attn_out != nullptr ? &probs : nullptr);

  if (attn_out != nullptr) {
    const int L = static_cast<int>(probs.size()), H = cfg.heads;
    Tensor attn({L, H, C, C});
    for (int l = 0; l < L; ++l) {
      const Tensor& pv = probs[static_cast<size_t>(l)].val();  // [N*H, C, C]
      for (int s = 0; s < N; ++s)
        for (int h = 0; h < H; ++h)
          for (int i = 0; i < C; ++i)
            for (int j = 0; j < C; ++j) attn.at(l, h, i, j) += pv.at(s * H + h, i, j) / N;
    }
    *attn_out = std::move(attn);
  }
  return ad::permute01(y);  // [C, N, d]
}

CoarseModel::ForwardOut CoarseModel::forward(Tape& t, Var tokens, const Tensor* coords,
                                             bool training, Rng* rng) {
  ForwardOut out;
  out.e_t = temporal_forward(t, tokens, training, rng);
  out.e_s = spatial_forward(t, out.e_t, coords, training, rng, &out.attn);
  return out;
}

CoarseModel::LossOut CoarseModel::context_loss(Tape& t, Var e_t, Var e_s,
                                               const SpatialContextBatch& batch) {
  if (batch.scored.empty()) throw std::invalid_argument("context_loss: empty scored set");
  const int n = static_cast<int>(batch.scored.size());

  Var feat = ad::mean_axis1(ad::square(ad::sub(e_s, e_t)));  // [C, d]
  Var sc = ad::gather_rows(feat, batch.scored);              // [n, d]
  if (cfg.scalar_context_feature)
    sc = ad::mean_axis1(ad::reshape(sc, {n, cfg.d, 1}));  // [n, 1]
  Var logits = context_head.forward(t, sc);  // [n, 1]

  Tensor targets({n, 1});
  for (int i = 0; i < n; ++i) targets.at(i, 0) = batch.labels[static_cast<size_t>(i)];

  LossOut out;
  out.loss = ad::bce_with_logits_mean(logits, targets);
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const bool predicted_replaced = logits.val().at(i, 0) > 0.0;  // ties predict "genuine"
    if (predicted_replaced == (batch.labels[static_cast<size_t>(i)] > 0.5)) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / n;
  return out;
}

CoarseTrainStats train_coarse(CoarseModel& model, const Recording& rec, const AugmentConfig& aug,
                              std::vector<std::string>* log_lines,
                              const std::function<void(const Tensor&)>& attn_sink) {
  const CoarseConfig& cfg = model.cfg;
  if (model.channels != rec.channels)
    throw std::invalid_argument("train_coarse: model/recording channel mismatch");
  if (std::abs(rec.sample_rate_hz - cfg.sample_rate_hz) > 1e-9)
    throw std::invalid_argument("train_coarse: recording rate does not match the model");
  if (model.use_coords && rec.coords.empty())
    throw std::invalid_argument("train_coarse: model expects coordinates the recording lacks");

  PretrainWindows pw(rec, aug);
  const int S = pw.segments();
  if (S < 2)
    throw std::invalid_argument("train_coarse: recording too short to supply disjoint donors");

  Tensor coords;
  if (model.use_coords) {
    coords = Tensor({rec.channels, 3});
    for (int c = 0; c < rec.channels; ++c)
      for (int k = 0; k < 3; ++k) coords.at(c, k) = rec.coords[static_cast<size_t>(c)][k];
  }

  ad::NamedParams named = model.named_params();
  std::vector<ad::Param*> params = nn::params_of(named);
  nn::AdamW opt;
  opt.weight_decay = cfg.weight_decay;
  nn::CosineSchedule sched{cfg.base_lr, cfg.min_lr, cfg.warmup_epochs, cfg.epochs};

  Rng order_rng(mix_seed(cfg.seed, 0xc0a2));
  Rng dropout_rng(mix_seed(cfg.seed, 0xd209));

  CoarseTrainStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = sched.lr_at(epoch);
    std::vector<int> order(static_cast<size_t>(S));
    for (int i = 0; i < S; ++i) order[static_cast<size_t>(i)] = i;
    order_rng.shuffle(order);

    nn::AdamW::zero_grad(params);
    int pending = 0;
    double loss_sum = 0.0, acc_sum = 0.0;
    for (int idx = 0; idx < S; ++idx) {
      const int seg = order[static_cast<size_t>(idx)];
      Tensor window = pw.fetch(seg, epoch);

      Rng donor_rng(mix_seed(cfg.seed, 0xd040, static_cast<uint64_t>(epoch),
                             static_cast<uint64_t>(seg)));
      // donors must come from sample ranges disjoint from the trained window
      const int crop = pw.crop_samples();
      const int my_start = seg * pw.stride_samples() + pw.offset_of(seg, epoch);
      std::vector<int> valid;
      for (int j = 0; j < S; ++j) {
        if (j == seg) continue;
        const int start_j = j * pw.stride_samples() + pw.offset_of(j, epoch);
        if (start_j + crop <= my_start || my_start + crop <= start_j) valid.push_back(j);
      }
      if (valid.empty())
        throw std::invalid_argument(
            "train_coarse: no window with a disjoint time range is available as a donor");
      std::vector<Tensor> donors;
      for (int k = 0; k < cfg.donor_pool; ++k)
        donors.push_back(pw.fetch(valid[static_cast<size_t>(donor_rng.below(valid.size()))],
                                  epoch));

      SpatialContextBatch batch =
          make_context_batch(window, donors, rec.sample_rate_hz, cfg,
                             mix_seed(cfg.seed, 0xba7c, static_cast<uint64_t>(epoch),
                                      static_cast<uint64_t>(seg)));

      Tape tape;
      Var tokens = model.tokenize(tape, batch.corrupted);
      CoarseModel::ForwardOut fwd =
          model.forward(tape, tokens, model.use_coords ? &coords : nullptr, true, &dropout_rng);
      CoarseModel::LossOut out = model.context_loss(tape, fwd.e_t, fwd.e_s, batch);
      tape.backward(ad::scale(out.loss, 1.0 / cfg.batch_windows));
      if (attn_sink) attn_sink(fwd.attn);

      loss_sum += out.loss.scalar();
      acc_sum += out.accuracy;
      ++pending;
      if (pending == cfg.batch_windows || idx == S - 1) {
        opt.step(params, lr);
        nn::AdamW::zero_grad(params);
        pending = 0;
      }
    }

    const double mean_loss = loss_sum / S, mean_acc = acc_sum / S;
    stats.epoch_loss.push_back(mean_loss);
    stats.epoch_accuracy.push_back(mean_acc);
    if (log_lines != nullptr) {
      nlohmann::json line = {{"stage", "coarse"},
                             {"epoch", epoch},
                             {"loss", mean_loss},
                             {"accuracy", mean_acc},
                             {"lr", lr}};
      log_lines->push_back(line.dump());
    }
    if (cfg.stop_accuracy > 0.0 && mean_acc >= cfg.stop_accuracy) break;
  }
  stats.final_accuracy = stats.epoch_accuracy.back();
  return stats;
}

}  // namespace bstrat
