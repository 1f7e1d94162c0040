#include "bstrat/mae_pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace bstrat {

using ad::Tape;
using ad::Var;

bool MaskPlan::masked(int i) const {
  return std::binary_search(positions.begin(), positions.end(), i);
}

MaskPlan make_mask(int n_patches, double ratio, uint64_t seed) {
  if (n_patches < 2) throw std::invalid_argument("make_mask: need at least 2 patches");
  if (ratio <= 0.0 || ratio >= 1.0)
    throw std::invalid_argument("make_mask: ratio must lie strictly inside (0, 1)");
  const int k = static_cast<int>(std::lround(ratio * n_patches));
  if (k == 0)
    throw std::invalid_argument("make_mask: rounded mask size is zero; raise the ratio");

  Rng rng(mix_seed(seed, 0x8a5c));
  MaskPlan plan;
  plan.n_patches = n_patches;
  plan.positions = rng.sample_without_replacement(n_patches, k);
  std::sort(plan.positions.begin(), plan.positions.end());
  return plan;
}

void MaeHeads::init(int groups_, int d_, int n_codes_, Rng& rng) {
  if (groups_ < 1 || d_ < 1 || n_codes_ < 2)
    throw std::invalid_argument("MaeHeads: bad dimensions");
  groups = groups_;
  d = d_;
  n_codes = n_codes_;
  heads.resize(static_cast<size_t>(groups));
  for (auto& h : heads) h.init(d, n_codes, rng);
}

ad::NamedParams MaeHeads::named_params() {
  ad::NamedParams out;
  for (int g = 0; g < groups; ++g)
    heads[static_cast<size_t>(g)].collect("head" + std::to_string(g), out);
  return out;
}

MaeLossOut mae_loss(Tape& t, Var e_out, const std::vector<std::vector<int>>& targets,
                    const MaskPlan& plan, MaeHeads& heads) {
  if (e_out.val().ndim() != 2 || e_out.val().dim(1) != heads.d)
    throw std::invalid_argument("mae_loss: embeddings must be [N, d]");
  const int n = e_out.val().dim(0);
  if (plan.n_patches != n) throw std::invalid_argument("mae_loss: plan/embedding length mismatch");
  if (static_cast<int>(targets.size()) != heads.groups)
    throw std::invalid_argument("mae_loss: one target list per group required");
  for (const auto& tg : targets) {
    if (static_cast<int>(tg.size()) != n)
      throw std::invalid_argument("mae_loss: target length mismatch");
    for (int c : tg)
      if (c < 0 || c >= heads.n_codes)
        throw std::invalid_argument("mae_loss: target index out of range");
  }
  if (plan.count() == 0) throw std::invalid_argument("mae_loss: empty mask");
  for (int i : plan.positions)
    if (i < 0 || i >= n) throw std::invalid_argument("mae_loss: mask position out of range");

  std::vector<double> weights(static_cast<size_t>(n), 0.0);
  for (int i : plan.positions) weights[static_cast<size_t>(i)] = 1.0 / plan.count();

  MaeLossOut out;
  for (int g = 0; g < heads.groups; ++g) {
    Var logits = heads.heads[static_cast<size_t>(g)].forward(t, e_out);  // [N, n_codes]
    Var ce = ad::cross_entropy_rows(logits, targets[static_cast<size_t>(g)], weights);
    out.loss = (g == 0) ? ce : ad::add(out.loss, ce);

    int correct = 0;
    for (int i : plan.positions) {
      int best = 0;
      for (int j = 1; j < heads.n_codes; ++j)
        if (logits.val().at(i, j) > logits.val().at(i, best)) best = j;
      if (best == targets[static_cast<size_t>(g)][static_cast<size_t>(i)]) ++correct;
    }
    out.accuracy.push_back(static_cast<double>(correct) / plan.count());
  }
  out.loss_sum = out.loss.scalar() * plan.count();
  double acc = 0.0;
  for (double a : out.accuracy) acc += a;
  out.mean_accuracy = acc / heads.groups;
  return out;
}

void MaeModel::init(const FineConfig& enc_cfg, int groups, int n_codes, Rng& rng) {
  encoder.init(enc_cfg, rng);
  heads.init(groups, enc_cfg.d, n_codes, rng);
}

ad::NamedParams MaeModel::named_params() {
  ad::NamedParams out;
  for (auto& [name, p] : encoder.named_params()) out.emplace_back("encoder." + name, p);
  for (auto& [name, p] : heads.named_params()) out.emplace_back(name, p);
  return out;
}

void MaeTrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("MaeTrainConfig: epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs)
    throw std::invalid_argument("MaeTrainConfig: warmup outside [0, epochs]");
  if (batch_windows < 1) throw std::invalid_argument("MaeTrainConfig: batch must be >= 1");
  if (mask_ratio <= 0.0 || mask_ratio >= 1.0)
    throw std::invalid_argument("MaeTrainConfig: mask_ratio must lie inside (0, 1)");
  if (base_lr <= 0.0 || min_lr <= 0.0 || min_lr > base_lr)
    throw std::invalid_argument("MaeTrainConfig: bad learning rates");
  if (weight_decay < 0.0) throw std::invalid_argument("MaeTrainConfig: bad weight decay");
}

MaeTrainStats train_mae(MaeModel& model, VqVaeModel& frozen, const Recording& rec,
                        const AugmentConfig& aug, const MaeTrainConfig& cfg,
                        std::vector<std::string>* log_lines) {
  cfg.validate();
  const FineConfig& enc_cfg = model.encoder.cfg;
  if (enc_cfg.channels != rec.channels)
    throw std::invalid_argument("train_mae: model/recording channel mismatch");
  if (std::abs(rec.sample_rate_hz - enc_cfg.sample_rate_hz) > 1e-9)
    throw std::invalid_argument("train_mae: recording rate does not match the model");
  if (frozen.encoder.cfg.channels != enc_cfg.channels ||
      std::abs(frozen.encoder.cfg.sample_rate_hz - enc_cfg.sample_rate_hz) > 1e-9)
    throw std::invalid_argument("train_mae: frozen model geometry mismatch");
  if (frozen.quantizer.cfg.groups != model.heads.groups ||
      frozen.quantizer.cfg.n_codes != model.heads.n_codes)
    throw std::invalid_argument("train_mae: heads do not match the frozen quantizer");

  PretrainWindows pw(rec, aug);
  const int S = pw.segments();
  if (S < 1) throw std::invalid_argument("train_mae: recording yields no windows");

  ad::NamedParams named = model.named_params();
  std::vector<ad::Param*> params = nn::params_of(named);
  nn::AdamW opt;
  opt.weight_decay = cfg.weight_decay;
  nn::CosineSchedule sched{cfg.base_lr, cfg.min_lr, cfg.warmup_epochs, cfg.epochs};

  Rng order_rng(mix_seed(cfg.seed, 0x8a0e));
  Rng dropout_rng(mix_seed(cfg.seed, 0x8a0d));
  const int groups = model.heads.groups;

  MaeTrainStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = sched.lr_at(epoch);
    std::vector<int> order(static_cast<size_t>(S));
    for (int i = 0; i < S; ++i) order[static_cast<size_t>(i)] = i;
    order_rng.shuffle(order);

    nn::AdamW::zero_grad(params);
    int pending = 0;
    MaeEpochStats es;
    es.accuracy.assign(static_cast<size_t>(groups), 0.0);

    for (int idx = 0; idx < S; ++idx) {
      const int seg = order[static_cast<size_t>(idx)];
      Tensor window = pw.fetch(seg, epoch);

      // target indices from the frozen model on the unmasked signal
      std::vector<std::vector<int>> targets;
      {
        Tape ft;
        Var ftok = frozen.encoder.tokenize(ft, window);
        Var fe = frozen.encoder.encode(ft, ftok, nullptr, false, nullptr);
        targets = frozen.quantizer.quantize(ft, fe).indices;
      }
      const int n = static_cast<int>(targets[0].size());
      MaskPlan plan = make_mask(n, cfg.mask_ratio,
                                mix_seed(cfg.seed, 0x8a5c, static_cast<uint64_t>(epoch),
                                         static_cast<uint64_t>(seg)));

      Tape tape;
      Var tokens = model.encoder.tokenize(tape, window);
      Var e_out = model.encoder.encode(tape, tokens, &plan.positions, true, &dropout_rng);
      MaeLossOut out = mae_loss(tape, e_out, targets, plan, model.heads);

      const double loss = out.loss.scalar();
      if (!std::isfinite(loss))
        throw std::runtime_error("train_mae: loss diverged (non-finite) at epoch " +
                                 std::to_string(epoch) + ", segment " + std::to_string(seg));

      tape.backward(ad::scale(out.loss, 1.0 / cfg.batch_windows));

      es.loss += loss;
      es.loss_sum += out.loss_sum;
      for (int g = 0; g < groups; ++g)
        es.accuracy[static_cast<size_t>(g)] += out.accuracy[static_cast<size_t>(g)];

      ++pending;
      if (pending == cfg.batch_windows || idx == S - 1) {
        opt.step(params, lr);
        nn::AdamW::zero_grad(params);
        pending = 0;
      }
    }

    es.loss /= S;
    es.loss_sum /= S;
    for (double& a : es.accuracy) a /= S;
    for (double a : es.accuracy) es.mean_accuracy += a;
    es.mean_accuracy /= groups;
    stats.epochs.push_back(es);

    if (log_lines != nullptr) {
      nlohmann::json line = {{"stage", "mae"},
                             {"epoch", epoch},
                             {"loss", es.loss},
                             {"loss_sum", es.loss_sum},
                             {"accuracy", es.accuracy},
                             {"mean_accuracy", es.mean_accuracy},
                             {"lr", lr}};
      log_lines->push_back(line.dump());
    }
  }
  stats.final_mean_accuracy = stats.epochs.back().mean_accuracy;
  return stats;
}

}  // namespace bstrat
