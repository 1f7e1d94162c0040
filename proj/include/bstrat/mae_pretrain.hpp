#pragma once
// Code-guided mask modeling: mask a random subset of patch positions, replace
// their tokenized embeddings with a learned token (inside FineEncoder), and
// train per-group classifiers to recover the code indices that a frozen
// reconstruction model (dpq_vqvae) assigns to the unmasked signal.

#include <cstdint>
#include <string>
#include <vector>

#include "bstrat/augment.hpp"
#include "bstrat/autodiff.hpp"
#include "bstrat/dpq_vqvae.hpp"
#include "bstrat/fine_encoder.hpp"
#include "bstrat/nn.hpp"
#include "bstrat/recording.hpp"

namespace bstrat {

struct MaskPlan {
  std::vector<int> positions;  // sorted, unique, each in [0, n_patches)
  int n_patches = 0;

  bool masked(int i) const;
  int count() const { return static_cast<int>(positions.size()); }
};

// Uniform subset without replacement, |mask| = round(ratio * n_patches),
// deterministic per seed.  Throws if the rounded size is zero (the masked
// objective would be undefined) or if n_patches < 2 / ratio outside (0, 1).
MaskPlan make_mask(int n_patches, double ratio, uint64_t seed);

class MaeHeads {
 public:
  int groups = 0, d = 0, n_codes = 0;
  std::vector<nn::Linear> heads;  // one d -> n_codes classifier per group

  void init(int groups, int d, int n_codes, Rng& rng);
  ad::NamedParams named_params();
};

struct MaeLossOut {
  ad::Var loss;                  // sum over groups of mean CE over masked rows
  double loss_sum = 0.0;         // the same objective summed over masked rows
  std::vector<double> accuracy;  // per-group argmax accuracy over masked rows
  double mean_accuracy = 0.0;
};

// e_out: [N, d] encoder output with masked rows already replaced; targets:
// per-group code indices [G][N] from the frozen quantizer on the unmasked
// signal.  Unmasked rows carry zero weight and contribute exactly nothing.
MaeLossOut mae_loss(ad::Tape& t, ad::Var e_out, const std::vector<std::vector<int>>& targets,
                    const MaskPlan& plan, MaeHeads& heads);

struct MaeModel {
  FineEncoder encoder;  // freshly initialized, NOT copied from the VQ-VAE
  MaeHeads heads;

  void init(const FineConfig& enc_cfg, int groups, int n_codes, Rng& rng);
  ad::NamedParams named_params();
};

struct MaeTrainConfig {
  int epochs = 20;
  int warmup_epochs = 2;
  int batch_windows = 8;
  double mask_ratio = 0.5;
  double base_lr = 3e-4;
  double min_lr = 5e-5;
  double weight_decay = 0.05;
  uint64_t seed = 0;

  void validate() const;
};

struct MaeEpochStats {
  double loss = 0.0;             // mean over windows of the per-window loss
  double loss_sum = 0.0;         // mean over windows of the summed form
  std::vector<double> accuracy;  // per-group means
  double mean_accuracy = 0.0;
};

struct MaeTrainStats {
  std::vector<MaeEpochStats> epochs;
  double final_mean_accuracy = 0.0;
};

// Mask-modeling pretraining.  `frozen` supplies target indices through its
// encoder + quantizer; its parameters receive no updates.  Logs one JSON line
// per epoch; throws std::runtime_error on divergence.
MaeTrainStats train_mae(MaeModel& model, VqVaeModel& frozen, const Recording& rec,
                        const AugmentConfig& aug, const MaeTrainConfig& cfg,
                        std::vector<std::string>* log_lines = nullptr);

}  // namespace bstrat
