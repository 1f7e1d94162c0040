#pragma once
// Coarse-stage model: per-channel patch tokenizers, a temporal transformer
// that attends over patches within each channel, a spatial transformer that
// attends over channels at each temporal index, and the replaced-channel
// detection objective used for spatial-context pretraining.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bstrat/augment.hpp"
#include "bstrat/autodiff.hpp"
#include "bstrat/nn.hpp"
#include "bstrat/recording.hpp"
#include "bstrat/tensor.hpp"

namespace bstrat {

struct CoarseConfig {
  // model shape (defaults follow the reference setting; tests scale down)
  int d = 256;              // embedding width
  int conv_channels = 128;  // tokenizer conv width
  int temporal_layers = 4;
  int spatial_layers = 4;
  int heads = 8;
  int ffn = 1024;
  double dropout = 0.2;
  double patch_s = 0.25;         // patch length in seconds
  double sample_rate_hz = 400.0;  // rate the tokenizer geometry is built for
  // context objective
  double replace_ratio = 0.1;
  bool scalar_context_feature = false;  // reduce (E_s-E_t)^2 to a scalar before the head
  int donor_pool = 3;                   // donor windows drawn per training window
  // optimizer
  int epochs = 100;
  int warmup_epochs = 10;
  int batch_windows = 32;  // windows per optimizer step (gradient accumulation)
  double base_lr = 3e-4;
  double min_lr = 5e-6;
  double weight_decay = 0.05;
  double stop_accuracy = 0.0;  // early-stop once an epoch's accuracy reaches this (0 = off)
  uint64_t seed = 0;

  void validate() const;
};

// Non-overlapping patches covering the first N_c * W_c samples of a window.
struct CoarsePatchGrid {
  Tensor patches;  // [C, N_c, W_c]
  int channels() const { return patches.dim(0); }
  int n_patches() const { return patches.dim(1); }
  int patch_len() const { return patches.dim(2); }
};

// window: [C, T]; the trailing T - N_c*W_c remainder is dropped.
CoarsePatchGrid make_patch_grid(const Tensor& window, double sample_rate_hz, double patch_s);

struct SpatialContextBatch {
  CoarsePatchGrid corrupted;
  std::vector<char> replaced;  // [C], 1 = channel activity swapped in from a donor
  std::vector<int> scored;     // channel indices entering the loss
  std::vector<double> labels;  // aligned with scored; 1.0 = replaced
};

// Replaces max(1, round(ratio*C)) channels of `window` with the same
// channel's activity taken from one of the `donors` (same-shape windows from
// disjoint time ranges), and picks an equal-sized random sample of unreplaced
// channels so the scored set is label-balanced.  Deterministic per seed.
SpatialContextBatch make_context_batch(const Tensor& window, const std::vector<Tensor>& donors,
                                       double sample_rate_hz, const CoarseConfig& cfg,
                                       uint64_t seed);

class CoarseModel {
 public:
  CoarseConfig cfg;
  int channels = 0;

  // per-channel tokenizer stacks (conv -> group norm -> GELU, three blocks)
  std::vector<nn::Conv1d> conv1, conv2, conv3;
  std::vector<nn::GroupNorm> gn1, gn2, gn3;
  std::vector<nn::Linear> proj;
  nn::TransformerStack temporal, spatial;
  ad::Param spatial_embed;  // [C, d], used when no coordinates are given
  nn::Linear coord_map;     // 3 -> d, used when coordinates are given
  bool use_coords = false;
  nn::Linear context_head;  // d -> 1 (or 1 -> 1 in scalar-feature mode)

  void init(int channels, const CoarseConfig& cfg, bool with_coords, Rng& rng);
  ad::NamedParams named_params();

  // patches [C, N_c, W_c] -> tokens [C, N_c, d]; channel c uses its own weights
  ad::Var tokenize(ad::Tape& t, const CoarsePatchGrid& grid);

  // tokens + sinusoidal temporal positions -> E_t [C, N_c, d]
  ad::Var temporal_forward(ad::Tape& t, ad::Var tokens, bool training, Rng* rng);

  // E_t + spatial embeddings -> E_s [C, N_c, d]; attn_out (optional) receives
  // the spatial attention probabilities averaged over temporal positions,
  // shaped [layers, heads, C, C].
  ad::Var spatial_forward(ad::Tape& t, ad::Var e_t, const Tensor* coords, bool training, Rng* rng,
                          Tensor* attn_out);

  struct ForwardOut {
    ad::Var e_t, e_s;
    Tensor attn;  // [layers, heads, C, C]
  };
  ForwardOut forward(ad::Tape& t, ad::Var tokens, const Tensor* coords, bool training, Rng* rng);

  // Mean over patches of (E_s - E_t)^2 per scored channel, linear head to one
  // logit per channel, binary cross-entropy against batch.labels.  accuracy
  // counts logit > 0 as "replaced".
  struct LossOut {
    ad::Var loss;
    double accuracy = 0.0;
  };
  LossOut context_loss(ad::Tape& t, ad::Var e_t, ad::Var e_s, const SpatialContextBatch& batch);
};

struct CoarseTrainStats {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
  double final_accuracy = 0.0;
};

// Spatial-context pretraining over a continuous recording.  Windows and
// donors come from the overlapping-segment augmentation stream; donors are
// drawn only from windows whose cropped sample ranges are disjoint from the
// trained window's.  Appends one JSON metrics line per epoch to log_lines
// (if given) and calls attn_sink with each forward's [layers, heads, C, C]
// attention summary (if given).
CoarseTrainStats train_coarse(CoarseModel& model, const Recording& rec, const AugmentConfig& aug,
                              std::vector<std::string>* log_lines = nullptr,
                              const std::function<void(const Tensor&)>& attn_sink = {});

}  // namespace bstrat
