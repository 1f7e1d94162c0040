#pragma once
// Decoupled product quantization and the reconstruction (VQ-VAE) stage:
// G parallel sub-quantizers over the encoder embeddings, straight-through
// nearest-neighbor lookup on l2-normalized vectors, EMA codex updates, a
// transformer + transposed-conv decoder, and the combined loss
//   total = reconstruction + (codex + beta * commitment) + partial-correlation.

#include <cstdint>
#include <string>
#include <vector>

#include "bstrat/augment.hpp"
#include "bstrat/autodiff.hpp"
#include "bstrat/fine_encoder.hpp"
#include "bstrat/nn.hpp"
#include "bstrat/recording.hpp"
#include "bstrat/tensor.hpp"

namespace bstrat {

struct DpqConfig {
  int groups = 4;     // G sub-quantizers
  int n_codes = 256;  // codes per group
  int code_dim = 64;  // code vector width
  int d = 256;        // embedding width (must match the encoder)
  double beta = 1.0;  // commitment weight
  double ema_gamma = 0.99;
  double ema_eps = 1e-5;
  // The printed partial-correlation term uses raw signed dot products, which
  // is unbounded below; this flag switches to |dot| without changing the
  // default behavior.
  bool abs_partial_correlation = false;

  void validate() const;
};

class DpqQuantizer {
 public:
  DpqConfig cfg;
  // per group: embedding-to-codex map d -> d (tanh) -> code_dim, and
  // codex-to-embedding map code_dim -> d
  std::vector<nn::Linear> e2c_in, e2c_out, c2e;
  // EMA state (not gradient-trained): codes, cluster sizes, code sums
  std::vector<Tensor> codes;     // [n_codes, code_dim] each
  std::vector<Tensor> ema_size;  // [n_codes] each
  std::vector<Tensor> ema_sum;   // [n_codes, code_dim] each

  void init(const DpqConfig& cfg, Rng& rng);
  ad::NamedParams named_params();  // projections only; codes are EMA state

  struct QuantizeOut {
    std::vector<std::vector<int>> indices;  // [G][N] chosen code ids
    std::vector<ad::Var> z_c;               // per group [N, code_dim] projections
    std::vector<Tensor> picked;             // per group [N, code_dim] raw chosen codes
    std::vector<ad::Var> z_q_embed;         // per group [N, d] embedded codes
    ad::Var z;                              // [N, d] = sum over groups of z_q_embed
  };

  // Nearest-neighbor lookup per group: project, l2-normalize the query and a
  // copy of each code inside the distance only, argmin of Euclidean distance
  // (ties to the smallest index).  Gradients pass straight through the picked
  // codes to the projections.
  QuantizeOut quantize(ad::Tape& t, ad::Var e);

  // Same graph with the lookup pinned to the given indices; used to hold the
  // quantization piecewise-constant (finite-difference probes, MAE targets).
  // An empty outer vector means "no pins" and falls back to the lookup.
  QuantizeOut quantize_with_indices(ad::Tape& t, ad::Var e,
                                    const std::vector<std::vector<int>>& indices);

  // EMA update from one quantized batch: blend assignment counts and
  // l2-normalized projection sums, then codes = sums / Laplace-smoothed sizes.
  void ema_update(const QuantizeOut& out);

  // max deviation of codes from sums / smoothed sizes (the EMA invariant)
  double ema_invariant_gap() const;
};

struct VqLosses {
  ad::Var total;      // full printed loss; the codex term enters as a constant
  ad::Var objective;  // gradient-bearing part: rgs + beta * commitment + pc
  double rgs = 0.0;   // sum_i ||recon_i - target_i||^2
  double vq = 0.0;    // codex term + beta * commitment
  double pc = 0.0;    // partial-correlation penalty
};

// reconstruction/targets: [N, C, S_f] per-patch signal segments.
VqLosses vq_losses(ad::Tape& t, const DpqQuantizer::QuantizeOut& q, ad::Var reconstruction,
                   const Tensor& targets, const DpqConfig& cfg);

// Non-overlapping per-stride signal targets [N, C, S] cut from window [C, T].
Tensor fine_targets(const Tensor& window, int stride_samples);

class FineDecoder {
 public:
  int channels = 0, d = 256;
  nn::TransformerStack transformer;
  nn::ConvTranspose1d up1, up2, up3, up4;  // strides {2,2,2,5} invert the tokenizer
  nn::Linear out;                          // d -> C per output sample

  void init(int channels, int d, int layers, int heads, int ffn, double dropout, Rng& rng);
  ad::NamedParams named_params();

  // z [N, d] -> reconstruction [N, C, 40]
  ad::Var decode(ad::Tape& t, ad::Var z, bool training, Rng* rng);
};

struct VqVaeModel {
  FineEncoder encoder;
  DpqQuantizer quantizer;
  FineDecoder decoder;
  int decoder_layers = 4;

  void init(const FineConfig& enc_cfg, const DpqConfig& dpq_cfg, int decoder_layers, Rng& rng);
  ad::NamedParams named_params();
};

struct VqVaeTrainConfig {
  int epochs = 20;
  int warmup_epochs = 2;
  int batch_windows = 8;  // windows per optimizer step
  double base_lr = 3e-4;
  double min_lr = 5e-5;
  double weight_decay = 0.01;
  uint64_t seed = 0;

  void validate() const;
};

struct VqVaeEpochStats {
  double rgs = 0.0, vq = 0.0, pc = 0.0, total = 0.0;
  std::vector<double> perplexity;  // per group, from the epoch's assignments
};

struct VqVaeTrainStats {
  std::vector<VqVaeEpochStats> epochs;
};

// Reconstruction training over augmentation windows.  Logs one JSON line per
// epoch; throws std::runtime_error with a diagnostic if the loss diverges.
VqVaeTrainStats train_vqvae(VqVaeModel& model, const Recording& rec, const AugmentConfig& aug,
                            const VqVaeTrainConfig& cfg,
                            std::vector<std::string>* log_lines = nullptr);

}  // namespace bstrat
