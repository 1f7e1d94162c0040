#pragma once
// Fine-stage neural encoder for a selected channel group: per-sample channel
// mixing, a strided conv tokenizer emitting one embedding per stride step,
// and a temporal transformer.  Supports masked encoding (a shared learnable
// token replaces chosen patch embeddings before positions are added).

#include <cstdint>
#include <vector>

#include "bstrat/autodiff.hpp"
#include "bstrat/nn.hpp"
#include "bstrat/tensor.hpp"

namespace bstrat {

struct FineConfig {
  int channels = 0;  // selected group size C (required)
  int d = 256;
  int layers = 8;
  int heads = 8;
  int ffn = 1024;
  double dropout = 0.2;
  double window_s = 0.15;  // conceptual patch window
  double stride_s = 0.10;  // patch stride; must equal the conv stack's total stride
  double sample_rate_hz = 400.0;

  int window_samples() const;  // W_f
  int stride_samples() const;  // S_f; the conv strides {5,2,2,2} multiply to this
  void validate() const;
};

// Conceptual overlapping patch view [N_f, C, W_f] with the tail zero-padded
// past the signal end; N_f = floor(T / S_f).
Tensor make_fine_patches(const Tensor& window, const FineConfig& cfg);

class FineEncoder {
 public:
  FineConfig cfg;

  nn::Linear mix;  // C -> C, applied per time sample before the conv stack
  nn::Conv1d conv1, conv2, conv3, conv4;
  // Group normalization here uses per-position statistics (over channel
  // groups only), keeping every embedding a function of its own receptive
  // field; sequence-length changes then cannot perturb interior embeddings.
  nn::GroupNorm gn1, gn2, gn3, gn4;
  ad::Param mask_token;  // [1, d], the shared learnable replacement embedding
  nn::TransformerStack encoder;

  void init(const FineConfig& cfg, Rng& rng);
  ad::NamedParams named_params();

  int n_patches(int samples) const;  // floor(T / S_f)

  // window [C, T] -> patch embeddings [N_f, d].  The trailing T - N_f*S_f
  // samples are dropped (the conv paddings supply the zero tail).
  ad::Var tokenize(ad::Tape& t, const Tensor& window);

  // tokens [N_f, d] -> transformed embeddings [N_f, d].  If mask_positions is
  // given, those rows are replaced by the mask token before positions are
  // added.
  ad::Var encode(ad::Tape& t, ad::Var tokens, const std::vector<int>* mask_positions,
                 bool training, Rng* rng);

  // tokenize + encode in one step
  ad::Var forward(ad::Tape& t, const Tensor& window, const std::vector<int>* mask_positions,
                  bool training, Rng* rng);
};

}  // namespace bstrat
