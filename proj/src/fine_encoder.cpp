#include "bstrat/fine_encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace bstrat {

using ad::Tape;
using ad::Var;

namespace {

int gn_groups(int channels) {
  if (channels % 32 == 0) return 32;
  if (channels % 4 == 0) return channels / 4;
  return 1;
}

// Per-position group normalization: x [1, C, L] is viewed as L independent
// single-sample columns so statistics never cross time steps.
Var per_position_gn(Tape& t, nn::GroupNorm& gn, Var x) {
  const int C = x.val().dim(1), L = x.val().dim(2);
  Var cols = ad::reshape(ad::transpose_last2(x), {L, C, 1});
  Var normed = gn.forward(t, cols);
  return ad::transpose_last2(ad::reshape(normed, {1, L, C}));
}

}  // namespace

int FineConfig::window_samples() const {
  return static_cast<int>(std::llround(window_s * sample_rate_hz));
}

int FineConfig::stride_samples() const {
  return static_cast<int>(std::llround(stride_s * sample_rate_hz));
}

void FineConfig::validate() const {
  if (channels < 1) throw std::invalid_argument("FineConfig: channels must be positive");
  if (d < 1 || layers < 0 || heads < 1 || ffn < 1 || d % heads != 0)
    throw std::invalid_argument("FineConfig: bad transformer dimensions");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("FineConfig: bad dropout");
  if (!(sample_rate_hz > 0.0) || !(window_s > 0.0) || !(stride_s > 0.0))
    throw std::invalid_argument("FineConfig: bad timing values");
  if (stride_samples() != 5 * 2 * 2 * 2)
    throw std::invalid_argument(
        "FineConfig: the conv stack downsamples by 40, so stride_s * sample_rate_hz must be 40");
  if (window_samples() < stride_samples())
    throw std::invalid_argument("FineConfig: patch window shorter than the stride");
}

Tensor make_fine_patches(const Tensor& window, const FineConfig& cfg) {
  cfg.validate();
  if (window.ndim() != 2 || window.dim(0) != cfg.channels)
    throw std::invalid_argument("make_fine_patches: window must be [C, T] with configured C");
  const int T = window.dim(1), W = cfg.window_samples(), S = cfg.stride_samples();
  const int N = T / S;
  if (N < 1) throw std::invalid_argument("make_fine_patches: window shorter than one stride");
  Tensor patches({N, cfg.channels, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < cfg.channels; ++c)
      for (int s = 0; s < W; ++s) {
        const int tpos = n * S + s;
        patches.at(n, c, s) = tpos < T ? window.at(c, tpos) : 0.0;
      }
  return patches;
}

void FineEncoder::init(const FineConfig& cfg_, Rng& rng) {
  cfg = cfg_;
  cfg.validate();
  const int C = cfg.channels, d = cfg.d;
  mix.init(C, C, rng);
  conv1.init(C, d, 9, 5, 4, rng);
  conv2.init(d, d, 3, 2, 1, rng);
  conv3.init(d, d, 3, 2, 1, rng);
  conv4.init(d, d, 3, 2, 1, rng);
  gn1.init(d, gn_groups(d));
  gn2.init(d, gn_groups(d));
  gn3.init(d, gn_groups(d));
  gn4.init(d, gn_groups(d));
  mask_token = ad::Param(Tensor({1, d}));
  nn::init_normal(mask_token, 0.02, rng);
  encoder.init(cfg.layers, d, cfg.heads, cfg.ffn, cfg.dropout, cfg.dropout, rng);
}

ad::NamedParams FineEncoder::named_params() {
  ad::NamedParams out;
  mix.collect("mix", out);
  conv1.collect("conv1", out);
  gn1.collect("gn1", out);
  conv2.collect("conv2", out);
  gn2.collect("gn2", out);
  conv3.collect("conv3", out);
  gn3.collect("gn3", out);
  conv4.collect("conv4", out);
  gn4.collect("gn4", out);
  out.emplace_back("mask_token", &mask_token);
  encoder.collect("encoder", out);
  return out;
}

int FineEncoder::n_patches(int samples) const { return samples / cfg.stride_samples(); }

Var FineEncoder::tokenize(Tape& t, const Tensor& window) {
  if (window.ndim() != 2 || window.dim(0) != cfg.channels)
    throw std::invalid_argument("FineEncoder::tokenize: window must be [C, T] with configured C");
  const int C = cfg.channels, S = cfg.stride_samples();
  const int N = window.dim(1) / S;
  if (N < 1) throw std::invalid_argument("FineEncoder::tokenize: window shorter than one stride");
  const int L = N * S;

  // build [L, C] directly (time-major) for the per-sample channel mixer
  Tensor x_t({L, C});
  for (int s = 0; s < L; ++s)
    for (int c = 0; c < C; ++c) x_t.at(s, c) = window.at(c, s);
  Var x = mix.forward(t, ad::constant(t, std::move(x_t)));       // [L, C]
  x = ad::transpose_last2(ad::reshape(x, {1, L, C}));            // [1, C, L]

  x = ad::gelu(per_position_gn(t, gn1, conv1.forward(t, x)));
  x = ad::gelu(per_position_gn(t, gn2, conv2.forward(t, x)));
  x = ad::gelu(per_position_gn(t, gn3, conv3.forward(t, x)));
  x = ad::gelu(per_position_gn(t, gn4, conv4.forward(t, x)));    // [1, d, N]
  return ad::reshape(ad::transpose_last2(x), {N, cfg.d});
}

Var FineEncoder::encode(Tape& t, Var tokens, const std::vector<int>* mask_positions, bool training,
                        Rng* rng) {
  const int N = tokens.val().dim(0);
  Var x = tokens;
  if (mask_positions != nullptr && !mask_positions->empty()) {
    for (int i : *mask_positions)
      if (i < 0 || i >= N)
        throw std::invalid_argument("FineEncoder::encode: mask position out of range");
    x = ad::mask_replace_rows(x, ad::param(t, mask_token), *mask_positions);
  }
  x = ad::add(x, ad::constant(t, nn::sinusoidal_positions(N, cfg.d)));
  x = ad::reshape(x, {1, N, cfg.d});
  x = encoder.forward(t, x, training, rng, nullptr);
  return ad::reshape(x, {N, cfg.d});
}

Var FineEncoder::forward(Tape& t, const Tensor& window, const std::vector<int>* mask_positions,
                         bool training, Rng* rng) {
  return encode(t, tokenize(t, window), mask_positions, training, rng);
}

}  // namespace bstrat
