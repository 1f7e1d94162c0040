#include "bstrat/augment.hpp"

#include <cmath>
#include <stdexcept>

#include "bstrat/rng.hpp"

namespace bstrat {

namespace {
// Stream tags so crops and shifts derived from the same experiment seed do
// not share random sequences with each other or with other subsystems.
constexpr uint64_t kCropStream = 0xc409;
constexpr uint64_t kShiftStream = 0x5417;
}  // namespace

void AugmentConfig::validate() const {
  if (!(segment_len_s > 0.0) || !(crop_len_s > 0.0))
    throw std::invalid_argument("AugmentConfig: segment and crop lengths must be positive");
  if (!(overlap_s >= 0.0) || !(overlap_s < segment_len_s))
    throw std::invalid_argument("AugmentConfig: overlap must be in [0, segment_len)");
  if (crop_jitter_s < 0.0 || crop_len_s + crop_jitter_s > segment_len_s + 1e-12)
    throw std::invalid_argument("AugmentConfig: crop_len + crop_jitter must fit in a segment");
  if (shift_max_s < 0.0) throw std::invalid_argument("AugmentConfig: shift_max must be >= 0");
}

PretrainWindows::PretrainWindows(const Recording& rec, const AugmentConfig& cfg)
    : rec_(&rec), seed_(cfg.seed) {
  cfg.validate();
  rec.validate();
  const double rate = rec.sample_rate_hz;
  segment_samples_ = static_cast<int>(std::llround(cfg.segment_len_s * rate));
  stride_samples_ = static_cast<int>(std::llround((cfg.segment_len_s - cfg.overlap_s) * rate));
  crop_samples_ = static_cast<int>(std::llround(cfg.crop_len_s * rate));
  if (stride_samples_ < 1 || crop_samples_ < 1)
    throw std::invalid_argument("PretrainWindows: segment stride/crop shorter than one sample");
  max_offset_ = static_cast<int>(std::llround(cfg.crop_jitter_s * rate));
  max_offset_ = std::min(max_offset_, segment_samples_ - crop_samples_);
  if (rec.samples < segment_samples_)
    throw std::invalid_argument("PretrainWindows: recording shorter than one segment");
  segments_ = (rec.samples - segment_samples_) / stride_samples_ + 1;
}

int PretrainWindows::offset_of(int segment, int epoch) const {
  if (segment < 0 || segment >= segments_)
    throw std::out_of_range("PretrainWindows: segment index out of range");
  Rng rng(mix_seed(seed_, kCropStream, static_cast<uint64_t>(segment),
                   static_cast<uint64_t>(epoch)));
  return static_cast<int>(rng.below(static_cast<uint64_t>(max_offset_) + 1));
}

Tensor PretrainWindows::fetch(int segment, int epoch) const {
  const int start = segment * stride_samples_ + offset_of(segment, epoch);
  Tensor w({rec_->channels, crop_samples_});
  for (int c = 0; c < rec_->channels; ++c)
    for (int t = 0; t < crop_samples_; ++t) w.at(c, t) = rec_->at(c, start + t);
  return w;
}

Tensor shift_trial(const Tensor& window, double sample_rate_hz, const AugmentConfig& cfg,
                   uint64_t seed) {
  cfg.validate();
  if (window.shape.size() != 2)
    throw std::invalid_argument("shift_trial: window must be [channels, samples]");
  if (!(sample_rate_hz > 0.0)) throw std::invalid_argument("shift_trial: bad sample rate");
  const int C = window.shape[0], T = window.shape[1];
  const int max_shift = static_cast<int>(std::llround(cfg.shift_max_s * sample_rate_hz));

  Rng rng(mix_seed(cfg.seed, kShiftStream, seed));
  const int magnitude = static_cast<int>(rng.below(static_cast<uint64_t>(max_shift) + 1));
  const int shift = rng.below(2) == 1 ? magnitude : -magnitude;  // >0 moves content right

  Tensor out({C, T});  // zero-initialized; vacated samples stay exactly zero
  for (int c = 0; c < C; ++c) {
    for (int t = 0; t < T; ++t) {
      const int src = t - shift;
      if (src >= 0 && src < T) out.at(c, t) = window.at(c, src);
    }
  }
  return out;
}

}  // namespace bstrat
