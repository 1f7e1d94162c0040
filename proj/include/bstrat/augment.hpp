#pragma once
// Data augmentation.
//
// Pretraining: a continuous recording is divided into fixed-length
// overlapping segments; every fetch returns a shorter crop whose offset
// inside the segment is drawn uniformly at random, deterministically per
// (segment, epoch, seed).  Fine-tuning: trial windows are shifted left or
// right by a small random amount and zero-padded.

#include <cstdint>

#include "bstrat/recording.hpp"
#include "bstrat/tensor.hpp"

namespace bstrat {

struct AugmentConfig {
  // Pretraining crops (seconds).
  double segment_len_s = 8.0;
  double overlap_s = 4.0;      // consecutive segments share this much signal
  double crop_len_s = 4.0;     // model input length
  double crop_jitter_s = 4.0;  // crop offset drawn uniformly from [0, this]
  // Downstream trial shifts (seconds).
  double shift_max_s = 0.2;
  uint64_t seed = 0;

  void validate() const;
};

// A deterministic stream of augmented pretraining windows over one recording.
// Holds a pointer to the recording; the recording must outlive the stream.
class PretrainWindows {
 public:
  PretrainWindows(const Recording& rec, const AugmentConfig& cfg);

  int segments() const { return segments_; }
  int crop_samples() const { return crop_samples_; }
  int segment_samples() const { return segment_samples_; }
  int stride_samples() const { return stride_samples_; }

  // Crop offset inside the segment for this (segment, epoch).
  int offset_of(int segment, int epoch) const;
  // The [channels, crop_samples] window for this (segment, epoch).
  Tensor fetch(int segment, int epoch) const;

 private:
  const Recording* rec_;
  uint64_t seed_;
  int segments_ = 0;
  int segment_samples_ = 0;
  int stride_samples_ = 0;
  int crop_samples_ = 0;
  int max_offset_ = 0;
};

// Shifts a [channels, T] trial window left or right (both the direction and
// the magnitude up to shift_max_s * rate are random per seed), filling the
// vacated samples with zeros.  Length is preserved.
Tensor shift_trial(const Tensor& window, double sample_rate_hz, const AugmentConfig& cfg,
                   uint64_t seed);

}  // namespace bstrat
