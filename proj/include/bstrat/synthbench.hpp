#pragma once
// Synthetic multichannel recordings with planted structure, standing in for
// real intracranial datasets.  Channels are partitioned into groups, each
// group driven by its own smooth low-dimensional latent through a fixed
// mixing matrix; exactly one "task" group has its latent replaced by a
// class-specific template during trial windows.  The generator ships the
// ground truth the pipeline is supposed to recover, plus scoring oracles.

#include <cstdint>
#include <string>
#include <vector>

#include "bstrat/recording.hpp"
#include "bstrat/tensor.hpp"

namespace bstrat {

struct SyntheticSpec {
  int channels = 40;
  int groups = 4;
  int latent_dim = 2;           // latent signals per group
  int classes = 4;
  int trials_per_class = 20;
  double trial_len_s = 4.0;
  double trial_gap_s = 1.0;     // background between consecutive trials
  double lead_in_s = 8.0;       // background before the first / after the last trial
  double snr_db = 0.0;          // per-channel SNR; +infinity means noiseless
  double sample_rate_hz = 400.0;
  uint64_t seed = 1;
  std::vector<int> membership;  // optional [channels]; empty = balanced contiguous blocks

  int trial_count() const { return classes * trials_per_class; }
  double duration_s() const {
    return 2.0 * lead_in_s + trial_count() * (trial_len_s + trial_gap_s);
  }
  void validate() const;
};

struct SyntheticTruth {
  std::vector<int> group_of;                      // [C] planted partition
  int task_group = 0;                             // the class-conditioned group
  std::vector<int> trial_class;                   // [B]
  std::vector<int> trial_start;                   // [B] sample index of each window
  Tensor templates;                               // [classes, latent_dim, W]
  std::vector<std::vector<int>> class_syllables;  // [classes] sequences over the 49-token vocab
  Tensor latents;                                 // [groups, latent_dim, T], after trial injection
  Tensor mixing;                                  // [C, latent_dim] mixing row of each channel
};

struct SyntheticData {
  Recording recording;  // [C, T] mixed latents plus SNR-calibrated noise
  TrialBatch trials;    // [B, C, W] windows cut from `recording` at the planted starts
  SyntheticTruth truth;
};

SyntheticData generate(const SyntheticSpec& spec);

// Adjusted Rand index between two partitions given as per-item labels
// (label values are arbitrary; only the induced partitions matter).
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

// One-vs-rest ridge-regression probe: deterministic shuffled train/test
// split, closed-form fit on the train half, returns test accuracy.
// features is [n, d], labels in [0, classes).
double linear_probe_accuracy(const Tensor& features, const std::vector<int>& labels, int classes,
                             double train_frac, double ridge, uint64_t seed);

}  // namespace bstrat
