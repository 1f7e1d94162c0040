#pragma once
// Recording storage and dataset splits.
//
// On-disk layout: a UTF-8 JSON manifest at <stem>.json describing channel ids,
// sample rate, reference scheme, shape and dtype ("f32le"), adjacent to a raw
// little-endian float32 blob at <stem>.f32 holding the channel-major samples.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bstrat/tensor.hpp"

namespace bstrat {

struct Recording {
  std::vector<std::string> channel_ids;
  double sample_rate_hz = 0.0;
  std::string reference_scheme = "raw";  // raw | bipolar | laplacian
  int channels = 0;
  int samples = 0;
  std::vector<double> signal;  // [channels * samples], channel-major
  std::vector<std::array<double, 3>> coords;  // optional, empty or size == channels

  double& at(int c, int t) { return signal[static_cast<size_t>(c) * samples + t]; }
  double at(int c, int t) const { return signal[static_cast<size_t>(c) * samples + t]; }
  const double* channel(int c) const { return signal.data() + static_cast<size_t>(c) * samples; }

  void validate() const;  // shape/id consistency
};

// stem (no extension) -> stem.json + stem.f32
void write_recording(const std::string& stem, const Recording& rec);
Recording read_recording(const std::string& stem);

// A set of fixed-length trial windows cut from a recording.
struct TrialBatch {
  Tensor windows;  // [B, C, T]
  std::vector<int> labels;
  std::vector<std::string> label_space;
  std::vector<std::vector<int>> syllables;  // per-trial token ids (may be empty)
  std::vector<std::string> channel_ids;
  double sample_rate_hz = 0.0;

  int size() const { return windows.ndim() == 3 ? windows.dim(0) : 0; }
  void validate() const;
};

void write_trials(const std::string& stem, const TrialBatch& trials);
TrialBatch read_trials(const std::string& stem);

struct DatasetSplit {
  std::vector<int> train, val, test;
};

// Deterministic shuffled split: floor(n*train) train, floor(n*val) val,
// remainder test.  Ratios must sum to 1 (±1e-9); requires n >= 10.
DatasetSplit split_trials(int n, double train_ratio, double val_ratio, double test_ratio,
                          uint64_t seed);

}  // namespace bstrat
