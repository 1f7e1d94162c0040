#pragma once
// Signal conditioning applied to every recording before any model sees it.
// The chain order is fixed: band-pass + notch -> resample -> re-reference ->
// per-channel z-score.  All steps are pure functions of their inputs.

#include <string>
#include <vector>

#include "bstrat/recording.hpp"

namespace bstrat {

struct PreprocessConfig {
  double band_low_hz = 0.5;
  double band_high_hz = 200.0;
  double notch_hz = 50.0;  // mains frequency, 50 or 60
  double target_rate_hz = 400.0;
  std::string reference = "none";  // none | bipolar | laplacian
  bool zscore = true;

  void validate() const;  // 0 < low < high <= target/2, notch in {50, 60}
};

// One second-order section, a0 normalized to 1:
//   y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
};

// RBJ-cookbook designs (Q = 1/sqrt(2) gives the 2nd-order Butterworth shape).
Biquad design_lowpass(double fc_hz, double fs_hz);
Biquad design_highpass(double fc_hz, double fs_hz);
Biquad design_notch(double f0_hz, double fs_hz, double q);

// Zero-phase (forward-backward) filtering with odd-reflection edge padding and
// steady-state initial conditions, so constants map to their DC gain exactly.
std::vector<double> filtfilt(const Biquad& s, const std::vector<double>& x);

// Steps.  Each returns a new Recording with metadata carried over.
Recording bandpass_notch(const Recording& rec, const PreprocessConfig& cfg);
Recording resample(const Recording& rec, double target_rate_hz);

// Channels grouped into ordered electrode shafts (indices into rec.channels).
using ShaftMap = std::vector<std::vector<int>>;

// Shafts inferred from channel ids: the leading alphabetic prefix names the
// shaft ("A1", "A2", "B1" -> shafts A, B), appearance order preserved.
ShaftMap infer_shafts(const std::vector<std::string>& channel_ids);

// scheme: none/raw (pass through), bipolar (adjacent within-shaft differences,
// C_out = C - #shafts), laplacian (contact minus mean of its shaft neighbors).
Recording rereference(const Recording& rec, const std::string& scheme, const ShaftMap& shafts);

// Per-channel (x - mean) / population std.  Channels with std < 1e-8 become
// zeros; their indices are appended to *flat_channels when provided.
Recording zscore(const Recording& rec, std::vector<int>* flat_channels = nullptr);

// The full fixed-order chain.
Recording preprocess(const Recording& rec, const PreprocessConfig& cfg);

}  // namespace bstrat
