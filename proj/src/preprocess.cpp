#include "bstrat/preprocess.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace bstrat {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Modified Bessel function of the first kind, order zero (series expansion,
// converges quickly for the argument range a Kaiser window uses).
double bessel_i0(double x) {
  const double half = x / 2.0;
  double term = 1.0, sum = 1.0;
  for (int k = 1; k < 64; ++k) {
    term *= (half / k) * (half / k);
    sum += term;
    if (term < 1e-18 * sum) break;
  }
  return sum;
}

double sinc(double u) {
  if (u == 0.0) return 1.0;
  const double pu = kPi * u;
  return std::sin(pu) / pu;
}

// Single-pass IIR (direct form II transposed) with explicit initial state.
void lfilter(const Biquad& s, const std::vector<double>& x, std::vector<double>& y, double z1,
             double z2) {
  y.resize(x.size());
  for (size_t n = 0; n < x.size(); ++n) {
    const double xn = x[n];
    const double yn = s.b0 * xn + z1;
    z1 = s.b1 * xn - s.a1 * yn + z2;
    z2 = s.b2 * xn - s.a2 * yn;
    y[n] = yn;
  }
}

}  // namespace

void PreprocessConfig::validate() const {
  if (!(band_low_hz > 0.0) || !(band_low_hz < band_high_hz))
    throw std::invalid_argument("PreprocessConfig: need 0 < band_low < band_high");
  if (band_high_hz > target_rate_hz / 2.0)
    throw std::invalid_argument("PreprocessConfig: band_high above target Nyquist");
  if (notch_hz != 50.0 && notch_hz != 60.0)
    throw std::invalid_argument("PreprocessConfig: notch must be 50 or 60 Hz");
  if (reference != "none" && reference != "bipolar" && reference != "laplacian")
    throw std::invalid_argument("PreprocessConfig: unknown reference scheme");
}

Biquad design_lowpass(double fc_hz, double fs_hz) {
  const double w0 = 2.0 * kPi * fc_hz / fs_hz;
  const double alpha = std::sin(w0) / (2.0 * (1.0 / std::sqrt(2.0)));
  const double c = std::cos(w0), a0 = 1.0 + alpha;
  Biquad s;
  s.b0 = (1.0 - c) / 2.0 / a0;
  s.b1 = (1.0 - c) / a0;
  s.b2 = s.b0;
  s.a1 = -2.0 * c / a0;
  s.a2 = (1.0 - alpha) / a0;
  return s;
}

Biquad design_highpass(double fc_hz, double fs_hz) {
  const double w0 = 2.0 * kPi * fc_hz / fs_hz;
  const double alpha = std::sin(w0) / (2.0 * (1.0 / std::sqrt(2.0)));
  const double c = std::cos(w0), a0 = 1.0 + alpha;
  Biquad s;
  s.b0 = (1.0 + c) / 2.0 / a0;
  s.b1 = -(1.0 + c) / a0;
  s.b2 = s.b0;
  s.a1 = -2.0 * c / a0;
  s.a2 = (1.0 - alpha) / a0;
  return s;
}

Biquad design_notch(double f0_hz, double fs_hz, double q) {
  const double w0 = 2.0 * kPi * f0_hz / fs_hz;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double c = std::cos(w0), a0 = 1.0 + alpha;
  Biquad s;
  s.b0 = 1.0 / a0;
  s.b1 = -2.0 * c / a0;
  s.b2 = 1.0 / a0;
  s.a1 = -2.0 * c / a0;
  s.a2 = (1.0 - alpha) / a0;
  return s;
}

std::vector<double> filtfilt(const Biquad& s, const std::vector<double>& x) {
  const int T = static_cast<int>(x.size());
  if (T < 2) return x;
  // Pad long enough for edge transients to die inside the (discarded)
  // padding.  One settle length S satisfies |p|^S < 1e-6 with |p| = sqrt(a2)
  // for a complex pole pair; the backward pass additionally has to ride out
  // the forward pass's own settling ramp inside the pad, so use 3S.
  //
  // Edge transients are proportional to the signal's end values and decay at
  // the slowest pole's rate, so a section whose settle length exceeds the
  // signal (e.g. a 0.5 Hz highpass on a window of a few seconds) cannot be
  // edge-clean no matter how the pad is built.  Filter continuous recordings
  // and cut windows afterwards rather than filtering short epochs.
  int padlen = T - 1;
  const double pole_radius = std::sqrt(std::fabs(s.a2));
  if (pole_radius < 0.999999) {
    const double settle = std::log(1e-6) / std::log(pole_radius);
    padlen = std::min(T - 1, std::max(9, static_cast<int>(std::ceil(3.0 * settle))));
  }

  // Odd reflection about the end values keeps value and slope continuous.
  std::vector<double> ext;
  ext.reserve(x.size() + 2 * static_cast<size_t>(padlen));
  for (int i = padlen; i >= 1; --i) ext.push_back(2.0 * x[0] - x[static_cast<size_t>(i)]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (int i = 1; i <= padlen; ++i)
    ext.push_back(2.0 * x[static_cast<size_t>(T - 1)] - x[static_cast<size_t>(T - 1 - i)]);

  // Steady-state initial conditions: if the input were the constant x0, the
  // output would be H*x0 from the first sample on.
  const double H = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  auto zi1 = [&](double x0) { return (H - s.b0) * x0; };
  auto zi2 = [&](double x0) { return (s.b2 - s.a2 * H) * x0; };

  std::vector<double> fwd;
  lfilter(s, ext, fwd, zi1(ext.front()), zi2(ext.front()));
  std::reverse(fwd.begin(), fwd.end());
  std::vector<double> bwd;
  lfilter(s, fwd, bwd, zi1(fwd.front()), zi2(fwd.front()));
  std::reverse(bwd.begin(), bwd.end());

  return std::vector<double>(bwd.begin() + padlen, bwd.begin() + padlen + T);
}

Recording bandpass_notch(const Recording& rec, const PreprocessConfig& cfg) {
  cfg.validate();
  rec.validate();
  if (!(rec.sample_rate_hz > 2.0 * cfg.band_high_hz))
    throw std::invalid_argument("bandpass_notch: sample rate too low for the requested band");

  const Biquad hp = design_highpass(cfg.band_low_hz, rec.sample_rate_hz);
  const Biquad lp = design_lowpass(cfg.band_high_hz, rec.sample_rate_hz);
  const Biquad nt = design_notch(cfg.notch_hz, rec.sample_rate_hz, 30.0);

  Recording out = rec;
  for (int c = 0; c < rec.channels; ++c) {
    std::vector<double> ch(rec.channel(c), rec.channel(c) + rec.samples);
    ch = filtfilt(hp, ch);
    ch = filtfilt(lp, ch);
    ch = filtfilt(nt, ch);
    std::copy(ch.begin(), ch.end(), out.signal.begin() + static_cast<size_t>(c) * rec.samples);
  }
  return out;
}

Recording resample(const Recording& rec, double target_rate_hz) {
  rec.validate();
  if (target_rate_hz <= 0.0) throw std::invalid_argument("resample: bad target rate");
  if (target_rate_hz > rec.sample_rate_hz)
    throw std::invalid_argument("resample: upsampling is not supported");
  if (target_rate_hz == rec.sample_rate_hz) return rec;

  const double ratio = rec.sample_rate_hz / target_rate_hz;  // > 1
  const int T = rec.samples;
  const int T_out = static_cast<int>(std::llround(static_cast<double>(T) * target_rate_hz /
                                                  rec.sample_rate_hz));
  constexpr int kHalfWidth = 32;   // sinc zero crossings at the target rate
  constexpr double kBeta = 8.6;    // Kaiser shape
  const double i0b = bessel_i0(kBeta);
  const double support = kHalfWidth * ratio;  // in input samples

  Recording out = rec;
  out.sample_rate_hz = target_rate_hz;
  out.samples = T_out;
  out.signal.assign(static_cast<size_t>(rec.channels) * T_out, 0.0);

  for (int c = 0; c < rec.channels; ++c) {
    const double* x = rec.channel(c);
    for (int n = 0; n < T_out; ++n) {
      const double pos = n * ratio;
      const int lo = std::max(0, static_cast<int>(std::ceil(pos - support)));
      const int hi = std::min(T - 1, static_cast<int>(std::floor(pos + support)));
      double acc = 0.0, wsum = 0.0;
      for (int m = lo; m <= hi; ++m) {
        const double u = (m - pos) / ratio;  // cutoff at the target Nyquist
        const double t = u / kHalfWidth;     // in [-1, 1]
        const double win = bessel_i0(kBeta * std::sqrt(std::max(0.0, 1.0 - t * t))) / i0b;
        const double w = sinc(u) * win;
        acc += w * x[m];
        wsum += w;
      }
      // Normalizing per output sample keeps the DC gain exactly 1 even where
      // the kernel is truncated at the edges.
      out.signal[static_cast<size_t>(c) * T_out + n] = acc / wsum;
    }
  }
  return out;
}

ShaftMap infer_shafts(const std::vector<std::string>& channel_ids) {
  ShaftMap shafts;
  std::vector<std::string> prefixes;
  for (size_t i = 0; i < channel_ids.size(); ++i) {
    const std::string& id = channel_ids[i];
    size_t p = 0;
    while (p < id.size() && !std::isdigit(static_cast<unsigned char>(id[p]))) ++p;
    const std::string prefix = id.substr(0, p);
    size_t slot = prefixes.size();
    for (size_t j = 0; j < prefixes.size(); ++j)
      if (prefixes[j] == prefix) {
        slot = j;
        break;
      }
    if (slot == prefixes.size()) {
      prefixes.push_back(prefix);
      shafts.emplace_back();
    }
    shafts[slot].push_back(static_cast<int>(i));
  }
  return shafts;
}

Recording rereference(const Recording& rec, const std::string& scheme, const ShaftMap& shafts) {
  rec.validate();
  if (scheme == "none" || scheme == "raw") {
    Recording out = rec;
    out.reference_scheme = "raw";
    return out;
  }

  // every input channel must belong to exactly one shaft
  {
    std::vector<int> seen(static_cast<size_t>(rec.channels), 0);
    for (const auto& shaft : shafts)
      for (int idx : shaft) {
        if (idx < 0 || idx >= rec.channels)
          throw std::invalid_argument("rereference: shaft index out of range");
        ++seen[static_cast<size_t>(idx)];
      }
    for (int c = 0; c < rec.channels; ++c)
      if (seen[static_cast<size_t>(c)] != 1)
        throw std::invalid_argument("rereference: shaft map must cover each channel exactly once");
  }

  Recording out;
  out.sample_rate_hz = rec.sample_rate_hz;
  out.samples = rec.samples;
  out.reference_scheme = scheme;

  if (scheme == "bipolar") {
    for (const auto& shaft : shafts)
      if (shaft.size() < 2)
        throw std::invalid_argument("rereference: bipolar needs >= 2 contacts per shaft");
    for (const auto& shaft : shafts) {
      for (size_t k = 0; k + 1 < shaft.size(); ++k) {
        const int lo_ch = shaft[k], hi_ch = shaft[k + 1];
        out.channel_ids.push_back(rec.channel_ids[static_cast<size_t>(hi_ch)] + "-" +
                                  rec.channel_ids[static_cast<size_t>(lo_ch)]);
        if (!rec.coords.empty()) {
          const auto &a = rec.coords[static_cast<size_t>(lo_ch)],
                     &b = rec.coords[static_cast<size_t>(hi_ch)];
          out.coords.push_back({(a[0] + b[0]) / 2, (a[1] + b[1]) / 2, (a[2] + b[2]) / 2});
        }
        for (int t = 0; t < rec.samples; ++t)
          out.signal.push_back(rec.at(hi_ch, t) - rec.at(lo_ch, t));
      }
    }
    out.channels = static_cast<int>(out.channel_ids.size());
    out.validate();
    return out;
  }

  if (scheme == "laplacian") {
    out.channel_ids = rec.channel_ids;
    out.coords = rec.coords;
    out.channels = rec.channels;
    out.signal.assign(rec.signal.size(), 0.0);
    for (const auto& shaft : shafts) {
      const int n = static_cast<int>(shaft.size());
      for (int k = 0; k < n; ++k) {
        const int ch = shaft[static_cast<size_t>(k)];
        std::vector<int> nbrs;
        if (k > 0) nbrs.push_back(shaft[static_cast<size_t>(k - 1)]);
        if (k + 1 < n) nbrs.push_back(shaft[static_cast<size_t>(k + 1)]);
        for (int t = 0; t < rec.samples; ++t) {
          double m = 0.0;
          for (int nb : nbrs) m += rec.at(nb, t);
          if (!nbrs.empty()) m /= static_cast<double>(nbrs.size());
          // isolated contact: nothing to subtract, passes through
          out.signal[static_cast<size_t>(ch) * rec.samples + t] = rec.at(ch, t) - m;
        }
      }
    }
    out.validate();
    return out;
  }

  throw std::invalid_argument("rereference: unknown scheme '" + scheme + "'");
}

Recording zscore(const Recording& rec, std::vector<int>* flat_channels) {
  rec.validate();
  if (rec.samples < 2) throw std::invalid_argument("zscore: need at least 2 samples");
  Recording out = rec;
  for (int c = 0; c < rec.channels; ++c) {
    const double* x = rec.channel(c);
    double mean = 0.0;
    for (int t = 0; t < rec.samples; ++t) mean += x[t];
    mean /= rec.samples;
    double var = 0.0;
    for (int t = 0; t < rec.samples; ++t) var += (x[t] - mean) * (x[t] - mean);
    var /= rec.samples;  // population variance
    const double sd = std::sqrt(var);
    double* y = out.signal.data() + static_cast<size_t>(c) * rec.samples;
    if (sd < 1e-8) {
      std::fill(y, y + rec.samples, 0.0);
      if (flat_channels) flat_channels->push_back(c);
    } else {
      for (int t = 0; t < rec.samples; ++t) y[t] = (x[t] - mean) / sd;
    }
  }
  return out;
}

Recording preprocess(const Recording& rec, const PreprocessConfig& cfg) {
  cfg.validate();
  Recording r = bandpass_notch(rec, cfg);
  r = resample(r, cfg.target_rate_hz);
  if (cfg.reference != "none") r = rereference(r, cfg.reference, infer_shafts(r.channel_ids));
  if (cfg.zscore) r = zscore(r);
  return r;
}

}  // namespace bstrat
