#include "bstrat/synthbench.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <stdexcept>
#include <utility>

#include "bstrat/rng.hpp"

namespace bstrat {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Random-Fourier smooth signal: a sum of cosines with frequencies drawn from
// the 0.5-12 Hz band and 1/f amplitudes, demeaned and scaled to unit RMS.
// Band-limited well inside the 0.5-200 Hz passband, so preprocessing leaves
// the planted structure intact.
std::vector<double> smooth_signal(int T, double rate, Rng& rng) {
  constexpr int kComponents = 24;
  std::vector<double> x(static_cast<size_t>(T), 0.0);
  for (int m = 0; m < kComponents; ++m) {
    const double f = rng.uniform(0.5, 12.0);
    const double amp = 1.0 / f;
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    const double w = 2.0 * kPi * f / rate;
    for (int t = 0; t < T; ++t) x[static_cast<size_t>(t)] += amp * std::cos(w * t + phase);
  }
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= T;
  double ms = 0.0;
  for (auto& v : x) {
    v -= mean;
    ms += v * v;
  }
  const double rms = std::sqrt(ms / T);
  if (rms > 0.0)
    for (auto& v : x) v /= rms;
  return x;
}

double correlation(const double* a, const double* b, int n) {
  double ma = 0.0, mb = 0.0;
  for (int i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (int i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

long long pairs(long long n) { return n * (n - 1) / 2; }

// Fixed class -> token-sequence table over the 49-token vocabulary
// (0 = blank, 1 = silence, 2..24 = 23 onsets, 25..48 = 24 rimes).  Each class
// gets a distinct short sequence of onset+rime pairs framed by silence,
// mimicking a word -> syllable-string mapping.  Blank never appears.
std::vector<int> syllables_for_class(int cls) {
  std::vector<int> seq;
  seq.push_back(1);
  const int n_syllables = 2 + (cls % 2);
  for (int j = 0; j < n_syllables; ++j) {
    seq.push_back(2 + (5 * cls + 3 * j) % 23);
    seq.push_back(25 + (7 * cls + 11 * j) % 24);
  }
  seq.push_back(1);
  return seq;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (channels < 2) throw std::invalid_argument("SyntheticSpec: need at least 2 channels");
  if (groups < 1 || groups > channels)
    throw std::invalid_argument("SyntheticSpec: groups must be in [1, channels]");
  if (latent_dim < 1) throw std::invalid_argument("SyntheticSpec: latent_dim must be positive");
  if (classes < 2) throw std::invalid_argument("SyntheticSpec: need at least 2 classes");
  if (trials_per_class < 1)
    throw std::invalid_argument("SyntheticSpec: trials_per_class must be positive");
  if (!(trial_len_s > 0.0) || trial_gap_s < 0.0 || lead_in_s < 0.0)
    throw std::invalid_argument("SyntheticSpec: bad trial timing");
  if (!(sample_rate_hz > 0.0)) throw std::invalid_argument("SyntheticSpec: bad sample rate");
  if (!(snr_db == snr_db)) throw std::invalid_argument("SyntheticSpec: snr_db is NaN");
  if (!membership.empty()) {
    if (static_cast<int>(membership.size()) != channels)
      throw std::invalid_argument("SyntheticSpec: membership size != channels");
    std::vector<int> count(static_cast<size_t>(groups), 0);
    for (int g : membership) {
      if (g < 0 || g >= groups)
        throw std::invalid_argument("SyntheticSpec: membership value out of range");
      ++count[static_cast<size_t>(g)];
    }
    for (int n : count)
      if (n == 0) throw std::invalid_argument("SyntheticSpec: a group has no channels");
  }
}

SyntheticData generate(const SyntheticSpec& spec) {
  spec.validate();
  const double rate = spec.sample_rate_hz;
  const int C = spec.channels;
  const int G = spec.groups;
  const int D = spec.latent_dim;
  const int B = spec.trial_count();
  const int W = static_cast<int>(std::llround(spec.trial_len_s * rate));
  const int gap = static_cast<int>(std::llround(spec.trial_gap_s * rate));
  const int lead = static_cast<int>(std::llround(spec.lead_in_s * rate));
  const int T = 2 * lead + B * (W + gap);

  SyntheticData out;
  SyntheticTruth& truth = out.truth;

  // Planted partition: explicit map, or balanced contiguous blocks.
  truth.group_of.resize(static_cast<size_t>(C));
  if (!spec.membership.empty()) {
    truth.group_of = spec.membership;
  } else {
    for (int c = 0; c < C; ++c) truth.group_of[static_cast<size_t>(c)] = (c * G) / C;
  }
  truth.task_group = 0;

  // Background latents, one smooth signal per (group, latent dim).
  Rng latent_rng(mix_seed(spec.seed, 0x1a7e));
  truth.latents = Tensor({G, D, T});
  for (int g = 0; g < G; ++g)
    for (int d = 0; d < D; ++d) {
      std::vector<double> s = smooth_signal(T, rate, latent_rng);
      for (int t = 0; t < T; ++t) truth.latents.at(g, d, t) = s[static_cast<size_t>(t)];
    }

  // Class templates: smooth, unit RMS, redrawn until pairwise correlations of
  // the flattened templates stay below 0.5 (they nearly always do).
  Rng template_rng(mix_seed(spec.seed, 0x7e3b));
  truth.templates = Tensor({spec.classes, D, W});
  for (int attempt = 0; attempt < 64; ++attempt) {
    for (int y = 0; y < spec.classes; ++y)
      for (int d = 0; d < D; ++d) {
        std::vector<double> s = smooth_signal(W, rate, template_rng);
        for (int t = 0; t < W; ++t) truth.templates.at(y, d, t) = s[static_cast<size_t>(t)];
      }
    bool ok = true;
    for (int y = 0; y < spec.classes && ok; ++y)
      for (int z = y + 1; z < spec.classes && ok; ++z)
        if (std::fabs(correlation(&truth.templates.at(y, 0, 0), &truth.templates.at(z, 0, 0),
                                  D * W)) >= 0.5)
          ok = false;
    if (ok) break;
    if (attempt == 63)
      throw std::runtime_error("generate: could not draw sufficiently distinct class templates");
  }

  // Balanced class sequence in shuffled order; deterministic trial grid.
  truth.trial_class.resize(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) truth.trial_class[static_cast<size_t>(b)] = b % spec.classes;
  Rng order_rng(mix_seed(spec.seed, 0x0d3a));
  order_rng.shuffle(truth.trial_class);
  truth.trial_start.resize(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) truth.trial_start[static_cast<size_t>(b)] = lead + b * (W + gap);

  // Inject the class templates into the task group's latent.
  for (int b = 0; b < B; ++b) {
    const int y = truth.trial_class[static_cast<size_t>(b)];
    const int s0 = truth.trial_start[static_cast<size_t>(b)];
    for (int d = 0; d < D; ++d)
      for (int t = 0; t < W; ++t)
        truth.latents.at(truth.task_group, d, s0 + t) = truth.templates.at(y, d, t);
  }

  // Mixing rows: a dominant weight on the first latent plus smaller weights
  // on the rest, so channels of a group stay strongly correlated while the
  // extra latent dimensions still reach the observations.
  Rng mix_rng(mix_seed(spec.seed, 0x3145));
  truth.mixing = Tensor({C, D});
  const double secondary_scale = D > 1 ? 0.35 / std::sqrt(static_cast<double>(D - 1)) : 0.0;
  for (int c = 0; c < C; ++c) {
    // draw sign and magnitude as separate statements: the evaluation order of
    // rng calls inside one expression is unspecified
    const double primary_sign = mix_rng.below(2) == 1 ? 1.0 : -1.0;
    const double primary = primary_sign * mix_rng.uniform(0.5, 1.5);
    truth.mixing.at(c, 0) = primary;
    for (int d = 1; d < D; ++d) {
      const double sign = mix_rng.below(2) == 1 ? 1.0 : -1.0;
      truth.mixing.at(c, d) = primary * secondary_scale * sign * mix_rng.uniform(0.5, 1.0);
    }
  }

  // Mix, then add per-channel noise calibrated to the requested SNR.
  Recording& rec = out.recording;
  rec.channels = C;
  rec.samples = T;
  rec.sample_rate_hz = rate;
  rec.reference_scheme = "raw";
  rec.signal.assign(static_cast<size_t>(C) * T, 0.0);
  std::vector<int> index_in_group(static_cast<size_t>(G), 0);
  for (int c = 0; c < C; ++c) {
    const int g = truth.group_of[static_cast<size_t>(c)];
    rec.channel_ids.push_back("G" + std::to_string(g + 1) + "C" +
                              std::to_string(++index_in_group[static_cast<size_t>(g)]));
    for (int t = 0; t < T; ++t) {
      double v = 0.0;
      for (int d = 0; d < D; ++d) v += truth.mixing.at(c, d) * truth.latents.at(g, d, t);
      rec.at(c, t) = v;
    }
  }
  const double noise_over_signal = std::pow(10.0, -spec.snr_db / 20.0);
  if (noise_over_signal > 0.0) {
    Rng noise_rng(mix_seed(spec.seed, 0x90153));
    for (int c = 0; c < C; ++c) {
      double ms = 0.0;
      for (int t = 0; t < T; ++t) ms += rec.at(c, t) * rec.at(c, t);
      const double sigma = std::sqrt(ms / T) * noise_over_signal;
      for (int t = 0; t < T; ++t) rec.at(c, t) += sigma * noise_rng.normal();
    }
  }
  rec.validate();

  // Trial windows cut from the finished recording.
  TrialBatch& trials = out.trials;
  trials.windows = Tensor({B, C, W});
  trials.labels = truth.trial_class;
  for (int y = 0; y < spec.classes; ++y) {
    std::string name = "class_";
    name += static_cast<char>('0' + y / 10);
    name += static_cast<char>('0' + y % 10);
    trials.label_space.push_back(name);
    truth.class_syllables.push_back(syllables_for_class(y));
  }
  for (int b = 0; b < B; ++b) {
    trials.syllables.push_back(truth.class_syllables[static_cast<size_t>(
        truth.trial_class[static_cast<size_t>(b)])]);
    const int s0 = truth.trial_start[static_cast<size_t>(b)];
    for (int c = 0; c < C; ++c)
      for (int t = 0; t < W; ++t) trials.windows.at(b, c, t) = rec.at(c, s0 + t);
  }
  trials.channel_ids = rec.channel_ids;
  trials.sample_rate_hz = rate;
  trials.validate();
  return out;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("adjusted_rand_index: label vectors must match and be non-empty");
  const long long n = static_cast<long long>(a.size());
  std::map<int, long long> ca, cb;
  std::map<std::pair<int, int>, long long> joint;
  for (size_t i = 0; i < a.size(); ++i) {
    ++ca[a[i]];
    ++cb[b[i]];
    ++joint[{a[i], b[i]}];
  }
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& kv : joint) sum_ij += static_cast<double>(pairs(kv.second));
  for (const auto& kv : ca) sum_a += static_cast<double>(pairs(kv.second));
  for (const auto& kv : cb) sum_b += static_cast<double>(pairs(kv.second));
  const double total = static_cast<double>(pairs(n));
  const double expected = sum_a * sum_b / total;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;  // both partitions degenerate (and then identical)
  return (sum_ij - expected) / (max_index - expected);
}

double linear_probe_accuracy(const Tensor& features, const std::vector<int>& labels, int classes,
                             double train_frac, double ridge, uint64_t seed) {
  if (features.ndim() != 2) throw std::invalid_argument("linear_probe_accuracy: features [n, d]");
  const int n = features.dim(0), d = features.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("linear_probe_accuracy: labels size mismatch");
  if (!(train_frac > 0.0) || !(train_frac < 1.0))
    throw std::invalid_argument("linear_probe_accuracy: train_frac must be in (0,1)");
  for (int y : labels)
    if (y < 0 || y >= classes)
      throw std::invalid_argument("linear_probe_accuracy: label out of range");

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(mix_seed(seed, 0x9b0e));
  rng.shuffle(order);
  const int n_train = std::max(1, static_cast<int>(std::floor(n * train_frac)));
  if (n_train >= n) throw std::invalid_argument("linear_probe_accuracy: empty test split");

  // Center columns with the train mean, then one-vs-rest ridge in dual form:
  // alpha_k = (X X^T + ridge I)^{-1} y_k, score(x) = sum_i alpha_ki <x_i, x>.
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (int i = 0; i < n_train; ++i)
    for (int j = 0; j < d; ++j) mean(j) += features.at(order[static_cast<size_t>(i)], j);
  mean /= n_train;
  Eigen::MatrixXd Xtr(n_train, d);
  for (int i = 0; i < n_train; ++i)
    for (int j = 0; j < d; ++j)
      Xtr(i, j) = features.at(order[static_cast<size_t>(i)], j) - mean(j);

  Eigen::MatrixXd K = Xtr * Xtr.transpose();
  K.diagonal().array() += ridge;
  Eigen::MatrixXd Y = Eigen::MatrixXd::Constant(n_train, classes, -1.0);
  for (int i = 0; i < n_train; ++i)
    Y(i, labels[static_cast<size_t>(order[static_cast<size_t>(i)])]) = 1.0;
  Eigen::MatrixXd alpha = K.ldlt().solve(Y);  // [n_train, classes]

  int correct = 0;
  const int n_test = n - n_train;
  Eigen::VectorXd x(d);
  for (int i = n_train; i < n; ++i) {
    const int idx = order[static_cast<size_t>(i)];
    for (int j = 0; j < d; ++j) x(j) = features.at(idx, j) - mean(j);
    Eigen::VectorXd scores = alpha.transpose() * (Xtr * x);
    int best = 0;
    for (int k = 1; k < classes; ++k)
      if (scores(k) > scores(best)) best = k;
    if (best == labels[static_cast<size_t>(idx)]) ++correct;
  }
  return static_cast<double>(correct) / n_test;
}

}  // namespace bstrat
