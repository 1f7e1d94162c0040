#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "bstrat/augment.hpp"
#include "bstrat/rng.hpp"
#include "test_support.hpp"

using namespace bstrat;
using bstrat::testing::fill_normal;

namespace {

Recording make_rec(int channels, int samples, double fs, uint64_t seed = 7) {
  Recording r;
  r.channels = channels;
  r.samples = samples;
  r.sample_rate_hz = fs;
  r.signal.resize(static_cast<size_t>(channels) * samples);
  for (int c = 0; c < channels; ++c) r.channel_ids.push_back("A" + std::to_string(c + 1));
  Rng rng(seed);
  for (auto& v : r.signal) v = rng.normal();
  return r;
}

}  // namespace

TEST_CASE("augment config validation") {
  AugmentConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  AugmentConfig bad = cfg;
  bad.crop_jitter_s = 5.0;  // 4 + 5 > 8
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.overlap_s = 8.0;  // stride would be zero
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.shift_max_s = -0.1;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.crop_len_s = 0.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("segment layout: every 4 s, 8 s long") {
  AugmentConfig cfg;
  const double fs = 400.0;

  // 16 s -> segments start at 0, 4, 8 s.
  Recording r16 = make_rec(2, 6400, fs);
  PretrainWindows pw(r16, cfg);
  CHECK(pw.segments() == 3);
  CHECK(pw.segment_samples() == 3200);
  CHECK(pw.stride_samples() == 1600);
  CHECK(pw.crop_samples() == 1600);

  // exactly one segment fits an 8 s recording
  Recording r8 = make_rec(1, 3200, fs);
  CHECK(PretrainWindows(r8, cfg).segments() == 1);

  // shorter than one segment is an error
  Recording r7 = make_rec(1, 3199, fs);
  CHECK_THROWS(PretrainWindows(r7, cfg));
}

TEST_CASE("zero jitter crops the segment head") {
  AugmentConfig cfg;
  cfg.crop_jitter_s = 0.0;
  const double fs = 400.0;
  Recording rec = make_rec(3, 6400, fs);
  PretrainWindows pw(rec, cfg);
  for (int s = 0; s < pw.segments(); ++s) {
    for (int epoch : {0, 1, 5}) {
      CHECK(pw.offset_of(s, epoch) == 0);
      Tensor w = pw.fetch(s, epoch);
      REQUIRE(w.shape == std::vector<int>{3, 1600});
      for (int c = 0; c < 3; ++c)
        for (int t = 0; t < 1600; ++t)
          CHECK(w.at(c, t) == rec.at(c, s * pw.stride_samples() + t));
    }
  }
}

TEST_CASE("crops stay inside their segment and vary with epoch") {
  AugmentConfig cfg;
  cfg.seed = 123;
  const double fs = 400.0;
  Recording rec = make_rec(1, 6400, fs);
  PretrainWindows pw(rec, cfg);
  const int max_offset = pw.segment_samples() - pw.crop_samples();

  std::set<int> seen;
  for (int s = 0; s < pw.segments(); ++s) {
    for (int epoch = 0; epoch < 334; ++epoch) {  // ~1000 draws total
      const int off = pw.offset_of(s, epoch);
      CHECK(off >= 0);
      CHECK(off <= max_offset);
      // crop [start, start+crop) never crosses the segment end
      CHECK(s * pw.stride_samples() + off + pw.crop_samples() <=
            s * pw.stride_samples() + pw.segment_samples());
      seen.insert(off);
    }
  }
  CHECK(seen.size() > 100);  // offsets are actually random, not constant

  // fetched content equals the recording slice at the reported offset
  const int off = pw.offset_of(1, 17);
  Tensor w = pw.fetch(1, 17);
  for (int t = 0; t < pw.crop_samples(); ++t)
    CHECK(w.at(0, t) == rec.at(0, pw.stride_samples() + off + t));
}

TEST_CASE("pretrain stream is deterministic per (segment, epoch, seed)") {
  AugmentConfig cfg;
  cfg.seed = 99;
  Recording rec = make_rec(2, 6400, 400.0);
  PretrainWindows a(rec, cfg), b(rec, cfg);
  bool any_diff_between_epochs = false;
  for (int s = 0; s < a.segments(); ++s) {
    for (int epoch = 0; epoch < 50; ++epoch) {
      CHECK(a.offset_of(s, epoch) == b.offset_of(s, epoch));
      if (a.offset_of(s, epoch) != a.offset_of(s, epoch + 1)) any_diff_between_epochs = true;
    }
  }
  CHECK(any_diff_between_epochs);

  AugmentConfig other = cfg;
  other.seed = 100;
  PretrainWindows c(rec, other);
  bool any_diff_between_seeds = false;
  for (int epoch = 0; epoch < 50; ++epoch)
    if (a.offset_of(0, epoch) != c.offset_of(0, epoch)) any_diff_between_seeds = true;
  CHECK(any_diff_between_seeds);
}

TEST_CASE("shift_trial: zero max shift is the identity") {
  AugmentConfig cfg;
  cfg.shift_max_s = 0.0;
  Tensor w({2, 100});
  Rng rng(5);
  fill_normal(w, rng);
  for (uint64_t seed : {0ull, 1ull, 42ull}) {
    Tensor out = shift_trial(w, 400.0, cfg, seed);
    REQUIRE(out.shape == w.shape);
    for (size_t i = 0; i < w.v.size(); ++i) CHECK(out.v[i] == w.v[i]);
  }
}

TEST_CASE("shift_trial matches an exhaustive shifted-copy oracle") {
  // Oracle: for every output there must be exactly one plausible shift s with
  // |s| <= shift_max * rate such that the output equals the input moved by s
  // with zeros in the vacated samples.
  AugmentConfig cfg;
  cfg.seed = 7;
  const double fs = 400.0;
  const int T = 160, C = 2;
  const int max_shift = static_cast<int>(std::llround(cfg.shift_max_s * fs));
  REQUIRE(max_shift == 80);

  Tensor w({C, T});
  Rng rng(11);
  fill_normal(w, rng);  // continuous noise: distinct values, shift is identifiable

  auto apply_shift = [&](int s) {
    Tensor out({C, T});
    for (int c = 0; c < C; ++c)
      for (int t = 0; t < T; ++t) {
        const int src = t - s;
        if (src >= 0 && src < T) out.at(c, t) = w.at(c, src);
      }
    return out;
  };

  std::set<int> shifts_seen;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    Tensor out = shift_trial(w, fs, cfg, seed);
    REQUIRE(out.shape == w.shape);
    int match = 1 << 30;
    for (int s = -max_shift; s <= max_shift; ++s) {
      Tensor want = apply_shift(s);
      bool same = true;
      for (size_t i = 0; i < want.v.size() && same; ++i) same = (want.v[i] == out.v[i]);
      if (same) {
        match = s;
        break;
      }
    }
    REQUIRE(match != (1 << 30));  // some legal shift explains the output
    shifts_seen.insert(match);

    // vacated samples are exactly zero
    if (match > 0)
      for (int c = 0; c < C; ++c)
        for (int t = 0; t < match; ++t) CHECK(out.at(c, t) == 0.0);
    if (match < 0)
      for (int c = 0; c < C; ++c)
        for (int t = T + match; t < T; ++t) CHECK(out.at(c, t) == 0.0);
  }

  // both directions and several magnitudes occur
  bool any_left = false, any_right = false;
  for (int s : shifts_seen) {
    if (s < 0) any_left = true;
    if (s > 0) any_right = true;
  }
  CHECK(any_left);
  CHECK(any_right);
  CHECK(shifts_seen.size() > 20);

  // deterministic per seed
  Tensor again = shift_trial(w, fs, cfg, 123);
  Tensor again2 = shift_trial(w, fs, cfg, 123);
  for (size_t i = 0; i < again.v.size(); ++i) CHECK(again.v[i] == again2.v[i]);
}

TEST_CASE("shift_trial rejects bad input") {
  AugmentConfig cfg;
  Tensor w({2, 3, 4});
  CHECK_THROWS(shift_trial(w, 400.0, cfg, 0));
  Tensor ok({2, 12});
  CHECK_THROWS(shift_trial(ok, 0.0, cfg, 0));
}
