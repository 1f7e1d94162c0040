#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include <json.hpp>

#include "bstrat/coarse_model.hpp"
#include "bstrat/rng.hpp"
#include "test_support.hpp"

using namespace bstrat;
using bstrat::testing::fill_normal;
using bstrat::testing::grad_rel_err;

namespace {

CoarseConfig desk_config() {
  CoarseConfig cfg;
  cfg.d = 12;
  cfg.conv_channels = 4;
  cfg.temporal_layers = 1;
  cfg.spatial_layers = 1;
  cfg.heads = 2;
  cfg.ffn = 24;
  cfg.dropout = 0.0;
  return cfg;
}

Tensor random_window(int channels, int samples, uint64_t seed) {
  Tensor w({channels, samples});
  Rng rng(seed);
  fill_normal(w, rng);
  return w;
}

double stable_bce(double logit, double label) {
  return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::fabs(logit)));
}

Recording random_recording(int channels, double seconds, uint64_t seed) {
  Recording rec;
  rec.channels = channels;
  rec.sample_rate_hz = 400.0;
  rec.samples = static_cast<int>(std::llround(seconds * rec.sample_rate_hz));
  rec.signal.resize(static_cast<size_t>(channels) * rec.samples);
  for (int c = 0; c < channels; ++c) rec.channel_ids.push_back("ch" + std::to_string(c));
  Rng rng(seed);
  // smooth-ish signals: random walk keeps adjacent samples correlated so a
  // donor window from another time range is actually distinguishable
  for (int c = 0; c < channels; ++c) {
    double x = 0.0;
    for (int t = 0; t < rec.samples; ++t) {
      x = 0.99 * x + rng.normal(0.0, 0.1);
      rec.at(c, t) = x;
    }
  }
  rec.validate();
  return rec;
}

}  // namespace

TEST_CASE("patch grid covers the window head and drops the remainder") {
  Tensor w = random_window(3, 1600, 7);
  CoarsePatchGrid grid = make_patch_grid(w, 400.0, 0.25);
  CHECK(grid.channels() == 3);
  CHECK(grid.n_patches() == 16);
  CHECK(grid.patch_len() == 100);
  for (int c = 0; c < 3; ++c)
    for (int n = 0; n < 16; ++n)
      for (int t = 0; t < 100; ++t) CHECK(grid.patches.at(c, n, t) == w.at(c, n * 100 + t));

  // a trailing remainder shorter than one patch is dropped
  Tensor longer = random_window(2, 1650, 8);
  CHECK(make_patch_grid(longer, 400.0, 0.25).n_patches() == 16);

  CHECK_THROWS_AS(make_patch_grid(random_window(2, 99, 9), 400.0, 0.25), std::invalid_argument);
  CHECK_THROWS_AS(make_patch_grid(Tensor({4}), 400.0, 0.25), std::invalid_argument);
  CHECK_THROWS_AS(make_patch_grid(w, 0.0, 0.25), std::invalid_argument);
}

TEST_CASE("full-size model produces the documented embedding shapes") {
  CoarseConfig cfg;  // reference defaults: d=256, 4+4 layers, 8 heads
  Rng rng(11);
  CoarseModel model;
  model.init(3, cfg, false, rng);

  Tensor w = random_window(3, 1600, 12);
  CoarsePatchGrid grid = make_patch_grid(w, 400.0, cfg.patch_s);

  ad::Tape t;
  ad::Var tokens = model.tokenize(t, grid);
  CHECK(tokens.val().shape == std::vector<int>{3, 16, 256});

  CoarseModel::ForwardOut out = model.forward(t, tokens, nullptr, false, nullptr);
  CHECK(out.e_t.val().shape == std::vector<int>{3, 16, 256});
  CHECK(out.e_s.val().shape == std::vector<int>{3, 16, 256});
  CHECK(out.attn.shape == std::vector<int>{4, 8, 3, 3});
  for (double x : out.e_s.val().v) CHECK(std::isfinite(x));
}

TEST_CASE("zero input stays finite through the bias-only path") {
  CoarseConfig cfg = desk_config();
  Rng rng(13);
  CoarseModel model;
  model.init(2, cfg, false, rng);

  Tensor w({2, 800});
  CoarsePatchGrid grid = make_patch_grid(w, 400.0, cfg.patch_s);
  ad::Tape t;
  ad::Var tokens = model.tokenize(t, grid);
  CoarseModel::ForwardOut out = model.forward(t, tokens, nullptr, false, nullptr);
  for (double x : tokens.val().v) CHECK(std::isfinite(x));
  for (double x : out.e_t.val().v) CHECK(std::isfinite(x));
  for (double x : out.e_s.val().v) CHECK(std::isfinite(x));
}

TEST_CASE("identical signals embed differently under channel-specific tokenizers") {
  CoarseConfig cfg = desk_config();
  Rng rng(17);
  CoarseModel model;
  model.init(2, cfg, false, rng);

  Tensor w({2, 800});
  Rng sig(18);
  for (int t = 0; t < 800; ++t) {
    const double x = sig.normal(0.0, 1.0);
    w.at(0, t) = x;
    w.at(1, t) = x;
  }
  CoarsePatchGrid grid = make_patch_grid(w, 400.0, cfg.patch_s);
  ad::Tape t;
  ad::Var tokens = model.tokenize(t, grid);
  double max_diff = 0.0;
  for (int n = 0; n < tokens.val().dim(1); ++n)
    for (int k = 0; k < cfg.d; ++k)
      max_diff = std::max(max_diff, std::fabs(tokens.val().at(0, n, k) - tokens.val().at(1, n, k)));
  CHECK(max_diff > 1e-6);
}

TEST_CASE("a single channel yields the trivial spatial attention distribution") {
  CoarseConfig cfg = desk_config();
  Rng rng(19);
  CoarseModel model;
  model.init(1, cfg, false, rng);

  Tensor w = random_window(1, 800, 20);
  CoarsePatchGrid grid = make_patch_grid(w, 400.0, cfg.patch_s);
  ad::Tape t;
  ad::Var tokens = model.tokenize(t, grid);
  CoarseModel::ForwardOut out = model.forward(t, tokens, nullptr, false, nullptr);
  CHECK(out.attn.shape == std::vector<int>{cfg.spatial_layers, cfg.heads, 1, 1});
  for (double x : out.attn.v) CHECK(x == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attention rows are probability vectors") {
  CoarseConfig cfg = desk_config();
  cfg.spatial_layers = 2;
  Rng rng(21);
  CoarseModel model;
  model.init(5, cfg, false, rng);

  Tensor w = random_window(5, 800, 22);
  CoarsePatchGrid grid = make_patch_grid(w, 400.0, cfg.patch_s);
  ad::Tape t;
  ad::Var tokens = model.tokenize(t, grid);
  CoarseModel::ForwardOut out = model.forward(t, tokens, nullptr, false, nullptr);
  REQUIRE(out.attn.shape == std::vector<int>{2, cfg.heads, 5, 5});
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < cfg.heads; ++h)
      for (int i = 0; i < 5; ++i) {
        double row = 0.0;
        for (int j = 0; j < 5; ++j) {
          CHECK(out.attn.at(l, h, i, j) >= 0.0);
          row += out.attn.at(l, h, i, j);
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
      }
}

TEST_CASE("temporal stage never mixes information across channels") {
  CoarseConfig cfg = desk_config();
  Rng rng(23);
  CoarseModel model;
  model.init(4, cfg, false, rng);

  Tensor a = random_window(4, 800, 24);
  Tensor b = a;
  for (int t = 0; t < 800; ++t) b.at(2, t) += 0.5;  // perturb channel 2 only

  auto e_t_of = [&](const Tensor& w) {
    ad::Tape t;
    ad::Var tok = model.tokenize(t, make_patch_grid(w, 400.0, cfg.patch_s));
    return model.temporal_forward(t, tok, false, nullptr).val();
  };
  Tensor ea = e_t_of(a), eb = e_t_of(b);
  double other = 0.0, perturbed = 0.0;
  for (int c = 0; c < 4; ++c)
    for (int n = 0; n < ea.dim(1); ++n)
      for (int k = 0; k < cfg.d; ++k) {
        const double d = std::fabs(ea.at(c, n, k) - eb.at(c, n, k));
        if (c == 2)
          perturbed = std::max(perturbed, d);
        else
          other = std::max(other, d);
      }
  CHECK(other == 0.0);       // bit-exact: nothing leaks across channels
  CHECK(perturbed > 1e-6);   // while the perturbed channel does change
}

TEST_CASE("spatial stage never mixes information across temporal indices") {
  CoarseConfig cfg = desk_config();
  Rng rng(25);
  CoarseModel model;
  model.init(4, cfg, false, rng);

  Tensor e({4, 8, cfg.d});
  Rng fill(26);
  fill_normal(e, fill);
  Tensor e2 = e;
  for (int c = 0; c < 4; ++c)
    for (int k = 0; k < cfg.d; ++k) e2.at(c, 3, k) += 0.5;  // perturb temporal index 3

  auto e_s_of = [&](const Tensor& et) {
    ad::Tape t;
    return model.spatial_forward(t, ad::constant(t, et), nullptr, false, nullptr, nullptr).val();
  };
  Tensor sa = e_s_of(e), sb = e_s_of(e2);
  double other = 0.0, perturbed = 0.0;
  for (int c = 0; c < 4; ++c)
    for (int n = 0; n < 8; ++n)
      for (int k = 0; k < cfg.d; ++k) {
        const double d = std::fabs(sa.at(c, n, k) - sb.at(c, n, k));
        if (n == 3)
          perturbed = std::max(perturbed, d);
        else
          other = std::max(other, d);
      }
  CHECK(other == 0.0);
  CHECK(perturbed > 1e-6);
}

TEST_CASE("channel permutation with matching embeddings permutes the output") {
  CoarseConfig cfg = desk_config();
  Rng rng(27);
  CoarseModel model;
  model.init(4, cfg, false, rng);

  Tensor e({4, 8, cfg.d});
  Rng fill(28);
  fill_normal(e, fill);

  ad::Tape t1;
  Tensor base = model.spatial_forward(t1, ad::constant(t1, e), nullptr, false, nullptr, nullptr)
                    .val();

  const std::vector<int> perm = {2, 0, 3, 1};
  Tensor e_perm({4, 8, cfg.d});
  for (int i = 0; i < 4; ++i)
    for (int n = 0; n < 8; ++n)
      for (int k = 0; k < cfg.d; ++k) e_perm.at(i, n, k) = e.at(perm[i], n, k);
  Tensor embed_saved = model.spatial_embed.value;
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < cfg.d; ++k)
      model.spatial_embed.value.at(i, k) = embed_saved.at(perm[i], k);

  ad::Tape t2;
  Tensor permuted =
      model.spatial_forward(t2, ad::constant(t2, e_perm), nullptr, false, nullptr, nullptr).val();
  model.spatial_embed.value = embed_saved;

  for (int i = 0; i < 4; ++i)
    for (int n = 0; n < 8; ++n)
      for (int k = 0; k < cfg.d; ++k)
        CHECK(permuted.at(i, n, k) ==
              doctest::Approx(base.at(perm[i], n, k)).epsilon(1e-9).scale(1.0));
}

TEST_CASE("context batch replaces the documented channel count and balances labels") {
  CoarseConfig cfg = desk_config();

  SUBCASE("twenty channels give two replaced plus two genuine") {
    Tensor w = random_window(20, 800, 30);
    std::vector<Tensor> donors = {random_window(20, 800, 31)};
    SpatialContextBatch batch = make_context_batch(w, donors, 400.0, cfg, 5);
    CHECK(std::count(batch.replaced.begin(), batch.replaced.end(), 1) == 2);
    REQUIRE(batch.scored.size() == 4);
    REQUIRE(batch.labels.size() == 4);
    int pos = 0;
    for (double y : batch.labels) pos += y > 0.5 ? 1 : 0;
    CHECK(pos == 2);
    std::set<int> uniq(batch.scored.begin(), batch.scored.end());
    CHECK(uniq.size() == 4);

    // replaced channels carry the donor's activity, genuine ones the window's
    for (int c = 0; c < 20; ++c) {
      const Tensor& expect = batch.replaced[static_cast<size_t>(c)] ? donors[0] : w;
      for (int n = 0; n < batch.corrupted.n_patches(); ++n)
        for (int s = 0; s < batch.corrupted.patch_len(); ++s)
          CHECK(batch.corrupted.patches.at(c, n, s) == expect.at(c, n * 100 + s));
    }
    for (size_t i = 0; i < batch.scored.size(); ++i)
      CHECK((batch.labels[i] > 0.5) ==
            (batch.replaced[static_cast<size_t>(batch.scored[i])] == 1));
  }

  SUBCASE("five channels floor-guard to one replaced") {
    Tensor w = random_window(5, 800, 32);
    std::vector<Tensor> donors = {random_window(5, 800, 33)};
    SpatialContextBatch batch = make_context_batch(w, donors, 400.0, cfg, 6);
    CHECK(std::count(batch.replaced.begin(), batch.replaced.end(), 1) == 1);
    CHECK(batch.scored.size() == 2);
  }

  SUBCASE("same seed reproduces the batch, another seed moves it") {
    Tensor w = random_window(20, 800, 34);
    std::vector<Tensor> donors = {random_window(20, 800, 35), random_window(20, 800, 36)};
    SpatialContextBatch a = make_context_batch(w, donors, 400.0, cfg, 9);
    SpatialContextBatch b = make_context_batch(w, donors, 400.0, cfg, 9);
    CHECK(a.replaced == b.replaced);
    CHECK(a.scored == b.scored);
    CHECK(a.corrupted.patches.v == b.corrupted.patches.v);

    bool any_differs = false;
    for (uint64_t s = 10; s < 20 && !any_differs; ++s)
      any_differs = make_context_batch(w, donors, 400.0, cfg, s).replaced != a.replaced;
    CHECK(any_differs);
  }

  SUBCASE("bad inputs are rejected") {
    Tensor w = random_window(20, 800, 37);
    CHECK_THROWS_AS(make_context_batch(w, {}, 400.0, cfg, 1), std::invalid_argument);
    std::vector<Tensor> bad = {random_window(19, 800, 38)};
    CHECK_THROWS_AS(make_context_batch(w, bad, 400.0, cfg, 1), std::invalid_argument);
    Tensor tiny = random_window(1, 800, 39);
    std::vector<Tensor> tiny_donor = {random_window(1, 800, 40)};
    // one channel cannot hold one replaced plus one genuine scored channel
    CHECK_THROWS_AS(make_context_batch(tiny, tiny_donor, 400.0, cfg, 1), std::invalid_argument);
  }
}

TEST_CASE("zero feature difference gives the textbook fifty-fifty loss") {
  CoarseConfig cfg = desk_config();
  Rng rng(41);
  CoarseModel model;
  model.init(6, cfg, false, rng);
  model.context_head.b.value.fill(0.0);

  Tensor w = random_window(6, 800, 42);
  std::vector<Tensor> donors = {random_window(6, 800, 43)};
  SpatialContextBatch batch = make_context_batch(w, donors, 400.0, cfg, 44);

  ad::Tape t;
  ad::Var tokens = model.tokenize(t, batch.corrupted);
  ad::Var e_t = model.temporal_forward(t, tokens, false, nullptr);
  CoarseModel::LossOut out = model.context_loss(t, e_t, e_t, batch);
  CHECK(out.loss.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // a zero logit predicts "genuine", which is wrong on every replaced channel
  CHECK(out.accuracy == doctest::Approx(0.5));
}

TEST_CASE("loss and accuracy match a hand-computed oracle") {
  for (uint64_t seed : {50ull, 51ull, 52ull}) {
    CoarseConfig cfg = desk_config();
    cfg.scalar_context_feature = (seed == 52ull);
    Rng rng(seed);
    CoarseModel model;
    model.init(8, cfg, false, rng);

    Tensor w = random_window(8, 800, seed + 100);
    std::vector<Tensor> donors = {random_window(8, 800, seed + 200)};
    SpatialContextBatch batch = make_context_batch(w, donors, 400.0, cfg, seed + 300);

    ad::Tape t;
    ad::Var tokens = model.tokenize(t, batch.corrupted);
    CoarseModel::ForwardOut fwd = model.forward(t, tokens, nullptr, false, nullptr);
    CoarseModel::LossOut out = model.context_loss(t, fwd.e_t, fwd.e_s, batch);

    const Tensor& et = fwd.e_t.val();
    const Tensor& es = fwd.e_s.val();
    const int N = et.dim(1);
    double loss = 0.0;
    int correct = 0;
    for (size_t i = 0; i < batch.scored.size(); ++i) {
      const int c = batch.scored[i];
      std::vector<double> feat(static_cast<size_t>(cfg.d), 0.0);
      for (int n = 0; n < N; ++n)
        for (int k = 0; k < cfg.d; ++k) {
          const double d = es.at(c, n, k) - et.at(c, n, k);
          feat[static_cast<size_t>(k)] += d * d / N;
        }
      double logit = model.context_head.b.value.at(0);
      if (cfg.scalar_context_feature) {
        double s = 0.0;
        for (double f : feat) s += f / cfg.d;
        logit += s * model.context_head.W.value.at(0, 0);
      } else {
        for (int k = 0; k < cfg.d; ++k)
          logit += feat[static_cast<size_t>(k)] * model.context_head.W.value.at(k, 0);
      }
      loss += stable_bce(logit, batch.labels[i]) / batch.scored.size();
      if ((logit > 0.0) == (batch.labels[i] > 0.5)) ++correct;
    }
    CHECK(out.loss.scalar() == doctest::Approx(loss).epsilon(1e-10));
    CHECK(out.accuracy ==
          doctest::Approx(static_cast<double>(correct) / batch.scored.size()).epsilon(1e-12));
  }
}

TEST_CASE("analytic gradients of the context loss match central differences") {
  CoarseConfig cfg = desk_config();
  Rng rng(60);
  CoarseModel model;
  model.init(5, cfg, false, rng);

  Tensor w = random_window(5, 800, 61);
  std::vector<Tensor> donors = {random_window(5, 800, 62)};
  SpatialContextBatch batch = make_context_batch(w, donors, 400.0, cfg, 63);

  auto build_loss = [&](ad::Tape& t) {
    ad::Var tokens = model.tokenize(t, batch.corrupted);
    CoarseModel::ForwardOut fwd = model.forward(t, tokens, nullptr, false, nullptr);
    return model.context_loss(t, fwd.e_t, fwd.e_s, batch).loss;
  };

  // the full head plus representatives of every other parameter family
  std::vector<ad::Param*> subset = {&model.context_head.W,
                                    &model.context_head.b,
                                    &model.spatial_embed,
                                    &model.proj[1].b,
                                    &model.conv1[0].b,
                                    &model.gn3[2].gamma,
                                    &model.gn1[4].beta};
  CHECK(bstrat::testing::fd_check(subset, build_loss) < 1e-4);

  // spot-check a dense weight family with a few components: conv kernels and
  // one attention projection, via single-element param views
  ad::NamedParams named = model.named_params();
  std::vector<ad::Param*> dense;
  for (auto& [name, p] : named)
    if (name == "tok0.conv2.w" || name == "spatial.layer0.attn.wq.w" ||
        name == "temporal.layer0.fc1.w")
      dense.push_back(p);
  REQUIRE(dense.size() == 3);

  for (auto* p : dense) p->zero_grad();
  for (auto* np : std::vector<ad::Param*>{&model.context_head.W}) np->zero_grad();
  ad::Tape tape;
  ad::Var loss = build_loss(tape);
  tape.backward(loss);
  Rng pick(64);
  for (ad::Param* p : dense) {
    for (int trial = 0; trial < 6; ++trial) {
      const size_t i = static_cast<size_t>(pick.below(p->value.v.size()));
      const double saved = p->value.v[i];
      const double eps = 1e-5;
      p->value.v[i] = saved + eps;
      ad::Tape ta;
      const double f1 = build_loss(ta).scalar();
      p->value.v[i] = saved - eps;
      ad::Tape tb;
      const double f2 = build_loss(tb).scalar();
      p->value.v[i] = saved;
      CHECK(grad_rel_err(p->grad.v[i], (f1 - f2) / (2.0 * eps)) < 1e-4);
    }
  }
}

TEST_CASE("coordinate-driven spatial embeddings require and use coordinates") {
  CoarseConfig cfg = desk_config();
  Rng rng(70);
  CoarseModel model;
  model.init(3, cfg, true, rng);

  Tensor w = random_window(3, 800, 71);
  CoarsePatchGrid grid = make_patch_grid(w, 400.0, cfg.patch_s);
  ad::Tape t;
  ad::Var tokens = model.tokenize(t, grid);

  CHECK_THROWS_AS(model.forward(t, tokens, nullptr, false, nullptr), std::invalid_argument);

  Tensor coords({3, 3});
  Rng crng(72);
  bstrat::testing::fill_uniform(coords, crng, -1.0, 1.0);
  CoarseModel::ForwardOut a = model.forward(t, tokens, &coords, false, nullptr);
  for (double x : a.e_s.val().v) CHECK(std::isfinite(x));

  // moving a channel's coordinate changes the output; the map is really used
  Tensor coords2 = coords;
  coords2.at(1, 0) += 0.7;
  CoarseModel::ForwardOut b = model.forward(t, tokens, &coords2, false, nullptr);
  double diff = 0.0;
  for (size_t i = 0; i < a.e_s.val().v.size(); ++i)
    diff = std::max(diff, std::fabs(a.e_s.val().v[i] - b.e_s.val().v[i]));
  CHECK(diff > 1e-8);

  // named parameters expose the coordinate map instead of the embedding table
  ad::NamedParams named = model.named_params();
  bool has_coord_map = false, has_embed = false;
  for (auto& [name, p] : named) {
    if (name.rfind("coord_map", 0) == 0) has_coord_map = true;
    if (name == "spatial_embed") has_embed = true;
  }
  CHECK(has_coord_map);
  CHECK(!has_embed);
}

TEST_CASE("training loop runs, logs valid JSON, and is seed-reproducible") {
  Recording rec = random_recording(6, 28.0, 80);
  AugmentConfig aug;
  aug.seed = 3;

  CoarseConfig cfg = desk_config();
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_windows = 4;
  cfg.donor_pool = 2;
  cfg.seed = 5;

  auto run_once = [&](std::vector<std::string>* lines, int* sink_calls) {
    Rng rng(81);
    CoarseModel model;
    model.init(6, cfg, false, rng);
    std::function<void(const Tensor&)> sink;
    if (sink_calls != nullptr)
      sink = [&, sink_calls](const Tensor& attn) {
        REQUIRE(attn.shape ==
                std::vector<int>{cfg.spatial_layers, cfg.heads, 6, 6});
        ++*sink_calls;
      };
    return train_coarse(model, rec, aug, lines, sink);
  };

  std::vector<std::string> lines;
  int sink_calls = 0;
  CoarseTrainStats a = run_once(&lines, &sink_calls);
  REQUIRE(a.epoch_loss.size() == 2);
  REQUIRE(a.epoch_accuracy.size() == 2);
  CHECK(a.final_accuracy == a.epoch_accuracy.back());
  for (double acc : a.epoch_accuracy) {
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
  }
  for (double l : a.epoch_loss) CHECK(std::isfinite(l));

  PretrainWindows pw(rec, aug);
  CHECK(sink_calls == 2 * pw.segments());

  REQUIRE(lines.size() == 2);
  for (size_t e = 0; e < lines.size(); ++e) {
    nlohmann::json j = nlohmann::json::parse(lines[e]);
    CHECK(j.at("stage") == "coarse");
    CHECK(j.at("epoch") == static_cast<int>(e));
    CHECK(j.at("loss").is_number());
    CHECK(j.at("accuracy").is_number());
    CHECK(j.at("lr").is_number());
  }

  CoarseTrainStats b = run_once(nullptr, nullptr);
  CHECK(a.epoch_loss == b.epoch_loss);
  CHECK(a.epoch_accuracy == b.epoch_accuracy);

  SUBCASE("mismatched inputs are rejected") {
    Rng rng(82);
    CoarseModel wrong;
    wrong.init(5, cfg, false, rng);
    CHECK_THROWS_AS(train_coarse(wrong, rec, aug), std::invalid_argument);

    CoarseModel needs_coords;
    Rng rng2(83);
    needs_coords.init(6, cfg, true, rng2);
    CHECK_THROWS_AS(train_coarse(needs_coords, rec, aug), std::invalid_argument);

    Recording slow = rec;
    slow.sample_rate_hz = 500.0;
    Rng rng3(84);
    CoarseModel m2;
    m2.init(6, cfg, false, rng3);
    CHECK_THROWS_AS(train_coarse(m2, slow, aug), std::invalid_argument);
  }

  SUBCASE("early stop truncates the epoch loop") {
    CoarseConfig stop_cfg = cfg;
    stop_cfg.epochs = 50;
    stop_cfg.stop_accuracy = 1e-6;  // any nonzero epoch accuracy triggers it
    Rng rng(85);
    CoarseModel model;
    model.init(6, stop_cfg, false, rng);
    CoarseTrainStats s = train_coarse(model, rec, aug);
    CHECK(s.epoch_loss.size() < 50);
  }
}
