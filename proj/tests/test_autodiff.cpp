#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "bstrat/autodiff.hpp"
#include "bstrat/rng.hpp"
#include "bstrat/tensor.hpp"
#include "test_support.hpp"

using namespace bstrat;
using namespace bstrat::ad;
using bstrat::testing::fd_check;
using bstrat::testing::fill_normal;
using bstrat::testing::fill_uniform;

namespace {

Param rand_param(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Param p(Tensor(std::move(shape)));
  fill_uniform(p.value, rng, lo, hi);
  return p;
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("elementwise and reduction ops match finite differences") {
  Rng rng(11);
  Param a = rand_param({3, 4}, rng);
  Param b = rand_param({3, 4}, rng);

  SUBCASE("add/sub/mul/scale/square") {
    auto build = [&](Tape& t) {
      Var av = param(t, a), bv = param(t, b);
      Var x = add(av, bv);
      x = mul(x, sub(av, scale(bv, 0.7)));
      return sum_all(square(x));
    };
    CHECK(fd_check({&a, &b}, build) < kTol);
  }

  SUBCASE("mean_all / sum_all / mean_axis1") {
    Param c = rand_param({2, 3, 4}, rng);
    auto build = [&](Tape& t) {
      Var cv = param(t, c);
      return add(mean_all(square(cv)), sum_all(square(mean_axis1(cv))));
    };
    CHECK(fd_check({&c}, build) < kTol);
  }

  SUBCASE("abs away from zero") {
    Param c = rand_param({4, 4}, rng, 0.5, 1.5);
    for (size_t i = 0; i < c.value.v.size(); i += 2) c.value.v[i] *= -1.0;
    auto build = [&](Tape& t) { return sum_all(abs_op(param(t, c))); };
    CHECK(fd_check({&c}, build) < kTol);
  }

  SUBCASE("activations: relu (away from zero), gelu, tanh") {
    Param c = rand_param({5, 3}, rng, 0.2, 1.2);
    for (size_t i = 1; i < c.value.v.size(); i += 3) c.value.v[i] *= -1.0;
    auto build = [&](Tape& t) {
      Var cv = param(t, c);
      return sum_all(add(square(relu(cv)), add(square(gelu(cv)), square(tanh_act(cv)))));
    };
    CHECK(fd_check({&c}, build) < kTol);
  }
}

TEST_CASE("shape ops match finite differences") {
  Rng rng(12);

  SUBCASE("reshape / permute01 / transpose_last2") {
    Param a = rand_param({2, 3, 4}, rng);
    auto build = [&](Tape& t) {
      Var av = param(t, a);
      Var x = permute01(av);                      // [3,2,4]
      x = transpose_last2(x);                     // [3,4,2]
      x = reshape(x, {6, 4});
      return sum_all(square(x));
    };
    CHECK(fd_check({&a}, build) < kTol);
  }

  SUBCASE("gather_rows accumulates over repeated indices") {
    Param a = rand_param({5, 3}, rng);
    auto build = [&](Tape& t) {
      return sum_all(square(gather_rows(param(t, a), {0, 2, 2, 4})));
    };
    CHECK(fd_check({&a}, build) < kTol);
  }

  SUBCASE("concat_rows") {
    Param a = rand_param({2, 3}, rng), b = rand_param({4, 3}, rng);
    auto build = [&](Tape& t) {
      return sum_all(square(concat_rows({param(t, a), param(t, b)})));
    };
    CHECK(fd_check({&a, &b}, build) < kTol);
  }

  SUBCASE("rows_dot") {
    Param a = rand_param({4, 3}, rng), b = rand_param({4, 3}, rng);
    auto build = [&](Tape& t) { return sum_all(square(rows_dot(param(t, a), param(t, b)))); };
    CHECK(fd_check({&a, &b}, build) < kTol);
  }

  SUBCASE("mask_replace_rows routes gradients to kept rows and the token") {
    Param a = rand_param({5, 3}, rng);
    Param tok = rand_param({3}, rng);
    auto build = [&](Tape& t) {
      return sum_all(square(mask_replace_rows(param(t, a), param(t, tok), {1, 3})));
    };
    CHECK(fd_check({&a, &tok}, build) < kTol);
  }

  SUBCASE("unfold_rows") {
    Param a = rand_param({6, 2}, rng);
    auto build = [&](Tape& t) { return sum_all(square(unfold_rows(param(t, a), 3))); };
    CHECK(fd_check({&a}, build) < kTol);
  }

  SUBCASE("broadcast adds") {
    Param a = rand_param({2, 3, 4}, rng);
    Param p = rand_param({3, 4}, rng);
    Param e = rand_param({2, 4}, rng);
    Tensor cpos({3, 4});
    fill_uniform(cpos, rng, -1, 1);
    auto build = [&](Tape& t) {
      Var x = add_cols_broadcast(param(t, a), param(t, p));
      x = add_rows_broadcast(x, param(t, e));
      x = add_cols_const(x, cpos);
      return sum_all(square(x));
    };
    CHECK(fd_check({&a, &p, &e}, build) < kTol);
  }

  SUBCASE("dropout_mask with a fixed mask") {
    Param a = rand_param({4, 4}, rng);
    Tensor mask({4, 4});
    Rng mrng(77);
    for (auto& x : mask.v) x = mrng.uniform01() < 0.5 ? 0.0 : 2.0;
    auto build = [&](Tape& t) { return sum_all(square(dropout_mask(param(t, a), mask))); };
    CHECK(fd_check({&a}, build) < kTol);
  }
}

TEST_CASE("linear algebra ops match finite differences") {
  Rng rng(13);

  SUBCASE("matmul") {
    Param a = rand_param({3, 4}, rng), b = rand_param({4, 2}, rng);
    auto build = [&](Tape& t) { return sum_all(square(matmul(param(t, a), param(t, b)))); };
    CHECK(fd_check({&a, &b}, build) < kTol);
  }

  SUBCASE("linear with bias") {
    Param x = rand_param({5, 3}, rng), W = rand_param({3, 4}, rng), b = rand_param({4}, rng);
    auto build = [&](Tape& t) {
      return sum_all(square(linear(param(t, x), param(t, W), param(t, b))));
    };
    CHECK(fd_check({&x, &W, &b}, build) < kTol);
  }

  SUBCASE("linear without bias") {
    Param x = rand_param({5, 3}, rng), W = rand_param({3, 4}, rng);
    auto build = [&](Tape& t) {
      return sum_all(square(linear(param(t, x), param(t, W), Var{})));
    };
    CHECK(fd_check({&x, &W}, build) < kTol);
  }

  SUBCASE("conv1d") {
    Param x = rand_param({2, 3, 11}, rng), w = rand_param({4, 3, 5}, rng), b = rand_param({4}, rng);
    auto build = [&](Tape& t) {
      return sum_all(square(conv1d(param(t, x), param(t, w), param(t, b), 2, 2)));
    };
    CHECK(fd_check({&x, &w, &b}, build) < kTol);
  }

  SUBCASE("conv1d_transpose") {
    Param x = rand_param({2, 4, 6}, rng), w = rand_param({4, 3, 5}, rng), b = rand_param({3}, rng);
    auto build = [&](Tape& t) {
      return sum_all(square(conv1d_transpose(param(t, x), param(t, w), param(t, b), 2, 2, 1)));
    };
    CHECK(fd_check({&x, &w, &b}, build) < kTol);
  }

  SUBCASE("layer_norm") {
    Param x = rand_param({4, 6}, rng), g = rand_param({6}, rng, 0.5, 1.5), be = rand_param({6}, rng);
    auto build = [&](Tape& t) {
      return sum_all(square(layer_norm(param(t, x), param(t, g), param(t, be), 1e-5)));
    };
    CHECK(fd_check({&x, &g, &be}, build) < kTol);
  }

  SUBCASE("group_norm") {
    Param x = rand_param({2, 6, 5}, rng), g = rand_param({6}, rng, 0.5, 1.5),
          be = rand_param({6}, rng);
    auto build = [&](Tape& t) {
      return sum_all(square(group_norm(param(t, x), param(t, g), param(t, be), 3, 1e-5)));
    };
    CHECK(fd_check({&x, &g, &be}, build) < kTol);
  }

  SUBCASE("attention") {
    Param q = rand_param({2, 4, 3}, rng), k = rand_param({2, 4, 3}, rng),
          v = rand_param({2, 4, 3}, rng);
    auto build = [&](Tape& t) {
      Var probs;
      Var o = attention(param(t, q), param(t, k), param(t, v), 1.0 / std::sqrt(3.0), &probs);
      return sum_all(square(o));
    };
    CHECK(fd_check({&q, &k, &v}, build) < kTol);
  }

  SUBCASE("attention probability rows sum to one and are non-differentiable") {
    Param q = rand_param({2, 4, 3}, rng), k = rand_param({2, 4, 3}, rng),
          v = rand_param({2, 4, 3}, rng);
    Tape t;
    Var probs;
    Var o = attention(param(t, q), param(t, k), param(t, v), 0.5, &probs);
    const Tensor& pv = probs.val();
    REQUIRE(pv.shape == std::vector<int>({2, 4, 4}));
    for (int s = 0; s < 2; ++s)
      for (int i = 0; i < 4; ++i) {
        double rs = 0;
        for (int j = 0; j < 4; ++j) rs += pv.at(s, i, j);
        CHECK(rs == doctest::Approx(1.0).epsilon(1e-12));
      }
    q.zero_grad();
    t.backward(sum_all(square(o)));
    // touching probs must not have created a gradient path
    CHECK(!t.has_grad(probs.id));
  }

  SUBCASE("split/merge heads round trip") {
    Param x = rand_param({2, 5, 6}, rng);
    auto build = [&](Tape& t) {
      Var s = split_heads(param(t, x), 2, 5, 3);  // [6,5,2]
      return sum_all(square(merge_heads(s, 2, 5, 3)));
    };
    CHECK(fd_check({&x}, build) < kTol);
    Tape t;
    Var xv = param(t, x);
    Var round = merge_heads(split_heads(xv, 2, 5, 3), 2, 5, 3);
    for (size_t i = 0; i < x.value.v.size(); ++i)
      CHECK(round.val().v[i] == doctest::Approx(x.value.v[i]).epsilon(1e-15));
  }
}

TEST_CASE("straight_through passes gradients unchanged; FD via frozen offset") {
  Rng rng(14);
  Param x = rand_param({4, 3}, rng);
  const Tensor x0 = x.value;
  Tensor q0({4, 3});
  for (size_t i = 0; i < q0.v.size(); ++i) q0.v[i] = std::round(x0.v[i] * 4.0) / 4.0;

  // The quantized value tracks x with a frozen offset, which is exactly the
  // function the straight-through estimator differentiates.
  auto build = [&](Tape& t) {
    Tensor q = q0;
    for (size_t i = 0; i < q.v.size(); ++i) q.v[i] += x.value.v[i] - x0.v[i];
    return sum_all(square(straight_through(param(t, x), q)));
  };
  CHECK(fd_check({&x}, build) < kTol);

  // Forward emits the quantized values themselves.
  Tape t;
  Var st = straight_through(param(t, x), q0);
  for (size_t i = 0; i < q0.v.size(); ++i) CHECK(st.val().v[i] == q0.v[i]);
}

TEST_CASE("detach blocks gradients exactly") {
  Rng rng(15);
  Param x = rand_param({3, 3}, rng);
  x.zero_grad();
  Tape t;
  Var xv = param(t, x);
  // loss = sum(x^2) + sum(detach(x)^2): only the live path contributes.
  Var loss = add(sum_all(square(xv)), sum_all(square(detach(xv))));
  t.backward(loss);
  for (size_t i = 0; i < x.value.v.size(); ++i)
    CHECK(x.grad.v[i] == doctest::Approx(2.0 * x.value.v[i]).epsilon(1e-12));
}

TEST_CASE("bce_with_logits matches the closed form and finite differences") {
  Rng rng(16);
  Param z = rand_param({6}, rng, -2.0, 2.0);
  Tensor y({6});
  for (size_t i = 0; i < y.v.size(); ++i) y.v[i] = (i % 2 == 0) ? 1.0 : 0.0;

  auto build = [&](Tape& t) { return bce_with_logits_mean(param(t, z), y); };
  CHECK(fd_check({&z}, build) < kTol);

  Tape t;
  double want = 0.0;
  for (int i = 0; i < 6; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-z.value.at(i)));
    want += -(y.at(i) * std::log(s) + (1.0 - y.at(i)) * std::log(1.0 - s));
  }
  want /= 6.0;
  CHECK(build(t).scalar() == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("cross_entropy_rows weights rows and ignores negative targets") {
  Rng rng(17);
  Param z = rand_param({4, 5}, rng, -1.5, 1.5);
  std::vector<int> targets = {2, -1, 0, 4};
  std::vector<double> weights = {0.5, 3.0, 0.25, 0.25};

  auto build = [&](Tape& t) { return cross_entropy_rows(param(t, z), targets, weights); };
  CHECK(fd_check({&z}, build) < kTol);

  // closed form, skipping the negative-target row regardless of its weight
  double want = 0.0;
  for (int r = 0; r < 4; ++r) {
    if (targets[(size_t)r] < 0) continue;
    double mx = z.value.at(r, 0);
    for (int j = 1; j < 5; ++j) mx = std::max(mx, z.value.at(r, j));
    double se = 0.0;
    for (int j = 0; j < 5; ++j) se += std::exp(z.value.at(r, j) - mx);
    want += weights[(size_t)r] * (std::log(se) + mx - z.value.at(r, targets[(size_t)r]));
  }
  Tape t;
  CHECK(build(t).scalar() == doctest::Approx(want).epsilon(1e-10));

  // gradient of the skipped row is exactly zero
  z.zero_grad();
  Tape t2;
  t2.backward(build(t2));
  for (int j = 0; j < 5; ++j) CHECK(z.grad.at(1, j) == 0.0);
}

namespace {

// Brute-force CTC oracle: total probability over all frame-level paths whose
// collapse (merge repeats, then drop blanks) equals the label sequence.
double ctc_brute_force(const Tensor& logits, const std::vector<int>& labels, int blank) {
  const int T = logits.dim(0), K = logits.dim(1);
  Tensor p = logits;
  for (int tt = 0; tt < T; ++tt) {
    double mx = p.at(tt, 0);
    for (int j = 1; j < K; ++j) mx = std::max(mx, p.at(tt, j));
    double se = 0.0;
    for (int j = 0; j < K; ++j) se += std::exp(p.at(tt, j) - mx);
    for (int j = 0; j < K; ++j) p.at(tt, j) = std::exp(p.at(tt, j) - mx) / se;
  }
  double total = 0.0;
  std::vector<int> path((size_t)T, 0);
  int64_t n_paths = 1;
  for (int tt = 0; tt < T; ++tt) n_paths *= K;
  for (int64_t code = 0; code < n_paths; ++code) {
    int64_t c = code;
    for (int tt = 0; tt < T; ++tt) {
      path[(size_t)tt] = (int)(c % K);
      c /= K;
    }
    std::vector<int> collapsed;
    for (int tt = 0; tt < T; ++tt) {
      if (tt > 0 && path[(size_t)tt] == path[(size_t)tt - 1]) continue;
      collapsed.push_back(path[(size_t)tt]);
    }
    std::vector<int> emitted;
    for (int s : collapsed)
      if (s != blank) emitted.push_back(s);
    if (emitted != labels) continue;
    double prob = 1.0;
    for (int tt = 0; tt < T; ++tt) prob *= p.at(tt, path[(size_t)tt]);
    total += prob;
  }
  return -std::log(total);
}

}  // namespace

TEST_CASE("ctc_loss matches brute-force path enumeration and finite differences") {
  Rng rng(18);
  struct Case {
    int T, K;
    std::vector<int> labels;
  };
  const std::vector<Case> cases = {
      {5, 4, {1, 2}}, {5, 3, {1, 1}}, {4, 4, {3}}, {6, 3, {2, 1, 2}}, {3, 4, {}},
  };
  for (const auto& cs : cases) {
    CAPTURE(cs.T);
    CAPTURE(cs.K);
    Param z(Tensor({cs.T, cs.K}));
    fill_uniform(z.value, rng, -1.5, 1.5);

    Tape t;
    Var loss = ctc_loss(param(t, z), cs.labels, 0);
    const double want = ctc_brute_force(z.value, cs.labels, 0);
    CHECK(loss.scalar() == doctest::Approx(want).epsilon(1e-10));

    auto build = [&](Tape& tt) { return ctc_loss(param(tt, z), cs.labels, 0); };
    CHECK(fd_check({&z}, build) < kTol);
  }

  SUBCASE("nonzero blank index") {
    Param z(Tensor({5, 4}));
    fill_uniform(z.value, rng, -1, 1);
    Tape t;
    Var loss = ctc_loss(param(t, z), {0, 2}, 3);
    CHECK(loss.scalar() == doctest::Approx(ctc_brute_force(z.value, {0, 2}, 3)).epsilon(1e-10));
  }

  SUBCASE("infeasible and malformed label sequences throw") {
    Param z(Tensor({2, 3}));
    fill_uniform(z.value, rng, -1, 1);
    Tape t;
    // {1,1} needs at least 3 frames (separating blank)
    CHECK_THROWS_AS(ctc_loss(param(t, z), {1, 1}, 0), std::invalid_argument);
    Tape t2;
    CHECK_THROWS_AS(ctc_loss(param(t2, z), {0, 1}, 0), std::invalid_argument);  // blank in labels
    Tape t3;
    CHECK_THROWS_AS(ctc_loss(param(t3, z), {7}, 0), std::invalid_argument);  // out of range
  }
}

TEST_CASE("a composite graph through many ops matches finite differences") {
  Rng rng(19);
  Param x = rand_param({3, 4, 6}, rng, -0.8, 0.8);
  Param W = rand_param({6, 6}, rng, -0.5, 0.5);
  Param g = rand_param({6}, rng, 0.8, 1.2), be = rand_param({6}, rng, -0.1, 0.1);
  Param pos = rand_param({4, 6}, rng, -0.3, 0.3);

  auto build = [&](Tape& t) {
    Var xv = add_cols_broadcast(param(t, x), param(t, pos));
    Var flat = reshape(xv, {12, 6});
    flat = layer_norm(flat, param(t, g), param(t, be), 1e-5);
    flat = gelu(linear(flat, param(t, W), Var{}));
    Var back = reshape(flat, {3, 4, 6});
    Var probs;
    Var att = attention(back, back, back, 1.0 / std::sqrt(6.0), &probs);
    return mean_all(square(add(att, xv)));
  };
  CHECK(fd_check({&x, &W, &g, &be, &pos}, build) < kTol);
}

TEST_CASE("backward accumulates into Param::grad across passes") {
  Rng rng(20);
  Param x = rand_param({3}, rng);
  x.zero_grad();
  for (int rep = 0; rep < 2; ++rep) {
    Tape t;
    t.backward(sum_all(square(param(t, x))));
  }
  for (int i = 0; i < 3; ++i)
    CHECK(x.grad.at(i) == doctest::Approx(4.0 * x.value.at(i)).epsilon(1e-12));
}
