#pragma once
// Shared helpers for the test binaries: random tensor fills and the central
// finite-difference gradient harness every analytic gradient is checked
// against.

#include <cmath>
#include <functional>
#include <vector>

#include "bstrat/autodiff.hpp"
#include "bstrat/rng.hpp"
#include "bstrat/tensor.hpp"

namespace bstrat::testing {

inline void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (auto& x : t.v) x = rng.uniform(lo, hi);
}

inline void fill_normal(Tensor& t, Rng& rng, double stddev = 1.0) {
  for (auto& x : t.v) x = rng.normal(0.0, stddev);
}

// Relative error of an analytic gradient component against its central
// finite-difference estimate.  The 1e-3 floor in the denominator turns the
// comparison into an absolute one for near-zero gradients, where the FD
// estimate is dominated by O(eps^2) truncation noise; any real gradient bug
// shows up orders of magnitude above it.
inline double grad_rel_err(double analytic, double fd) {
  double denom = std::max({1e-3, std::fabs(analytic), std::fabs(fd)});
  return std::fabs(analytic - fd) / denom;
}

// Checks d(loss)/d(param) for every listed parameter against float64 central
// differences of `loss_fn`, which must rebuild the loss from current
// parameter values (and must be deterministic).  Analytic gradients are
// computed by this function.  Returns the worst per-component relative error.
inline double fd_check(const std::vector<ad::Param*>& params,
                       const std::function<ad::Var(ad::Tape&)>& build_loss,
                       double eps = 1e-5) {
  // Analytic pass.
  for (auto* p : params) p->zero_grad();
  ad::Tape tape;
  ad::Var loss = build_loss(tape);
  tape.backward(loss);

  auto eval = [&]() {
    ad::Tape t2;
    return build_loss(t2).scalar();
  };

  double worst = 0.0;
  for (auto* p : params) {
    for (size_t i = 0; i < p->value.v.size(); ++i) {
      const double saved = p->value.v[i];
      p->value.v[i] = saved + eps;
      const double f1 = eval();
      p->value.v[i] = saved - eps;
      const double f2 = eval();
      p->value.v[i] = saved;
      const double fd = (f1 - f2) / (2.0 * eps);
      worst = std::max(worst, grad_rel_err(p->grad.v[i], fd));
    }
  }
  return worst;
}

}  // namespace bstrat::testing
