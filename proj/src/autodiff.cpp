#include "bstrat/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "bstrat/kernels.hpp"

namespace bstrat::ad {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool needs_grad(Var v) { return v.tape->nodes[static_cast<size_t>(v.id)].requires_grad; }

const Tensor& value(Var v) { return v.tape->nodes[static_cast<size_t>(v.id)].val; }

void same_tape(Var a, Var b, const char* who) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(who) + ": vars on different tapes");
}

void add_into(Tensor& dst, const Tensor& src) {
  for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

double log_sum_exp2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = a > b ? a : b;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

const Tensor& Var::val() const { return tape->nodes[static_cast<size_t>(id)].val; }

void Tape::backward(Var loss) {
  if (!loss.valid() || loss.tape != this)
    throw std::invalid_argument("Tape::backward: invalid loss var");
  if (nodes[static_cast<size_t>(loss.id)].val.numel() != 1)
    throw std::invalid_argument("Tape::backward: loss must be scalar");
  grad(loss.id).v[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes[static_cast<size_t>(i)];
    if (n.grad_alloc && n.requires_grad && n.backward) n.backward(*this, i);
  }
  for (int i = 0; i <= loss.id; ++i) {
    Node& n = nodes[static_cast<size_t>(i)];
    if (n.param && n.grad_alloc) {
      if (n.param->grad.shape != n.param->value.shape) n.param->zero_grad();
      add_into(n.param->grad, n.grad);
    }
  }
}

// ----- leaves ----------------------------------------------------------------

Var constant(Tape& t, Tensor v) { return t.var(t.push(std::move(v), false)); }

Var leaf(Tape& t, Tensor v, bool requires_grad) {
  return t.var(t.push(std::move(v), requires_grad));
}

Var param(Tape& t, Param& p) {
  int id = t.push(p.value, true);
  t.nodes[static_cast<size_t>(id)].param = &p;
  return t.var(id);
}

// ----- elementwise -----------------------------------------------------------

Var add(Var a, Var b) {
  same_tape(a, b, "add");
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
  Tape& t = *a.tape;
  bool rq = needs_grad(a) || needs_grad(b);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id, pb = b.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, pb](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      if (tp.nodes[static_cast<size_t>(pa)].requires_grad) add_into(tp.grad(pa), g);
      if (tp.nodes[static_cast<size_t>(pb)].requires_grad) add_into(tp.grad(pb), g);
    };
  }
  return t.var(id);
}

Var sub(Var a, Var b) {
  same_tape(a, b, "sub");
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv.v[i];
  Tape& t = *a.tape;
  bool rq = needs_grad(a) || needs_grad(b);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id, pb = b.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, pb](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      if (tp.nodes[static_cast<size_t>(pa)].requires_grad) add_into(tp.grad(pa), g);
      if (tp.nodes[static_cast<size_t>(pb)].requires_grad) {
        Tensor& gb = tp.grad(pb);
        for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] -= g.v[i];
      }
    };
  }
  return t.var(id);
}

Var mul(Var a, Var b) {
  same_tape(a, b, "mul");
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv.v[i];
  Tape& t = *a.tape;
  bool rq = needs_grad(a) || needs_grad(b);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id, pb = b.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, pb](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& av2 = tp.nodes[static_cast<size_t>(pa)].val;
      const Tensor& bv2 = tp.nodes[static_cast<size_t>(pb)].val;
      if (tp.nodes[static_cast<size_t>(pa)].requires_grad) {
        Tensor& ga = tp.grad(pa);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g.v[i] * bv2.v[i];
      }
      if (tp.nodes[static_cast<size_t>(pb)].requires_grad) {
        Tensor& gb = tp.grad(pb);
        for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += g.v[i] * av2.v[i];
      }
    };
  }
  return t.var(id);
}

Var scale(Var a, double s) {
  Tensor out = value(a);
  for (double& x : out.v) x *= s;
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, s](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& ga = tp.grad(pa);
      for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += s * g.v[i];
    };
  }
  return t.var(id);
}

Var square(Var a) {
  Tensor out = value(a);
  for (double& x : out.v) x *= x;
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& av = tp.nodes[static_cast<size_t>(pa)].val;
      Tensor& ga = tp.grad(pa);
      for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += 2.0 * av.v[i] * g.v[i];
    };
  }
  return t.var(id);
}

Var reshape(Var a, std::vector<int> shape) {
  Tensor out = value(a).reshaped(std::move(shape));
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& ga = tp.grad(pa);
      for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g.v[i];
    };
  }
  return t.var(id);
}

Var permute01(Var a) {
  const Tensor& av = value(a);
  if (av.ndim() != 3) throw std::invalid_argument("permute01: expects 3-d tensor");
  const int A = av.dim(0), B = av.dim(1), d = av.dim(2);
  Tensor out({B, A, d});
  for (int i = 0; i < A; ++i)
    for (int j = 0; j < B; ++j)
      for (int k = 0; k < d; ++k) out.at(j, i, k) = av.at(i, j, k);
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, A, B, d](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& ga = tp.grad(pa);
      for (int j = 0; j < B; ++j)
        for (int i = 0; i < A; ++i)
          for (int k = 0; k < d; ++k) ga.at(i, j, k) += g.at(j, i, k);
    };
  }
  return t.var(id);
}

Var transpose_last2(Var a) {
  const Tensor& av = value(a);
  if (av.ndim() != 3) throw std::invalid_argument("transpose_last2: expects 3-d tensor");
  const int B = av.dim(0), C = av.dim(1), L = av.dim(2);
  Tensor out({B, L, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int l = 0; l < L; ++l) out.at(b, l, c) = av.at(b, c, l);
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, B, C, L](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& ga = tp.grad(pa);
      for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
          for (int c = 0; c < C; ++c) ga.at(b, c, l) += g.at(b, l, c);
    };
  }
  return t.var(id);
}

Var mean_axis1(Var a) {
  const Tensor& av = value(a);
  if (av.ndim() != 3) throw std::invalid_argument("mean_axis1: expects 3-d tensor");
  const int A = av.dim(0), B = av.dim(1), d = av.dim(2);
  if (B == 0) throw std::invalid_argument("mean_axis1: empty axis");
  Tensor out({A, d});
  const double inv = 1.0 / B;
  for (int i = 0; i < A; ++i)
    for (int j = 0; j < B; ++j)
      for (int k = 0; k < d; ++k) out.at(i, k) += av.at(i, j, k) * inv;
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, A, B, d, inv](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& ga = tp.grad(pa);
      for (int i = 0; i < A; ++i)
        for (int j = 0; j < B; ++j)
          for (int k = 0; k < d; ++k) ga.at(i, j, k) += g.at(i, k) * inv;
    };
  }
  return t.var(id);
}

Var sum_all(Var a) {
  const Tensor& av = value(a);
  double s = 0.0;
  for (double x : av.v) s += x;
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(Tensor::scalar(s), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa](Tape& tp, int self) {
      const double g = tp.nodes[static_cast<size_t>(self)].grad.at(0);
      Tensor& ga = tp.grad(pa);
      for (double& x : ga.v) x += g;
    };
  }
  return t.var(id);
}

Var mean_all(Var a) {
  const Tensor& av = value(a);
  if (av.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
  double s = 0.0;
  for (double x : av.v) s += x;
  const double inv = 1.0 / static_cast<double>(av.numel());
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(Tensor::scalar(s * inv), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, inv](Tape& tp, int self) {
      const double g = tp.nodes[static_cast<size_t>(self)].grad.at(0) * inv;
      Tensor& ga = tp.grad(pa);
      for (double& x : ga.v) x += g;
    };
  }
  return t.var(id);
}

Var gather_rows(Var a, std::vector<int> rows) {
  const Tensor& av = value(a);
  if (av.ndim() != 2) throw std::invalid_argument("gather_rows: expects 2-d tensor");
  const int N = av.dim(0), d = av.dim(1);
  Tensor out({static_cast<int>(rows.size()), d});
  for (size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= N) throw std::invalid_argument("gather_rows: index out of range");
    for (int k = 0; k < d; ++k) out.at(static_cast<int>(r), k) = av.at(rows[r], k);
  }
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, rows = std::move(rows), d](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& ga = tp.grad(pa);
      for (size_t r = 0; r < rows.size(); ++r)
        for (int k = 0; k < d; ++k) ga.at(rows[r], k) += g.at(static_cast<int>(r), k);
    };
  }
  return t.var(id);
}

Var abs_op(Var a) {
  Tensor out = value(a);
  for (double& x : out.v) x = std::abs(x);
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& av = tp.nodes[static_cast<size_t>(pa)].val;
      Tensor& ga = tp.grad(pa);
      for (size_t i = 0; i < ga.v.size(); ++i)
        ga.v[i] += av.v[i] >= 0.0 ? g.v[i] : -g.v[i];  // subgradient 1 at 0
    };
  }
  return t.var(id);
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  Tape& t = *parts[0].tape;
  const int d = value(parts[0]).dim(1);
  int total = 0;
  bool rq = false;
  for (const Var& p : parts) {
    same_tape(parts[0], p, "concat_rows");
    const Tensor& pv = value(p);
    if (pv.ndim() != 2 || pv.dim(1) != d)
      throw std::invalid_argument("concat_rows: inconsistent column count");
    total += pv.dim(0);
    rq = rq || needs_grad(p);
  }
  Tensor out({total, d});
  int row = 0;
  std::vector<int> offsets, ids;
  for (const Var& p : parts) {
    const Tensor& pv = value(p);
    offsets.push_back(row);
    ids.push_back(p.id);
    for (int i = 0; i < pv.dim(0); ++i)
      for (int j = 0; j < d; ++j) out.at(row + i, j) = pv.at(i, j);
    row += pv.dim(0);
  }
  int id = t.push(std::move(out), rq);
  if (rq) {
    t.nodes[static_cast<size_t>(id)].backward = [offsets = std::move(offsets),
                                                 ids = std::move(ids), d](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      for (size_t p = 0; p < ids.size(); ++p) {
        Node& pn = tp.nodes[static_cast<size_t>(ids[p])];
        if (!pn.requires_grad) continue;
        Tensor& gp = tp.grad(ids[p]);
        const int rows = pn.val.dim(0);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < d; ++j) gp.at(i, j) += g.at(offsets[p] + i, j);
      }
    };
  }
  return t.var(id);
}

Var rows_dot(Var a, Var b) {
  same_tape(a, b, "rows_dot");
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.ndim() != 2 || !av.same_shape(bv)) throw std::invalid_argument("rows_dot: shape mismatch");
  const int N = av.dim(0), d = av.dim(1);
  Tensor out({N});
  for (int i = 0; i < N; ++i) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) acc += av.at(i, j) * bv.at(i, j);
    out.at(i) = acc;
  }
  Tape& t = *a.tape;
  bool rq = needs_grad(a) || needs_grad(b);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id, pb = b.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, pb, N, d](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& av2 = tp.nodes[static_cast<size_t>(pa)].val;
      const Tensor& bv2 = tp.nodes[static_cast<size_t>(pb)].val;
      if (tp.nodes[static_cast<size_t>(pa)].requires_grad) {
        Tensor& ga = tp.grad(pa);
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < d; ++j) ga.at(i, j) += g.at(i) * bv2.at(i, j);
      }
      if (tp.nodes[static_cast<size_t>(pb)].requires_grad) {
        Tensor& gb = tp.grad(pb);
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < d; ++j) gb.at(i, j) += g.at(i) * av2.at(i, j);
      }
    };
  }
  return t.var(id);
}

Var mask_replace_rows(Var a, Var token, std::vector<int> rows) {
  same_tape(a, token, "mask_replace_rows");
  const Tensor& av = value(a);
  const Tensor& tv = value(token);
  if (av.ndim() != 2) throw std::invalid_argument("mask_replace_rows: expects 2-d tensor");
  const int N = av.dim(0), d = av.dim(1);
  if (tv.numel() != d) throw std::invalid_argument("mask_replace_rows: token dim mismatch");
  Tensor out = av;
  std::vector<char> is_masked(static_cast<size_t>(N), 0);
  for (int r : rows) {
    if (r < 0 || r >= N) throw std::invalid_argument("mask_replace_rows: index out of range");
    is_masked[static_cast<size_t>(r)] = 1;
    for (int k = 0; k < d; ++k) out.at(r, k) = tv.at(k);
  }
  Tape& t = *a.tape;
  bool rq = needs_grad(a) || needs_grad(token);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id, ptok = token.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, ptok, is_masked = std::move(is_masked), N,
                                                 d](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      if (tp.nodes[static_cast<size_t>(pa)].requires_grad) {
        Tensor& ga = tp.grad(pa);
        for (int r = 0; r < N; ++r) {
          if (is_masked[static_cast<size_t>(r)]) continue;
          for (int k = 0; k < d; ++k) ga.at(r, k) += g.at(r, k);
        }
      }
      if (tp.nodes[static_cast<size_t>(ptok)].requires_grad) {
        Tensor& gt = tp.grad(ptok);
        for (int r = 0; r < N; ++r) {
          if (!is_masked[static_cast<size_t>(r)]) continue;
          for (int k = 0; k < d; ++k) gt.v[static_cast<size_t>(k)] += g.at(r, k);
        }
      }
    };
  }
  return t.var(id);
}

Var unfold_rows(Var a, int window) {
  const Tensor& av = value(a);
  if (av.ndim() != 2) throw std::invalid_argument("unfold_rows: expects 2-d tensor");
  const int N = av.dim(0), d = av.dim(1);
  if (window < 1 || window > N) throw std::invalid_argument("unfold_rows: bad window");
  const int M = N - window + 1;
  Tensor out({M, window * d});
  for (int i = 0; i < M; ++i)
    for (int w = 0; w < window; ++w)
      for (int k = 0; k < d; ++k) out.at(i, w * d + k) = av.at(i + w, k);
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, M, window, d](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& ga = tp.grad(pa);
      for (int i = 0; i < M; ++i)
        for (int w = 0; w < window; ++w)
          for (int k = 0; k < d; ++k) ga.at(i + w, k) += g.at(i, w * d + k);
    };
  }
  return t.var(id);
}

Var add_cols_broadcast(Var a, Var p) {
  same_tape(a, p, "add_cols_broadcast");
  const Tensor& av = value(a);
  const Tensor& pv = value(p);
  if (av.ndim() != 3 || pv.ndim() != 2 || pv.dim(0) != av.dim(1) || pv.dim(1) != av.dim(2))
    throw std::invalid_argument("add_cols_broadcast: shape mismatch");
  const int A = av.dim(0), B = av.dim(1), d = av.dim(2);
  Tensor out = av;
  for (int i = 0; i < A; ++i)
    for (int j = 0; j < B; ++j)
      for (int k = 0; k < d; ++k) out.at(i, j, k) += pv.at(j, k);
  Tape& t = *a.tape;
  bool rq = needs_grad(a) || needs_grad(p);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id, pp = p.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, pp, A, B, d](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      if (tp.nodes[static_cast<size_t>(pa)].requires_grad) add_into(tp.grad(pa), g);
      if (tp.nodes[static_cast<size_t>(pp)].requires_grad) {
        Tensor& gp = tp.grad(pp);
        for (int i = 0; i < A; ++i)
          for (int j = 0; j < B; ++j)
            for (int k = 0; k < d; ++k) gp.at(j, k) += g.at(i, j, k);
      }
    };
  }
  return t.var(id);
}

Var add_rows_broadcast(Var a, Var e) {
  same_tape(a, e, "add_rows_broadcast");
  const Tensor& av = value(a);
  const Tensor& ev = value(e);
  if (av.ndim() != 3 || ev.ndim() != 2 || ev.dim(0) != av.dim(0) || ev.dim(1) != av.dim(2))
    throw std::invalid_argument("add_rows_broadcast: shape mismatch");
  const int A = av.dim(0), B = av.dim(1), d = av.dim(2);
  Tensor out = av;
  for (int i = 0; i < A; ++i)
    for (int j = 0; j < B; ++j)
      for (int k = 0; k < d; ++k) out.at(i, j, k) += ev.at(i, k);
  Tape& t = *a.tape;
  bool rq = needs_grad(a) || needs_grad(e);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id, pe = e.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, pe, A, B, d](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      if (tp.nodes[static_cast<size_t>(pa)].requires_grad) add_into(tp.grad(pa), g);
      if (tp.nodes[static_cast<size_t>(pe)].requires_grad) {
        Tensor& ge = tp.grad(pe);
        for (int i = 0; i < A; ++i)
          for (int j = 0; j < B; ++j)
            for (int k = 0; k < d; ++k) ge.at(i, k) += g.at(i, j, k);
      }
    };
  }
  return t.var(id);
}

Var add_cols_const(Var a, const Tensor& p) {
  const Tensor& av = value(a);
  if (av.ndim() != 3 || p.ndim() != 2 || p.dim(0) != av.dim(1) || p.dim(1) != av.dim(2))
    throw std::invalid_argument("add_cols_const: shape mismatch");
  const int A = av.dim(0), B = av.dim(1), d = av.dim(2);
  Tensor out = av;
  for (int i = 0; i < A; ++i)
    for (int j = 0; j < B; ++j)
      for (int k = 0; k < d; ++k) out.at(i, j, k) += p.at(j, k);
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa](Tape& tp, int self) {
      add_into(tp.grad(pa), tp.nodes[static_cast<size_t>(self)].grad);
    };
  }
  return t.var(id);
}

// ----- activations -----------------------------------------------------------

Var relu(Var a) {
  Tensor out = value(a);
  for (double& x : out.v) x = x > 0.0 ? x : 0.0;
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& av = tp.nodes[static_cast<size_t>(pa)].val;
      Tensor& ga = tp.grad(pa);
      for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += av.v[i] > 0.0 ? g.v[i] : 0.0;
    };
  }
  return t.var(id);
}

Var gelu(Var a) {
  // exact erf formulation: gelu(x) = x * Phi(x)
  Tensor out = value(a);
  for (double& x : out.v) x = x * 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& av = tp.nodes[static_cast<size_t>(pa)].val;
      Tensor& ga = tp.grad(pa);
      constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
      for (size_t i = 0; i < ga.v.size(); ++i) {
        const double x = av.v[i];
        const double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        ga.v[i] += g.v[i] * (phi + x * pdf);
      }
    };
  }
  return t.var(id);
}

Var tanh_act(Var a) {
  Tensor out = value(a);
  for (double& x : out.v) x = std::tanh(x);
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa](Tape& tp, int self) {
      const Node& n = tp.nodes[static_cast<size_t>(self)];
      const Tensor& g = n.grad;
      Tensor& ga = tp.grad(pa);
      for (size_t i = 0; i < ga.v.size(); ++i) {
        const double y = n.val.v[i];
        ga.v[i] += g.v[i] * (1.0 - y * y);
      }
    };
  }
  return t.var(id);
}

Var dropout_mask(Var a, const Tensor& mask) {
  const Tensor& av = value(a);
  if (!av.same_shape(mask)) throw std::invalid_argument("dropout_mask: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= mask.v[i];
  Tape& t = *a.tape;
  bool rq = needs_grad(a);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, mask](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& ga = tp.grad(pa);
      for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g.v[i] * mask.v[i];
    };
  }
  return t.var(id);
}

// ----- linear algebra ---------------------------------------------------------

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: shape mismatch");
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  kernels::matmul_nn(av.data(), bv.data(), out.data(), m, k, n);
  Tape& t = *a.tape;
  bool rq = needs_grad(a) || needs_grad(b);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pa = a.id, pb = b.id;
    t.nodes[static_cast<size_t>(id)].backward = [pa, pb, m, k, n](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& av2 = tp.nodes[static_cast<size_t>(pa)].val;
      const Tensor& bv2 = tp.nodes[static_cast<size_t>(pb)].val;
      if (tp.nodes[static_cast<size_t>(pa)].requires_grad) {
        Tensor scratch({m, k});
        kernels::matmul_nt(g.data(), bv2.data(), scratch.data(), m, n, k);
        add_into(tp.grad(pa), scratch);
      }
      if (tp.nodes[static_cast<size_t>(pb)].requires_grad) {
        Tensor scratch({k, n});
        kernels::matmul_tn(av2.data(), g.data(), scratch.data(), k, m, n);
        add_into(tp.grad(pb), scratch);
      }
    };
  }
  return t.var(id);
}

Var linear(Var x, Var W, Var b) {
  same_tape(x, W, "linear");
  const Tensor& xv = value(x);
  const Tensor& wv = value(W);
  if (xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(0))
    throw std::invalid_argument("linear: shape mismatch");
  const int N = xv.dim(0), din = xv.dim(1), dout = wv.dim(1);
  Tensor out({N, dout});
  kernels::matmul_nn(xv.data(), wv.data(), out.data(), N, din, dout);
  const bool has_bias = b.valid();
  if (has_bias) {
    same_tape(x, b, "linear");
    const Tensor& bv = value(b);
    if (bv.numel() != dout) throw std::invalid_argument("linear: bias dim mismatch");
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < dout; ++j) out.at(i, j) += bv.v[static_cast<size_t>(j)];
  }
  Tape& t = *x.tape;
  bool rq = needs_grad(x) || needs_grad(W) || (has_bias && needs_grad(b));
  int id = t.push(std::move(out), rq);
  if (rq) {
    int px = x.id, pw = W.id, pb = has_bias ? b.id : -1;
    t.nodes[static_cast<size_t>(id)].backward = [px, pw, pb, N, din, dout](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& xv2 = tp.nodes[static_cast<size_t>(px)].val;
      const Tensor& wv2 = tp.nodes[static_cast<size_t>(pw)].val;
      if (tp.nodes[static_cast<size_t>(px)].requires_grad) {
        Tensor scratch({N, din});
        kernels::matmul_nt(g.data(), wv2.data(), scratch.data(), N, dout, din);
        add_into(tp.grad(px), scratch);
      }
      if (tp.nodes[static_cast<size_t>(pw)].requires_grad) {
        Tensor scratch({din, dout});
        kernels::matmul_tn(xv2.data(), g.data(), scratch.data(), din, N, dout);
        add_into(tp.grad(pw), scratch);
      }
      if (pb >= 0 && tp.nodes[static_cast<size_t>(pb)].requires_grad) {
        Tensor& gb = tp.grad(pb);
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < dout; ++j) gb.v[static_cast<size_t>(j)] += g.at(i, j);
      }
    };
  }
  return t.var(id);
}

Var conv1d(Var x, Var w, Var b, int stride, int pad) {
  same_tape(x, w, "conv1d");
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  if (xv.ndim() != 3 || wv.ndim() != 3 || xv.dim(1) != wv.dim(1))
    throw std::invalid_argument("conv1d: shape mismatch");
  const int B = xv.dim(0), Ci = xv.dim(1), L = xv.dim(2);
  const int Co = wv.dim(0), K = wv.dim(2);
  const int Lo = kernels::conv1d_out_len(L, K, stride, pad);
  const bool has_bias = b.valid();
  const double* bias_ptr = nullptr;
  if (has_bias) {
    same_tape(x, b, "conv1d");
    if (value(b).numel() != Co) throw std::invalid_argument("conv1d: bias dim mismatch");
    bias_ptr = value(b).data();
  }
  Tensor out({B, Co, Lo});
  kernels::conv1d_fwd(xv.data(), wv.data(), bias_ptr, out.data(), B, Ci, L, Co, K, stride, pad);
  Tape& t = *x.tape;
  bool rq = needs_grad(x) || needs_grad(w) || (has_bias && needs_grad(b));
  int id = t.push(std::move(out), rq);
  if (rq) {
    int px = x.id, pw = w.id, pb = has_bias ? b.id : -1;
    t.nodes[static_cast<size_t>(id)].backward = [px, pw, pb, B, Ci, L, Co, K, stride,
                                                 pad](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& xv2 = tp.nodes[static_cast<size_t>(px)].val;
      const Tensor& wv2 = tp.nodes[static_cast<size_t>(pw)].val;
      if (tp.nodes[static_cast<size_t>(px)].requires_grad) {
        Tensor dx({B, Ci, L});
        kernels::conv1d_bwd_input(g.data(), wv2.data(), dx.data(), B, Ci, L, Co, K, stride, pad);
        add_into(tp.grad(px), dx);
      }
      const bool want_w = tp.nodes[static_cast<size_t>(pw)].requires_grad;
      const bool want_b = pb >= 0 && tp.nodes[static_cast<size_t>(pb)].requires_grad;
      if (want_w || want_b) {
        Tensor dw({Co, Ci, K});
        Tensor db({Co});
        kernels::conv1d_bwd_params(g.data(), xv2.data(), dw.data(), want_b ? db.data() : nullptr,
                                   B, Ci, L, Co, K, stride, pad);
        if (want_w) add_into(tp.grad(pw), dw);
        if (want_b) add_into(tp.grad(pb), db);
      }
    };
  }
  return t.var(id);
}

Var conv1d_transpose(Var x, Var w, Var b, int stride, int pad, int out_pad) {
  same_tape(x, w, "conv1d_transpose");
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  if (xv.ndim() != 3 || wv.ndim() != 3 || xv.dim(1) != wv.dim(0))
    throw std::invalid_argument("conv1d_transpose: shape mismatch");
  const int B = xv.dim(0), Ci = xv.dim(1), L = xv.dim(2);
  const int Co = wv.dim(1), K = wv.dim(2);
  const int Lo = kernels::conv1d_transpose_out_len(L, K, stride, pad, out_pad);
  const bool has_bias = b.valid();
  const double* bias_ptr = nullptr;
  if (has_bias) {
    same_tape(x, b, "conv1d_transpose");
    if (value(b).numel() != Co) throw std::invalid_argument("conv1d_transpose: bias dim mismatch");
    bias_ptr = value(b).data();
  }
  Tensor out({B, Co, Lo});
  kernels::conv1d_transpose_fwd(xv.data(), wv.data(), bias_ptr, out.data(), B, Ci, L, Co, K,
                                stride, pad, out_pad);
  Tape& t = *x.tape;
  bool rq = needs_grad(x) || needs_grad(w) || (has_bias && needs_grad(b));
  int id = t.push(std::move(out), rq);
  if (rq) {
    int px = x.id, pw = w.id, pb = has_bias ? b.id : -1;
    t.nodes[static_cast<size_t>(id)].backward = [px, pw, pb, B, Ci, L, Co, K, stride, pad,
                                                 out_pad](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& xv2 = tp.nodes[static_cast<size_t>(px)].val;
      const Tensor& wv2 = tp.nodes[static_cast<size_t>(pw)].val;
      if (tp.nodes[static_cast<size_t>(px)].requires_grad) {
        Tensor dx({B, Ci, L});
        kernels::conv1d_transpose_bwd_input(g.data(), wv2.data(), dx.data(), B, Ci, L, Co, K,
                                            stride, pad, out_pad);
        add_into(tp.grad(px), dx);
      }
      const bool want_w = tp.nodes[static_cast<size_t>(pw)].requires_grad;
      const bool want_b = pb >= 0 && tp.nodes[static_cast<size_t>(pb)].requires_grad;
      if (want_w || want_b) {
        Tensor dw({Ci, Co, K});
        Tensor db({Co});
        kernels::conv1d_transpose_bwd_params(g.data(), xv2.data(), dw.data(),
                                             want_b ? db.data() : nullptr, B, Ci, L, Co, K,
                                             stride, pad, out_pad);
        if (want_w) add_into(tp.grad(pw), dw);
        if (want_b) add_into(tp.grad(pb), db);
      }
    };
  }
  return t.var(id);
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  same_tape(x, gamma, "layer_norm");
  same_tape(x, beta, "layer_norm");
  const Tensor& xv = value(x);
  if (xv.ndim() != 2) throw std::invalid_argument("layer_norm: expects 2-d tensor");
  const int N = xv.dim(0), d = xv.dim(1);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  if (gv.numel() != d || bv.numel() != d)
    throw std::invalid_argument("layer_norm: gamma/beta dim mismatch");
  Tensor out({N, d});
  Tensor xhat({N, d});
  Tensor inv_std({N});
  for (int i = 0; i < N; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xv.at(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xv.at(i, j) - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std.at(i) = inv;
    for (int j = 0; j < d; ++j) {
      const double h = (xv.at(i, j) - mean) * inv;
      xhat.at(i, j) = h;
      out.at(i, j) = gv.v[static_cast<size_t>(j)] * h + bv.v[static_cast<size_t>(j)];
    }
  }
  Tape& t = *x.tape;
  bool rq = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int px = x.id, pg = gamma.id, pb = beta.id;
    t.nodes[static_cast<size_t>(id)].backward = [px, pg, pb, N, d, xhat = std::move(xhat),
                                                 inv_std = std::move(inv_std)](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& gv2 = tp.nodes[static_cast<size_t>(pg)].val;
      if (tp.nodes[static_cast<size_t>(px)].requires_grad) {
        Tensor& gx = tp.grad(px);
        for (int i = 0; i < N; ++i) {
          double mean_gy = 0.0, mean_gyxh = 0.0;
          for (int j = 0; j < d; ++j) {
            const double gy = g.at(i, j) * gv2.v[static_cast<size_t>(j)];
            mean_gy += gy;
            mean_gyxh += gy * xhat.at(i, j);
          }
          mean_gy /= d;
          mean_gyxh /= d;
          const double inv = inv_std.at(i);
          for (int j = 0; j < d; ++j) {
            const double gy = g.at(i, j) * gv2.v[static_cast<size_t>(j)];
            gx.at(i, j) += inv * (gy - mean_gy - xhat.at(i, j) * mean_gyxh);
          }
        }
      }
      if (tp.nodes[static_cast<size_t>(pg)].requires_grad) {
        Tensor& gg = tp.grad(pg);
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < d; ++j) gg.v[static_cast<size_t>(j)] += g.at(i, j) * xhat.at(i, j);
      }
      if (tp.nodes[static_cast<size_t>(pb)].requires_grad) {
        Tensor& gb = tp.grad(pb);
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < d; ++j) gb.v[static_cast<size_t>(j)] += g.at(i, j);
      }
    };
  }
  return t.var(id);
}

Var group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  same_tape(x, gamma, "group_norm");
  same_tape(x, beta, "group_norm");
  const Tensor& xv = value(x);
  if (xv.ndim() != 3) throw std::invalid_argument("group_norm: expects 3-d tensor");
  const int B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  if (groups < 1 || C % groups != 0)
    throw std::invalid_argument("group_norm: groups must divide channels");
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  if (gv.numel() != C || bv.numel() != C)
    throw std::invalid_argument("group_norm: gamma/beta dim mismatch");
  const int cg = C / groups;
  const int group_n = cg * L;
  Tensor out({B, C, L});
  Tensor xhat({B, C, L});
  Tensor inv_std({B, groups});
  for (int b = 0; b < B; ++b) {
    for (int gidx = 0; gidx < groups; ++gidx) {
      double mean = 0.0;
      for (int c = gidx * cg; c < (gidx + 1) * cg; ++c)
        for (int l = 0; l < L; ++l) mean += xv.at(b, c, l);
      mean /= group_n;
      double var = 0.0;
      for (int c = gidx * cg; c < (gidx + 1) * cg; ++c)
        for (int l = 0; l < L; ++l) {
          const double d = xv.at(b, c, l) - mean;
          var += d * d;
        }
      var /= group_n;
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std.at(b, gidx) = inv;
      for (int c = gidx * cg; c < (gidx + 1) * cg; ++c)
        for (int l = 0; l < L; ++l) {
          const double h = (xv.at(b, c, l) - mean) * inv;
          xhat.at(b, c, l) = h;
          out.at(b, c, l) = gv.v[static_cast<size_t>(c)] * h + bv.v[static_cast<size_t>(c)];
        }
    }
  }
  Tape& t = *x.tape;
  bool rq = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int px = x.id, pg = gamma.id, pb = beta.id;
    t.nodes[static_cast<size_t>(id)].backward = [px, pg, pb, B, C, L, groups, cg, group_n,
                                                 xhat = std::move(xhat),
                                                 inv_std = std::move(inv_std)](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& gv2 = tp.nodes[static_cast<size_t>(pg)].val;
      if (tp.nodes[static_cast<size_t>(px)].requires_grad) {
        Tensor& gx = tp.grad(px);
        for (int b = 0; b < B; ++b) {
          for (int gidx = 0; gidx < groups; ++gidx) {
            double mean_gy = 0.0, mean_gyxh = 0.0;
            for (int c = gidx * cg; c < (gidx + 1) * cg; ++c)
              for (int l = 0; l < L; ++l) {
                const double gy = g.at(b, c, l) * gv2.v[static_cast<size_t>(c)];
                mean_gy += gy;
                mean_gyxh += gy * xhat.at(b, c, l);
              }
            mean_gy /= group_n;
            mean_gyxh /= group_n;
            const double inv = inv_std.at(b, gidx);
            for (int c = gidx * cg; c < (gidx + 1) * cg; ++c)
              for (int l = 0; l < L; ++l) {
                const double gy = g.at(b, c, l) * gv2.v[static_cast<size_t>(c)];
                gx.at(b, c, l) += inv * (gy - mean_gy - xhat.at(b, c, l) * mean_gyxh);
              }
          }
        }
      }
      if (tp.nodes[static_cast<size_t>(pg)].requires_grad) {
        Tensor& gg = tp.grad(pg);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            for (int l = 0; l < L; ++l)
              gg.v[static_cast<size_t>(c)] += g.at(b, c, l) * xhat.at(b, c, l);
      }
      if (tp.nodes[static_cast<size_t>(pb)].requires_grad) {
        Tensor& gb = tp.grad(pb);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            for (int l = 0; l < L; ++l) gb.v[static_cast<size_t>(c)] += g.at(b, c, l);
      }
    };
  }
  return t.var(id);
}

// ----- attention --------------------------------------------------------------

Var attention(Var q, Var k, Var v, double att_scale, Var* probs_out) {
  same_tape(q, k, "attention");
  same_tape(q, v, "attention");
  const Tensor& qv = value(q);
  const Tensor& kv = value(k);
  const Tensor& vv = value(v);
  if (qv.ndim() != 3 || !qv.same_shape(kv) || !qv.same_shape(vv))
    throw std::invalid_argument("attention: q/k/v must share [S,L,hd] shape");
  const int S = qv.dim(0), L = qv.dim(1), hd = qv.dim(2);
  Tensor probs({S, L, L});
  Tensor out({S, L, hd});
  kernels::attention_fwd(qv.data(), kv.data(), vv.data(), probs.data(), out.data(), S, L, hd,
                         att_scale);
  Tape& t = *q.tape;
  // probabilities are exposed read-only (connectivity extraction); no gradient
  // flows through this node.
  int pid = t.push(std::move(probs), false);
  if (probs_out) *probs_out = t.var(pid);
  bool rq = needs_grad(q) || needs_grad(k) || needs_grad(v);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int pq = q.id, pk = k.id, pv = v.id;
    t.nodes[static_cast<size_t>(id)].backward = [pq, pk, pv, pid, S, L, hd,
                                                 att_scale](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      const Tensor& qv2 = tp.nodes[static_cast<size_t>(pq)].val;
      const Tensor& kv2 = tp.nodes[static_cast<size_t>(pk)].val;
      const Tensor& vv2 = tp.nodes[static_cast<size_t>(pv)].val;
      const Tensor& pv2 = tp.nodes[static_cast<size_t>(pid)].val;
      Tensor dq({S, L, hd}), dk({S, L, hd}), dv({S, L, hd});
      kernels::attention_bwd(qv2.data(), kv2.data(), vv2.data(), pv2.data(), g.data(), dq.data(),
                             dk.data(), dv.data(), S, L, hd, att_scale);
      if (tp.nodes[static_cast<size_t>(pq)].requires_grad) add_into(tp.grad(pq), dq);
      if (tp.nodes[static_cast<size_t>(pk)].requires_grad) add_into(tp.grad(pk), dk);
      if (tp.nodes[static_cast<size_t>(pv)].requires_grad) add_into(tp.grad(pv), dv);
    };
  }
  return t.var(id);
}

Var split_heads(Var x, int S, int L, int H) {
  const Tensor& xv = value(x);
  if (xv.ndim() != 3 || xv.dim(0) != S || xv.dim(1) != L || xv.dim(2) % H != 0)
    throw std::invalid_argument("split_heads: shape mismatch");
  const int d = xv.dim(2), hd = d / H;
  Tensor out({S * H, L, hd});
  for (int s = 0; s < S; ++s)
    for (int h = 0; h < H; ++h)
      for (int l = 0; l < L; ++l)
        for (int j = 0; j < hd; ++j) out.at(s * H + h, l, j) = xv.at(s, l, h * hd + j);
  Tape& t = *x.tape;
  bool rq = needs_grad(x);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int px = x.id;
    t.nodes[static_cast<size_t>(id)].backward = [px, S, L, H, hd](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& gx = tp.grad(px);
      for (int s = 0; s < S; ++s)
        for (int h = 0; h < H; ++h)
          for (int l = 0; l < L; ++l)
            for (int j = 0; j < hd; ++j) gx.at(s, l, h * hd + j) += g.at(s * H + h, l, j);
    };
  }
  return t.var(id);
}

Var merge_heads(Var x, int S, int L, int H) {
  const Tensor& xv = value(x);
  if (xv.ndim() != 3 || xv.dim(0) != S * H || xv.dim(1) != L)
    throw std::invalid_argument("merge_heads: shape mismatch");
  const int hd = xv.dim(2);
  Tensor out({S, L, H * hd});
  for (int s = 0; s < S; ++s)
    for (int h = 0; h < H; ++h)
      for (int l = 0; l < L; ++l)
        for (int j = 0; j < hd; ++j) out.at(s, l, h * hd + j) = xv.at(s * H + h, l, j);
  Tape& t = *x.tape;
  bool rq = needs_grad(x);
  int id = t.push(std::move(out), rq);
  if (rq) {
    int px = x.id;
    t.nodes[static_cast<size_t>(id)].backward = [px, S, L, H, hd](Tape& tp, int self) {
      const Tensor& g = tp.nodes[static_cast<size_t>(self)].grad;
      Tensor& gx = tp.grad(px);
      for (int s = 0; s < S; ++s)
        for (int h = 0; h < H; ++h)
          for (int l = 0; l < L; ++l)
            for (int j = 0; j < hd; ++j) gx.at(s * H + h, l, j) += g.at(s, l, h * hd + j);
    };
  }
  return t.var(id);
}

// ----- quantization bridge -----------------------------------------------------

Var straight_through(Var x, const Tensor& quantized) {
  const Tensor& xv = value(x);
  if (!xv.same_shape(quantized))
    throw std::invalid_argument("straight_through: quantized shape mismatch");
  Tape& t = *x.tape;
  bool rq = needs_grad(x);
  int id = t.push(quantized, rq);
  if (rq) {
    int px = x.id;
    t.nodes[static_cast<size_t>(id)].backward = [px](Tape& tp, int self) {
      add_into(tp.grad(px), tp.nodes[static_cast<size_t>(self)].grad);
    };
  }
  return t.var(id);
}

Var detach(Var x) { return constant(*x.tape, value(x)); }

// ----- losses -------------------------------------------------------------------

Var bce_with_logits_mean(Var logits, const Tensor& targets01) {
  const Tensor& lv = value(logits);
  const int64_t N = lv.numel();
  if (N == 0 || targets01.numel() != N)
    throw std::invalid_argument("bce_with_logits_mean: size mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < N; ++i) {
    const double x = lv.v[static_cast<size_t>(i)];
    const double tgt = targets01.v[static_cast<size_t>(i)];
    acc += std::max(x, 0.0) - tgt * x + std::log1p(std::exp(-std::abs(x)));
  }
  Tape& t = *logits.tape;
  bool rq = needs_grad(logits);
  int id = t.push(Tensor::scalar(acc / static_cast<double>(N)), rq);
  if (rq) {
    int pl = logits.id;
    t.nodes[static_cast<size_t>(id)].backward = [pl, targets01, N](Tape& tp, int self) {
      const double g = tp.nodes[static_cast<size_t>(self)].grad.at(0) / static_cast<double>(N);
      const Tensor& lv2 = tp.nodes[static_cast<size_t>(pl)].val;
      Tensor& gl = tp.grad(pl);
      for (int64_t i = 0; i < N; ++i) {
        const double x = lv2.v[static_cast<size_t>(i)];
        const double sig = 1.0 / (1.0 + std::exp(-x));
        gl.v[static_cast<size_t>(i)] += g * (sig - targets01.v[static_cast<size_t>(i)]);
      }
    };
  }
  return t.var(id);
}

Var cross_entropy_rows(Var logits, std::vector<int> targets, std::vector<double> row_weights) {
  const Tensor& lv = value(logits);
  if (lv.ndim() != 2) throw std::invalid_argument("cross_entropy_rows: expects 2-d logits");
  const int N = lv.dim(0), K = lv.dim(1);
  if (targets.size() != static_cast<size_t>(N) || row_weights.size() != static_cast<size_t>(N))
    throw std::invalid_argument("cross_entropy_rows: size mismatch");
  double acc = 0.0;
  for (int i = 0; i < N; ++i) {
    if (targets[static_cast<size_t>(i)] < 0) row_weights[static_cast<size_t>(i)] = 0.0;
    const double w = row_weights[static_cast<size_t>(i)];
    if (w == 0.0) continue;
    const int tgt = targets[static_cast<size_t>(i)];
    if (tgt >= K) throw std::invalid_argument("cross_entropy_rows: target out of range");
    double mx = lv.at(i, 0);
    for (int j = 1; j < K; ++j) mx = std::max(mx, lv.at(i, j));
    double se = 0.0;
    for (int j = 0; j < K; ++j) se += std::exp(lv.at(i, j) - mx);
    acc += w * (mx + std::log(se) - lv.at(i, tgt));
  }
  Tape& t = *logits.tape;
  bool rq = needs_grad(logits);
  int id = t.push(Tensor::scalar(acc), rq);
  if (rq) {
    int pl = logits.id;
    t.nodes[static_cast<size_t>(id)].backward = [pl, targets = std::move(targets),
                                                 row_weights = std::move(row_weights), N,
                                                 K](Tape& tp, int self) {
      const double g = tp.nodes[static_cast<size_t>(self)].grad.at(0);
      const Tensor& lv2 = tp.nodes[static_cast<size_t>(pl)].val;
      Tensor& gl = tp.grad(pl);
      for (int i = 0; i < N; ++i) {
        const double w = row_weights[static_cast<size_t>(i)];
        if (w == 0.0) continue;
        double mx = lv2.at(i, 0);
        for (int j = 1; j < K; ++j) mx = std::max(mx, lv2.at(i, j));
        double se = 0.0;
        for (int j = 0; j < K; ++j) se += std::exp(lv2.at(i, j) - mx);
        const double inv = 1.0 / se;
        const int tgt = targets[static_cast<size_t>(i)];
        for (int j = 0; j < K; ++j) {
          const double p = std::exp(lv2.at(i, j) - mx) * inv;
          gl.at(i, j) += g * w * (p - (j == tgt ? 1.0 : 0.0));
        }
      }
    };
  }
  return t.var(id);
}

Var ctc_loss(Var logits, std::vector<int> labels, int blank) {
  const Tensor& lv = value(logits);
  if (lv.ndim() != 2) throw std::invalid_argument("ctc_loss: expects [T,K] logits");
  const int T = lv.dim(0), K = lv.dim(1);
  if (blank < 0 || blank >= K) throw std::invalid_argument("ctc_loss: bad blank index");
  const int U = static_cast<int>(labels.size());
  int repeats = 0;
  for (int u = 0; u < U; ++u) {
    if (labels[static_cast<size_t>(u)] < 0 || labels[static_cast<size_t>(u)] >= K)
      throw std::invalid_argument("ctc_loss: label out of range");
    if (labels[static_cast<size_t>(u)] == blank)
      throw std::invalid_argument("ctc_loss: labels must not contain blank");
    if (u > 0 && labels[static_cast<size_t>(u)] == labels[static_cast<size_t>(u - 1)]) ++repeats;
  }
  if (T < U + repeats)
    throw std::invalid_argument("ctc_loss: input too short for label sequence");

  // log-softmax per frame
  Tensor logp({T, K});
  for (int tt = 0; tt < T; ++tt) {
    double mx = lv.at(tt, 0);
    for (int j = 1; j < K; ++j) mx = std::max(mx, lv.at(tt, j));
    double se = 0.0;
    for (int j = 0; j < K; ++j) se += std::exp(lv.at(tt, j) - mx);
    const double lse = mx + std::log(se);
    for (int j = 0; j < K; ++j) logp.at(tt, j) = lv.at(tt, j) - lse;
  }

  // extended label sequence: blank, l1, blank, l2, ..., blank
  const int S = 2 * U + 1;
  auto ext = [&](int s) { return (s % 2 == 0) ? blank : labels[static_cast<size_t>(s / 2)]; };

  Tensor alpha({T, S}, kNegInf), beta_t({T, S}, kNegInf);
  alpha.at(0, 0) = logp.at(0, ext(0));
  if (S > 1) alpha.at(0, 1) = logp.at(0, ext(1));
  for (int tt = 1; tt < T; ++tt) {
    for (int s = 0; s < S; ++s) {
      double best = alpha.at(tt - 1, s);
      if (s >= 1) best = log_sum_exp2(best, alpha.at(tt - 1, s - 1));
      if (s >= 2 && ext(s) != blank && ext(s) != ext(s - 2))
        best = log_sum_exp2(best, alpha.at(tt - 1, s - 2));
      alpha.at(tt, s) = best + logp.at(tt, ext(s));
    }
  }
  double log_lik = alpha.at(T - 1, S - 1);
  if (S > 1) log_lik = log_sum_exp2(log_lik, alpha.at(T - 1, S - 2));

  beta_t.at(T - 1, S - 1) = 0.0;
  if (S > 1) beta_t.at(T - 1, S - 2) = 0.0;
  for (int tt = T - 2; tt >= 0; --tt) {
    for (int s = S - 1; s >= 0; --s) {
      double best = beta_t.at(tt + 1, s) + logp.at(tt + 1, ext(s));
      if (s + 1 < S) best = log_sum_exp2(best, beta_t.at(tt + 1, s + 1) + logp.at(tt + 1, ext(s + 1)));
      if (s + 2 < S && ext(s + 2) != blank && ext(s + 2) != ext(s))
        best = log_sum_exp2(best, beta_t.at(tt + 1, s + 2) + logp.at(tt + 1, ext(s + 2)));
      beta_t.at(tt, s) = best;
    }
  }

  // gradient wrt logits: softmax - sum of state posteriors per symbol
  Tensor dlogits({T, K});
  for (int tt = 0; tt < T; ++tt) {
    std::vector<double> post(static_cast<size_t>(K), kNegInf);
    for (int s = 0; s < S; ++s) {
      const double gamma = alpha.at(tt, s) + beta_t.at(tt, s) - log_lik;
      const int sym = ext(s);
      post[static_cast<size_t>(sym)] = log_sum_exp2(post[static_cast<size_t>(sym)], gamma);
    }
    // d(-logP)/du_tk = softmax_tk - gamma_t(k), gamma = symbol posterior
    for (int j = 0; j < K; ++j) {
      const double p = std::exp(logp.at(tt, j));
      const double gamma_k =
          post[static_cast<size_t>(j)] == kNegInf ? 0.0 : std::exp(post[static_cast<size_t>(j)]);
      dlogits.at(tt, j) = p - gamma_k;
    }
  }

  Tape& t = *logits.tape;
  bool rq = needs_grad(logits);
  int id = t.push(Tensor::scalar(-log_lik), rq);
  if (rq) {
    int pl = logits.id;
    t.nodes[static_cast<size_t>(id)].backward = [pl, dlogits = std::move(dlogits)](Tape& tp,
                                                                                   int self) {
      const double g = tp.nodes[static_cast<size_t>(self)].grad.at(0);
      Tensor& gl = tp.grad(pl);
      for (size_t i = 0; i < gl.v.size(); ++i) gl.v[i] += g * dlogits.v[i];
    };
  }
  return t.var(id);
}

}  // namespace bstrat::ad
