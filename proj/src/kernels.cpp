#include "bstrat/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bstrat::kernels {

namespace {
std::atomic<bool> g_parallel{true};

// Below this many multiply-accumulates the fork/join overhead dominates.
constexpr int64_t kParallelThreshold = 1 << 14;

inline bool go_parallel(int64_t work) {
#ifdef _OPENMP
  return g_parallel.load(std::memory_order_relaxed) && work >= kParallelThreshold &&
         omp_get_max_threads() > 1;
#else
  (void)work;
  return false;
#endif
}
}  // namespace

void set_parallel(bool enabled) { g_parallel.store(enabled, std::memory_order_relaxed); }
bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// ===== matmul ================================================================

void matmul_nn_serial(const double* A, const double* B, double* Y, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* yi = Y + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) yi[j] = 0.0;
    const double* ai = A + static_cast<int64_t>(i) * k;
    for (int l = 0; l < k; ++l) {
      const double a = ai[l];
      const double* bl = B + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) yi[j] += a * bl[j];
    }
  }
}

void matmul_nn_omp(const double* A, const double* B, double* Y, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* yi = Y + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) yi[j] = 0.0;
    const double* ai = A + static_cast<int64_t>(i) * k;
    for (int l = 0; l < k; ++l) {
      const double a = ai[l];
      const double* bl = B + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) yi[j] += a * bl[j];
    }
  }
}

void matmul_nn(const double* A, const double* B, double* Y, int m, int k, int n) {
  if (go_parallel(static_cast<int64_t>(m) * k * n))
    matmul_nn_omp(A, B, Y, m, k, n);
  else
    matmul_nn_serial(A, B, Y, m, k, n);
}

void matmul_nt_serial(const double* A, const double* B, double* Y, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = A + static_cast<int64_t>(i) * k;
    double* yi = Y + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = B + static_cast<int64_t>(j) * k;
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += ai[l] * bj[l];
      yi[j] = acc;
    }
  }
}

void matmul_nt_omp(const double* A, const double* B, double* Y, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const double* ai = A + static_cast<int64_t>(i) * k;
    double* yi = Y + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = B + static_cast<int64_t>(j) * k;
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += ai[l] * bj[l];
      yi[j] = acc;
    }
  }
}

void matmul_nt(const double* A, const double* B, double* Y, int m, int k, int n) {
  if (go_parallel(static_cast<int64_t>(m) * k * n))
    matmul_nt_omp(A, B, Y, m, k, n);
  else
    matmul_nt_serial(A, B, Y, m, k, n);
}

void matmul_tn_serial(const double* A, const double* B, double* Y, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* yi = Y + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) yi[j] = 0.0;
    for (int l = 0; l < k; ++l) {
      const double a = A[static_cast<int64_t>(l) * m + i];
      const double* bl = B + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) yi[j] += a * bl[j];
    }
  }
}

void matmul_tn_omp(const double* A, const double* B, double* Y, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* yi = Y + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) yi[j] = 0.0;
    for (int l = 0; l < k; ++l) {
      const double a = A[static_cast<int64_t>(l) * m + i];
      const double* bl = B + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) yi[j] += a * bl[j];
    }
  }
}

void matmul_tn(const double* A, const double* B, double* Y, int m, int k, int n) {
  if (go_parallel(static_cast<int64_t>(m) * k * n))
    matmul_tn_omp(A, B, Y, m, k, n);
  else
    matmul_tn_serial(A, B, Y, m, k, n);
}

// ===== conv1d ================================================================

int conv1d_out_len(int L, int K, int stride, int pad) {
  int lo = (L + 2 * pad - K) / stride + 1;
  if (lo <= 0) throw std::invalid_argument("conv1d: output length would be non-positive");
  return lo;
}

void conv1d_fwd_serial(const double* x, const double* w, const double* bias, double* y,
                       int B, int Ci, int L, int Co, int K, int stride, int pad) {
  const int Lo = conv1d_out_len(L, K, stride, pad);
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Co; ++co) {
      const double* xb = x + static_cast<int64_t>(b) * Ci * L;
      const double* wc = w + static_cast<int64_t>(co) * Ci * K;
      double* yrow = y + (static_cast<int64_t>(b) * Co + co) * Lo;
      for (int lo = 0; lo < Lo; ++lo) {
        double acc = bias ? bias[co] : 0.0;
        const int start = lo * stride - pad;
        for (int ci = 0; ci < Ci; ++ci) {
          const double* xc = xb + static_cast<int64_t>(ci) * L;
          const double* wk = wc + static_cast<int64_t>(ci) * K;
          for (int t = 0; t < K; ++t) {
            const int l = start + t;
            if (l >= 0 && l < L) acc += wk[t] * xc[l];
          }
        }
        yrow[lo] = acc;
      }
    }
  }
}

void conv1d_fwd_omp(const double* x, const double* w, const double* bias, double* y,
                    int B, int Ci, int L, int Co, int K, int stride, int pad) {
  const int Lo = conv1d_out_len(L, K, stride, pad);
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Co; ++co) {
      const double* xb = x + static_cast<int64_t>(b) * Ci * L;
      const double* wc = w + static_cast<int64_t>(co) * Ci * K;
      double* yrow = y + (static_cast<int64_t>(b) * Co + co) * Lo;
      for (int lo = 0; lo < Lo; ++lo) {
        double acc = bias ? bias[co] : 0.0;
        const int start = lo * stride - pad;
        for (int ci = 0; ci < Ci; ++ci) {
          const double* xc = xb + static_cast<int64_t>(ci) * L;
          const double* wk = wc + static_cast<int64_t>(ci) * K;
          for (int t = 0; t < K; ++t) {
            const int l = start + t;
            if (l >= 0 && l < L) acc += wk[t] * xc[l];
          }
        }
        yrow[lo] = acc;
      }
    }
  }
}

void conv1d_fwd(const double* x, const double* w, const double* bias, double* y,
                int B, int Ci, int L, int Co, int K, int stride, int pad) {
  const int Lo = conv1d_out_len(L, K, stride, pad);
  const int64_t work = static_cast<int64_t>(B) * Co * Lo * Ci * K;
  if (go_parallel(work))
    conv1d_fwd_omp(x, w, bias, y, B, Ci, L, Co, K, stride, pad);
  else
    conv1d_fwd_serial(x, w, bias, y, B, Ci, L, Co, K, stride, pad);
}

void conv1d_bwd_input(const double* dy, const double* w, double* dx,
                      int B, int Ci, int L, int Co, int K, int stride, int pad) {
  const int Lo = conv1d_out_len(L, K, stride, pad);
  const int64_t work = static_cast<int64_t>(B) * Ci * L * Co * (K / stride + 1);
  const bool par = go_parallel(work);
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int b = 0; b < B; ++b) {
    for (int ci = 0; ci < Ci; ++ci) {
      double* dxc = dx + (static_cast<int64_t>(b) * Ci + ci) * L;
      for (int l = 0; l < L; ++l) {
        // y[lo] touched x[l] iff lo*stride - pad + t == l for some t in [0,K)
        double acc = 0.0;
        const int num = l + pad;
        int lo_hi = num / stride;
        if (lo_hi >= Lo) lo_hi = Lo - 1;
        int lo_lo = (num - (K - 1) + stride - 1) / stride;
        if (num - (K - 1) < 0) lo_lo = 0;
        if (lo_lo < 0) lo_lo = 0;
        for (int lo = lo_lo; lo <= lo_hi; ++lo) {
          const int t = num - lo * stride;
          if (t < 0 || t >= K) continue;
          for (int co = 0; co < Co; ++co) {
            acc += dy[(static_cast<int64_t>(b) * Co + co) * Lo + lo] *
                   w[(static_cast<int64_t>(co) * Ci + ci) * K + t];
          }
        }
        dxc[l] = acc;
      }
    }
  }
}

void conv1d_bwd_params(const double* dy, const double* x, double* dw, double* dbias,
                       int B, int Ci, int L, int Co, int K, int stride, int pad) {
  const int Lo = conv1d_out_len(L, K, stride, pad);
  const int64_t work = static_cast<int64_t>(Co) * Ci * K * B * Lo;
  const bool par = go_parallel(work);
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int co = 0; co < Co; ++co) {
    for (int ci = 0; ci < Ci; ++ci) {
      for (int t = 0; t < K; ++t) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
          const double* dyrow = dy + (static_cast<int64_t>(b) * Co + co) * Lo;
          const double* xc = x + (static_cast<int64_t>(b) * Ci + ci) * L;
          for (int lo = 0; lo < Lo; ++lo) {
            const int l = lo * stride - pad + t;
            if (l >= 0 && l < L) acc += dyrow[lo] * xc[l];
          }
        }
        dw[(static_cast<int64_t>(co) * Ci + ci) * K + t] = acc;
      }
    }
  }
  if (dbias) {
    for (int co = 0; co < Co; ++co) {
      double acc = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* dyrow = dy + (static_cast<int64_t>(b) * Co + co) * Lo;
        for (int lo = 0; lo < Lo; ++lo) acc += dyrow[lo];
      }
      dbias[co] = acc;
    }
  }
}

// ===== transposed conv1d =====================================================

int conv1d_transpose_out_len(int L, int K, int stride, int pad, int out_pad) {
  int lo = (L - 1) * stride + K - 2 * pad + out_pad;
  if (lo <= 0) throw std::invalid_argument("conv1d_transpose: output length would be non-positive");
  return lo;
}

void conv1d_transpose_fwd_serial(const double* x, const double* w, const double* bias, double* y,
                                 int B, int Ci, int L, int Co, int K, int stride, int pad,
                                 int out_pad) {
  const int Lo = conv1d_transpose_out_len(L, K, stride, pad, out_pad);
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Co; ++co) {
      double* yrow = y + (static_cast<int64_t>(b) * Co + co) * Lo;
      for (int lo = 0; lo < Lo; ++lo) {
        double acc = bias ? bias[co] : 0.0;
        for (int t = 0; t < K; ++t) {
          const int num = lo + pad - t;
          if (num < 0) break;  // t only grows, num only shrinks
          if (num % stride != 0) continue;
          const int li = num / stride;
          if (li >= L) continue;
          for (int ci = 0; ci < Ci; ++ci) {
            acc += x[(static_cast<int64_t>(b) * Ci + ci) * L + li] *
                   w[(static_cast<int64_t>(ci) * Co + co) * K + t];
          }
        }
        yrow[lo] = acc;
      }
    }
  }
}

void conv1d_transpose_fwd_omp(const double* x, const double* w, const double* bias, double* y,
                              int B, int Ci, int L, int Co, int K, int stride, int pad,
                              int out_pad) {
  const int Lo = conv1d_transpose_out_len(L, K, stride, pad, out_pad);
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Co; ++co) {
      double* yrow = y + (static_cast<int64_t>(b) * Co + co) * Lo;
      for (int lo = 0; lo < Lo; ++lo) {
        double acc = bias ? bias[co] : 0.0;
        for (int t = 0; t < K; ++t) {
          const int num = lo + pad - t;
          if (num < 0) break;
          if (num % stride != 0) continue;
          const int li = num / stride;
          if (li >= L) continue;
          for (int ci = 0; ci < Ci; ++ci) {
            acc += x[(static_cast<int64_t>(b) * Ci + ci) * L + li] *
                   w[(static_cast<int64_t>(ci) * Co + co) * K + t];
          }
        }
        yrow[lo] = acc;
      }
    }
  }
}

void conv1d_transpose_fwd(const double* x, const double* w, const double* bias, double* y,
                          int B, int Ci, int L, int Co, int K, int stride, int pad, int out_pad) {
  const int Lo = conv1d_transpose_out_len(L, K, stride, pad, out_pad);
  const int64_t work = static_cast<int64_t>(B) * Co * Lo * Ci * (K / stride + 1);
  if (go_parallel(work))
    conv1d_transpose_fwd_omp(x, w, bias, y, B, Ci, L, Co, K, stride, pad, out_pad);
  else
    conv1d_transpose_fwd_serial(x, w, bias, y, B, Ci, L, Co, K, stride, pad, out_pad);
}

void conv1d_transpose_bwd_input(const double* dy, const double* w, double* dx,
                                int B, int Ci, int L, int Co, int K, int stride, int pad,
                                int out_pad) {
  const int Lo = conv1d_transpose_out_len(L, K, stride, pad, out_pad);
  const int64_t work = static_cast<int64_t>(B) * Ci * L * Co * K;
  const bool par = go_parallel(work);
  // dx[b,ci,li] = sum_{co,t} dy[b,co,li*s - p + t] * w[ci,co,t]
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int b = 0; b < B; ++b) {
    for (int ci = 0; ci < Ci; ++ci) {
      double* dxc = dx + (static_cast<int64_t>(b) * Ci + ci) * L;
      for (int li = 0; li < L; ++li) {
        double acc = 0.0;
        const int base = li * stride - pad;
        for (int t = 0; t < K; ++t) {
          const int lo = base + t;
          if (lo < 0 || lo >= Lo) continue;
          for (int co = 0; co < Co; ++co) {
            acc += dy[(static_cast<int64_t>(b) * Co + co) * Lo + lo] *
                   w[(static_cast<int64_t>(ci) * Co + co) * K + t];
          }
        }
        dxc[li] = acc;
      }
    }
  }
}

void conv1d_transpose_bwd_params(const double* dy, const double* x, double* dw, double* dbias,
                                 int B, int Ci, int L, int Co, int K, int stride, int pad,
                                 int out_pad) {
  const int Lo = conv1d_transpose_out_len(L, K, stride, pad, out_pad);
  const int64_t work = static_cast<int64_t>(Ci) * Co * K * B * L;
  const bool par = go_parallel(work);
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int ci = 0; ci < Ci; ++ci) {
    for (int co = 0; co < Co; ++co) {
      for (int t = 0; t < K; ++t) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
          const double* xc = x + (static_cast<int64_t>(b) * Ci + ci) * L;
          const double* dyrow = dy + (static_cast<int64_t>(b) * Co + co) * Lo;
          for (int li = 0; li < L; ++li) {
            const int lo = li * stride - pad + t;
            if (lo >= 0 && lo < Lo) acc += xc[li] * dyrow[lo];
          }
        }
        dw[(static_cast<int64_t>(ci) * Co + co) * K + t] = acc;
      }
    }
  }
  if (dbias) {
    for (int co = 0; co < Co; ++co) {
      double acc = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* dyrow = dy + (static_cast<int64_t>(b) * Co + co) * Lo;
        for (int lo = 0; lo < Lo; ++lo) acc += dyrow[lo];
      }
      dbias[co] = acc;
    }
  }
}

// ===== attention =============================================================

void softmax_rows(double* x, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    double* row = x + static_cast<int64_t>(i) * cols;
    double mx = row[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < cols; ++j) row[j] *= inv;
  }
}

namespace {
inline void attention_fwd_one(const double* q, const double* k, const double* v, double* p,
                              double* o, int L, int hd, double scale) {
  // scores -> softmax -> mix
  matmul_nt_serial(q, k, p, L, hd, L);
  for (int64_t i = 0; i < static_cast<int64_t>(L) * L; ++i) p[i] *= scale;
  softmax_rows(p, L, L);
  matmul_nn_serial(p, v, o, L, L, hd);
}
}  // namespace

void attention_fwd_serial(const double* q, const double* k, const double* v, double* p, double* o,
                          int S, int L, int hd, double scale) {
  for (int s = 0; s < S; ++s) {
    const int64_t off_seq = static_cast<int64_t>(s) * L * hd;
    const int64_t off_p = static_cast<int64_t>(s) * L * L;
    attention_fwd_one(q + off_seq, k + off_seq, v + off_seq, p + off_p, o + off_seq, L, hd, scale);
  }
}

void attention_fwd_omp(const double* q, const double* k, const double* v, double* p, double* o,
                       int S, int L, int hd, double scale) {
#pragma omp parallel for schedule(static)
  for (int s = 0; s < S; ++s) {
    const int64_t off_seq = static_cast<int64_t>(s) * L * hd;
    const int64_t off_p = static_cast<int64_t>(s) * L * L;
    attention_fwd_one(q + off_seq, k + off_seq, v + off_seq, p + off_p, o + off_seq, L, hd, scale);
  }
}

void attention_fwd(const double* q, const double* k, const double* v, double* p, double* o,
                   int S, int L, int hd, double scale) {
  const int64_t work = static_cast<int64_t>(S) * L * L * hd;
  if (go_parallel(work))
    attention_fwd_omp(q, k, v, p, o, S, L, hd, scale);
  else
    attention_fwd_serial(q, k, v, p, o, S, L, hd, scale);
}

void attention_bwd(const double* q, const double* k, const double* v, const double* p,
                   const double* dout, double* dq, double* dk, double* dv,
                   int S, int L, int hd, double scale) {
  const int64_t work = static_cast<int64_t>(S) * L * L * hd;
  const bool par = go_parallel(work);
#pragma omp parallel for schedule(static) if (par)
  for (int s = 0; s < S; ++s) {
    const int64_t off_seq = static_cast<int64_t>(s) * L * hd;
    const int64_t off_p = static_cast<int64_t>(s) * L * L;
    const double* qs = q + off_seq;
    const double* ks = k + off_seq;
    const double* vs = v + off_seq;
    const double* ps = p + off_p;
    const double* dos = dout + off_seq;
    double* dqs = dq + off_seq;
    double* dks = dk + off_seq;
    double* dvs = dv + off_seq;

    std::vector<double> dp(static_cast<size_t>(L) * L), ds(static_cast<size_t>(L) * L);
    // dv = p^T * dout ; dp = dout * v^T
    matmul_tn_serial(ps, dos, dvs, L, L, hd);
    matmul_nt_serial(dos, vs, dp.data(), L, hd, L);
    // ds = p .* (dp - rowsum(dp .* p))
    for (int i = 0; i < L; ++i) {
      const double* pi = ps + static_cast<int64_t>(i) * L;
      const double* dpi = dp.data() + static_cast<int64_t>(i) * L;
      double dot = 0.0;
      for (int j = 0; j < L; ++j) dot += dpi[j] * pi[j];
      double* dsi = ds.data() + static_cast<int64_t>(i) * L;
      for (int j = 0; j < L; ++j) dsi[j] = pi[j] * (dpi[j] - dot);
    }
    // dq = ds * k * scale ; dk = ds^T * q * scale
    matmul_nn_serial(ds.data(), ks, dqs, L, L, hd);
    matmul_tn_serial(ds.data(), qs, dks, L, L, hd);
    for (int64_t i = 0; i < static_cast<int64_t>(L) * hd; ++i) {
      dqs[i] *= scale;
      dks[i] *= scale;
    }
  }
}

}  // namespace bstrat::kernels
