#pragma once
// Compute kernels used by every model in the pipeline.
//
// Each kernel has two implementations:
//   *_serial  - plain reference loops, kept deliberately simple; ground truth
//               for correctness tests and the baseline for the benchmark.
//   *_omp     - OpenMP-parallel variant.  Parallelism is only ever applied
//               across independent output elements and the per-element
//               accumulation order is identical to the serial reference, so
//               results are bit-exact regardless of thread count.
//
// The un-suffixed entry points dispatch to one or the other based on
// set_parallel() and problem size.  bench/bench_kernels.cpp compares the two.

#include <cstdint>

namespace bstrat::kernels {

void set_parallel(bool enabled);
bool parallel_enabled();
int max_threads();

// ----- matrix multiply ------------------------------------------------------
// Row-major.  Y[m,n] is overwritten.
// matmul_nn: Y = A[m,k] * B[k,n]
// matmul_nt: Y = A[m,k] * B[n,k]^T
// matmul_tn: Y = A[k,m]^T * B[k,n]
void matmul_nn(const double* A, const double* B, double* Y, int m, int k, int n);
void matmul_nt(const double* A, const double* B, double* Y, int m, int k, int n);
void matmul_tn(const double* A, const double* B, double* Y, int m, int k, int n);
void matmul_nn_serial(const double* A, const double* B, double* Y, int m, int k, int n);
void matmul_nt_serial(const double* A, const double* B, double* Y, int m, int k, int n);
void matmul_tn_serial(const double* A, const double* B, double* Y, int m, int k, int n);
void matmul_nn_omp(const double* A, const double* B, double* Y, int m, int k, int n);
void matmul_nt_omp(const double* A, const double* B, double* Y, int m, int k, int n);
void matmul_tn_omp(const double* A, const double* B, double* Y, int m, int k, int n);

// ----- 1-d convolution ------------------------------------------------------
// x[B,Ci,L], w[Co,Ci,K], bias[Co] (nullable), y[B,Co,Lo], Lo = (L+2p-K)/s + 1.
int conv1d_out_len(int L, int K, int stride, int pad);
void conv1d_fwd(const double* x, const double* w, const double* bias, double* y,
                int B, int Ci, int L, int Co, int K, int stride, int pad);
void conv1d_bwd_input(const double* dy, const double* w, double* dx,
                      int B, int Ci, int L, int Co, int K, int stride, int pad);
void conv1d_bwd_params(const double* dy, const double* x, double* dw, double* dbias,
                       int B, int Ci, int L, int Co, int K, int stride, int pad);
void conv1d_fwd_serial(const double* x, const double* w, const double* bias, double* y,
                       int B, int Ci, int L, int Co, int K, int stride, int pad);
void conv1d_fwd_omp(const double* x, const double* w, const double* bias, double* y,
                    int B, int Ci, int L, int Co, int K, int stride, int pad);

// ----- transposed 1-d convolution --------------------------------------------
// x[B,Ci,L], w[Ci,Co,K], y[B,Co,Lo], Lo = (L-1)*s + K - 2p + out_pad.
int conv1d_transpose_out_len(int L, int K, int stride, int pad, int out_pad);
void conv1d_transpose_fwd(const double* x, const double* w, const double* bias, double* y,
                          int B, int Ci, int L, int Co, int K, int stride, int pad, int out_pad);
void conv1d_transpose_bwd_input(const double* dy, const double* w, double* dx,
                                int B, int Ci, int L, int Co, int K, int stride, int pad,
                                int out_pad);
void conv1d_transpose_bwd_params(const double* dy, const double* x, double* dw, double* dbias,
                                 int B, int Ci, int L, int Co, int K, int stride, int pad,
                                 int out_pad);
void conv1d_transpose_fwd_serial(const double* x, const double* w, const double* bias, double* y,
                                 int B, int Ci, int L, int Co, int K, int stride, int pad,
                                 int out_pad);
void conv1d_transpose_fwd_omp(const double* x, const double* w, const double* bias, double* y,
                              int B, int Ci, int L, int Co, int K, int stride, int pad,
                              int out_pad);

// ----- scaled dot-product attention ------------------------------------------
// q,k,v: [S, L, hd] where S = (#sequences * #heads).  p: [S, L, L] row-softmax
// probabilities (kept for the backward pass and for connectivity extraction).
// o: [S, L, hd].
void attention_fwd(const double* q, const double* k, const double* v, double* p, double* o,
                   int S, int L, int hd, double scale);
void attention_bwd(const double* q, const double* k, const double* v, const double* p,
                   const double* dout, double* dq, double* dk, double* dv,
                   int S, int L, int hd, double scale);
void attention_fwd_serial(const double* q, const double* k, const double* v, double* p, double* o,
                          int S, int L, int hd, double scale);
void attention_fwd_omp(const double* q, const double* k, const double* v, double* p, double* o,
                       int S, int L, int hd, double scale);

// Numerically stable in-place row softmax on a [rows, cols] matrix.
void softmax_rows(double* x, int rows, int cols);

}  // namespace bstrat::kernels
