#pragma once

#include <atomic>
#include <cstdint>

namespace adaponder::kernels {

// Thread count for the parallel kernels (OpenMP + Eigen). 0 = library default.
// Results are run-to-run deterministic for a fixed thread count; bitwise
// reproducibility across different thread counts is only guaranteed at 1.
void set_threads(int n);
int threads();

// Global multiply-add counter for FLOP instrumentation. Enabled on demand;
// GEMM-class kernels add 2 FLOPs per multiply-add while enabled.
struct FlopCounter {
  std::atomic<bool> enabled{false};
  std::atomic<uint64_t> flops{0};
  void reset() { flops.store(0); }
  void add(uint64_t f) {
    if (enabled.load(std::memory_order_relaxed)) flops.fetch_add(f, std::memory_order_relaxed);
  }
};
FlopCounter& flop_counter();

// Serial reference kernels. Plain loops, no threading, no Eigen. Kept for
// correctness tests and the kernel benchmark.
namespace serial {

template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);  // c = a * b^T, b is [n,k]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);  // c = a^T * b, a is [k,m]

template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols);

template <typename T>
void layernorm_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                   int64_t rows, int64_t cols, T eps);

template <typename T>
void gelu_fwd(const T* x, T* y, int64_t n);

// Causal multi-head attention over explicit K/V. q,k,v,out are [B*n, H*dh]
// row-major with head h in columns [h*dh,(h+1)*dh).
template <typename T>
void attention_causal_fwd(const T* q, const T* k, const T* v, T* out,
                          int64_t batch, int64_t n, int64_t heads, int64_t dh);

// NeoX-style rotary: pairs (c, c+dh/2), angle = pos * base^(-2c/dh).
// dir=+1 applies the rotation, dir=-1 its inverse (used by the backward pass).
template <typename T>
void rotary(const T* x, T* y, int64_t batch, int64_t n, int64_t heads, int64_t dh,
            T base, int dir);

}  // namespace serial

// Parallel kernels: Eigen-backed GEMM plus OpenMP loops. Same contracts as
// the serial versions; tests assert agreement.
namespace par {

template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);

template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols);

template <typename T>
void layernorm_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                   int64_t rows, int64_t cols, T eps);

template <typename T>
void layernorm_bwd(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy,
                   T* dx, T* dgamma, T* dbeta, int64_t rows, int64_t cols);

template <typename T>
void gelu_fwd(const T* x, T* y, int64_t n);
template <typename T>
void gelu_bwd(const T* x, const T* dy, T* dx, int64_t n);

template <typename T>
void attention_causal_fwd(const T* q, const T* k, const T* v, T* out,
                          int64_t batch, int64_t n, int64_t heads, int64_t dh);

// Recomputes attention probabilities from q,k; accumulates into dq,dk,dv.
template <typename T>
void attention_causal_bwd(const T* q, const T* k, const T* v, const T* dout,
                          T* dq, T* dk, T* dv,
                          int64_t batch, int64_t n, int64_t heads, int64_t dh);

template <typename T>
void rotary(const T* x, T* y, int64_t batch, int64_t n, int64_t heads, int64_t dh,
            T base, int dir);

}  // namespace par

}  // namespace adaponder::kernels
