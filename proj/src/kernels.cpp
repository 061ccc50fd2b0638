#include "adaponder/kernels.hpp"

#include <Eigen/Core>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace adaponder::kernels {

static int g_threads = 0;

void set_threads(int n) {
  g_threads = n;
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#endif
  if (n > 0) Eigen::setNbThreads(n);
}

int threads() {
#ifdef _OPENMP
  return g_threads > 0 ? g_threads : omp_get_max_threads();
#else
  return 1;
#endif
}

FlopCounter& flop_counter() {
  static FlopCounter c;
  return c;
}

template <typename T>
using MapMat = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMapMat = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// ---------------------------------------------------------------- serial

namespace serial {

template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
    const T* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) c[i * n + j] = T(0);
  for (int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T sum = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

template <typename T>
void layernorm_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                   int64_t rows, int64_t cols, T eps) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mu = T(0);
    for (int64_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<T>(cols);
    T var = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      const T d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    for (int64_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
    if (mean) mean[r] = mu;
    if (rstd) rstd[r] = rs;
  }
}

template <typename T>
static inline T gelu_one(T x) {
  const T c = std::sqrt(T(2) / T(M_PI));
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
void gelu_fwd(const T* x, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

template <typename T>
void attention_causal_fwd(const T* q, const T* k, const T* v, T* out,
                          int64_t batch, int64_t n, int64_t heads, int64_t dh) {
  const int64_t d = heads * dh;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> p(static_cast<size_t>(n));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t off = h * dh;
      for (int64_t t = 0; t < n; ++t) {
        const T* qt = q + (b * n + t) * d + off;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j <= t; ++j) {
          const T* kj = k + (b * n + j) * d + off;
          T s = T(0);
          for (int64_t c = 0; c < dh; ++c) s += qt[c] * kj[c];
          p[j] = s * scale;
          mx = std::max(mx, p[j]);
        }
        T sum = T(0);
        for (int64_t j = 0; j <= t; ++j) {
          p[j] = std::exp(p[j] - mx);
          sum += p[j];
        }
        const T inv = T(1) / sum;
        T* ot = out + (b * n + t) * d + off;
        for (int64_t c = 0; c < dh; ++c) ot[c] = T(0);
        for (int64_t j = 0; j <= t; ++j) {
          const T w = p[j] * inv;
          const T* vj = v + (b * n + j) * d + off;
          for (int64_t c = 0; c < dh; ++c) ot[c] += w * vj[c];
        }
      }
    }
  }
}

template <typename T>
void rotary(const T* x, T* y, int64_t batch, int64_t n, int64_t heads, int64_t dh,
            T base, int dir) {
  const int64_t d = heads * dh;
  const int64_t half = dh / 2;
  std::vector<T> cs(static_cast<size_t>(n * half)), sn(static_cast<size_t>(n * half));
  for (int64_t t = 0; t < n; ++t) {
    for (int64_t c = 0; c < half; ++c) {
      const T theta = static_cast<T>(t) *
                      std::pow(base, -static_cast<T>(2 * c) / static_cast<T>(dh));
      cs[t * half + c] = std::cos(theta);
      sn[t * half + c] = dir >= 0 ? std::sin(theta) : -std::sin(theta);
    }
  }
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < n; ++t) {
      const T* xr = x + (b * n + t) * d;
      T* yr = y + (b * n + t) * d;
      for (int64_t h = 0; h < heads; ++h) {
        const int64_t off = h * dh;
        for (int64_t c = 0; c < half; ++c) {
          const T co = cs[t * half + c], si = sn[t * half + c];
          const T x0 = xr[off + c], x1 = xr[off + c + half];
          yr[off + c] = x0 * co - x1 * si;
          yr[off + c + half] = x0 * si + x1 * co;
        }
      }
    }
  }
}

template void matmul_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void matmul_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void matmul_nt<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void matmul_nt<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void matmul_tn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void matmul_tn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void softmax_rows<float>(const float*, float*, int64_t, int64_t);
template void softmax_rows<double>(const double*, double*, int64_t, int64_t);
template void layernorm_fwd<float>(const float*, const float*, const float*, float*, float*, float*, int64_t, int64_t, float);
template void layernorm_fwd<double>(const double*, const double*, const double*, double*, double*, double*, int64_t, int64_t, double);
template void gelu_fwd<float>(const float*, float*, int64_t);
template void gelu_fwd<double>(const double*, double*, int64_t);
template void attention_causal_fwd<float>(const float*, const float*, const float*, float*, int64_t, int64_t, int64_t, int64_t);
template void attention_causal_fwd<double>(const double*, const double*, const double*, double*, int64_t, int64_t, int64_t, int64_t);
template void rotary<float>(const float*, float*, int64_t, int64_t, int64_t, int64_t, float, int);
template void rotary<double>(const double*, double*, int64_t, int64_t, int64_t, int64_t, double, int);

}  // namespace serial

// ---------------------------------------------------------------- parallel

namespace par {

template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  flop_counter().add(static_cast<uint64_t>(2 * m * k * n));
  CMapMat<T> ea(a, m, k), eb(b, k, n);
  MapMat<T> ec(c, m, n);
  ec.noalias() = ea * eb;
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  flop_counter().add(static_cast<uint64_t>(2 * m * k * n));
  CMapMat<T> ea(a, m, k), eb(b, n, k);
  MapMat<T> ec(c, m, n);
  ec.noalias() = ea * eb.transpose();
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  flop_counter().add(static_cast<uint64_t>(2 * m * k * n));
  CMapMat<T> ea(a, k, m), eb(b, k, n);
  MapMat<T> ec(c, m, n);
  ec.noalias() = ea.transpose() * eb;
}

template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    serial::softmax_rows(x + r * cols, y + r * cols, 1, cols);
  }
}

template <typename T>
void layernorm_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                   int64_t rows, int64_t cols, T eps) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    serial::layernorm_fwd(x + r * cols, gamma, beta, y + r * cols,
                          mean ? mean + r : nullptr, rstd ? rstd + r : nullptr, 1, cols, eps);
  }
}

template <typename T>
void layernorm_bwd(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy,
                   T* dx, T* dgamma, T* dbeta, int64_t rows, int64_t cols) {
  const T nc = static_cast<T>(cols);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    const T* dyr = dy + r * cols;
    T* dxr = dx + r * cols;
    const T mu = mean[r], rs = rstd[r];
    // dxhat = dy * gamma; dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
    T s1 = T(0), s2 = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      const T xhat = (xr[j] - mu) * rs;
      const T dxh = dyr[j] * gamma[j];
      s1 += dxh;
      s2 += dxh * xhat;
    }
    s1 /= nc;
    s2 /= nc;
    for (int64_t j = 0; j < cols; ++j) {
      const T xhat = (xr[j] - mu) * rs;
      dxr[j] += rs * (dyr[j] * gamma[j] - s1 - xhat * s2);
    }
  }
  // parameter grads accumulated serially in a fixed order
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    const T* dyr = dy + r * cols;
    const T mu = mean[r], rs = rstd[r];
    for (int64_t j = 0; j < cols; ++j) {
      dgamma[j] += dyr[j] * (xr[j] - mu) * rs;
      dbeta[j] += dyr[j];
    }
  }
}

template <typename T>
void gelu_fwd(const T* x, T* y, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] = serial::gelu_one(x[i]);
}

template <typename T>
void gelu_bwd(const T* x, const T* dy, T* dx, int64_t n) {
  const T c = std::sqrt(T(2) / T(M_PI));
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const T xi = x[i];
    const T u = c * (xi + T(0.044715) * xi * xi * xi);
    const T th = std::tanh(u);
    const T du = c * (T(1) + T(3) * T(0.044715) * xi * xi);
    dx[i] += dy[i] * (T(0.5) * (T(1) + th) + T(0.5) * xi * (T(1) - th * th) * du);
  }
}

template <typename T>
static void attn_bh_fwd(const T* q, const T* k, const T* v, T* out,
                        int64_t n, int64_t stride, int64_t dh) {
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> p(static_cast<size_t>(n));
  for (int64_t t = 0; t < n; ++t) {
    const T* qt = q + t * stride;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j <= t; ++j) {
      const T* kj = k + j * stride;
      T s = T(0);
      for (int64_t c = 0; c < dh; ++c) s += qt[c] * kj[c];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    T sum = T(0);
    for (int64_t j = 0; j <= t; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    const T inv = T(1) / sum;
    T* ot = out + t * stride;
    for (int64_t c = 0; c < dh; ++c) ot[c] = T(0);
    for (int64_t j = 0; j <= t; ++j) {
      const T w = p[j] * inv;
      const T* vj = v + j * stride;
      for (int64_t c = 0; c < dh; ++c) ot[c] += w * vj[c];
    }
  }
}

template <typename T>
static void attn_bh_bwd(const T* q, const T* k, const T* v, const T* dout,
                        T* dq, T* dk, T* dv, int64_t n, int64_t stride, int64_t dh) {
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> p(static_cast<size_t>(n)), dp(static_cast<size_t>(n));
  for (int64_t t = 0; t < n; ++t) {
    const T* qt = q + t * stride;
    // recompute this row's probabilities
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j <= t; ++j) {
      const T* kj = k + j * stride;
      T s = T(0);
      for (int64_t c = 0; c < dh; ++c) s += qt[c] * kj[c];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    T sum = T(0);
    for (int64_t j = 0; j <= t; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    const T inv = T(1) / sum;
    const T* dot = dout + t * stride;
    T dpsum = T(0);
    for (int64_t j = 0; j <= t; ++j) {
      p[j] *= inv;
      const T* vj = v + j * stride;
      T acc = T(0);
      for (int64_t c = 0; c < dh; ++c) acc += dot[c] * vj[c];
      dp[j] = acc;
      dpsum += p[j] * acc;
    }
    T* dqt = dq + t * stride;
    for (int64_t j = 0; j <= t; ++j) {
      const T w = p[j];
      T* dvj = dv + j * stride;
      for (int64_t c = 0; c < dh; ++c) dvj[c] += w * dot[c];
      const T ds = w * (dp[j] - dpsum) * scale;
      const T* kj = k + j * stride;
      T* dkj = dk + j * stride;
      for (int64_t c = 0; c < dh; ++c) {
        dqt[c] += ds * kj[c];
        dkj[c] += ds * qt[c];
      }
    }
  }
}

template <typename T>
void attention_causal_fwd(const T* q, const T* k, const T* v, T* out,
                          int64_t batch, int64_t n, int64_t heads, int64_t dh) {
  // Causal MAC count: scores + apply = 2 * sum over t of (t+1)*dh per head.
  flop_counter().add(static_cast<uint64_t>(batch * heads * 2 * n * (n + 1) * dh));
  const int64_t d = heads * dh;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t off = b * n * d + h * dh;
      attn_bh_fwd(q + off, k + off, v + off, out + off, n, d, dh);
    }
  }
}

template <typename T>
void attention_causal_bwd(const T* q, const T* k, const T* v, const T* dout,
                          T* dq, T* dk, T* dv,
                          int64_t batch, int64_t n, int64_t heads, int64_t dh) {
  const int64_t d = heads * dh;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t off = b * n * d + h * dh;
      attn_bh_bwd(q + off, k + off, v + off, dout + off, dq + off, dk + off, dv + off,
                  n, d, dh);
    }
  }
}

template <typename T>
void rotary(const T* x, T* y, int64_t batch, int64_t n, int64_t heads, int64_t dh,
            T base, int dir) {
  const int64_t d = heads * dh;
  const int64_t half = dh / 2;
  std::vector<T> cs(static_cast<size_t>(n * half)), sn(static_cast<size_t>(n * half));
  for (int64_t t = 0; t < n; ++t) {
    for (int64_t c = 0; c < half; ++c) {
      const T theta = static_cast<T>(t) *
                      std::pow(base, -static_cast<T>(2 * c) / static_cast<T>(dh));
      cs[t * half + c] = std::cos(theta);
      sn[t * half + c] = dir >= 0 ? std::sin(theta) : -std::sin(theta);
    }
  }
#pragma omp parallel for schedule(static)
  for (int64_t bt = 0; bt < batch * n; ++bt) {
    const int64_t t = bt % n;
    const T* xr = x + bt * d;
    T* yr = y + bt * d;
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t off = h * dh;
      for (int64_t c = 0; c < half; ++c) {
        const T co = cs[t * half + c], si = sn[t * half + c];
        const T x0 = xr[off + c], x1 = xr[off + c + half];
        yr[off + c] = x0 * co - x1 * si;
        yr[off + c + half] = x0 * si + x1 * co;
      }
    }
  }
}

template void matmul_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void matmul_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void matmul_nt<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void matmul_nt<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void matmul_tn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void matmul_tn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void softmax_rows<float>(const float*, float*, int64_t, int64_t);
template void softmax_rows<double>(const double*, double*, int64_t, int64_t);
template void layernorm_fwd<float>(const float*, const float*, const float*, float*, float*, float*, int64_t, int64_t, float);
template void layernorm_fwd<double>(const double*, const double*, const double*, double*, double*, double*, int64_t, int64_t, double);
template void layernorm_bwd<float>(const float*, const float*, const float*, const float*, const float*, float*, float*, float*, int64_t, int64_t);
template void layernorm_bwd<double>(const double*, const double*, const double*, const double*, const double*, double*, double*, double*, int64_t, int64_t);
template void gelu_fwd<float>(const float*, float*, int64_t);
template void gelu_fwd<double>(const double*, double*, int64_t);
template void gelu_bwd<float>(const float*, const float*, float*, int64_t);
template void gelu_bwd<double>(const double*, const double*, double*, int64_t);
template void attention_causal_fwd<float>(const float*, const float*, const float*, float*, int64_t, int64_t, int64_t, int64_t);
template void attention_causal_fwd<double>(const double*, const double*, const double*, double*, int64_t, int64_t, int64_t, int64_t);
template void attention_causal_bwd<float>(const float*, const float*, const float*, const float*, float*, float*, float*, int64_t, int64_t, int64_t, int64_t);
template void attention_causal_bwd<double>(const double*, const double*, const double*, const double*, double*, double*, double*, int64_t, int64_t, int64_t, int64_t);
template void rotary<float>(const float*, float*, int64_t, int64_t, int64_t, int64_t, float, int);
template void rotary<double>(const double*, double*, int64_t, int64_t, int64_t, int64_t, double, int);

}  // namespace par

}  // namespace adaponder::kernels
