#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaponder/kernels.hpp"
#include "adaponder/tensor.hpp"

namespace adaponder {

// Reverse-mode tape. Every op computes its value eagerly, records a backward
// closure, and returns a node id. Creation order is a topological order of the
// dataflow graph, so backward() replays closures in strict reverse order.
// One tape per training step; single-writer.
template <typename T>
class Tape {
 public:
  using Id = int32_t;

  struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated on first touch during backward
    std::function<void()> back;
  };

  // When false (inference), values are still computed and chained but no
  // backward closures are stored.
  bool recording = true;

  const Tensor<T>& val(Id id) const { return nodes_[static_cast<size_t>(id)].val; }

  Tensor<T>& grad(Id id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.val.shape);
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  Id leaf(Tensor<T> v, const char* op = "leaf") {
    return push(std::move(v), op, nullptr);
  }

  // ------------------------------------------------------------- linear algebra

  // c = a * b, a:[m,k] b:[k,n]
  Id matmul(Id a, Id b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require(A.ndim() == 2 && B.ndim() == 2 && A.dim(1) == B.dim(0), "matmul",
            "inner dimensions disagree: " + shape_str(A.shape) + " x " + shape_str(B.shape));
    const int64_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor<T> C({m, n});
    kernels::par::matmul_nn(A.data.data(), B.data.data(), C.data.data(), m, k, n);
    Id out = push(std::move(C), "matmul");
    if (recording) {
      nodes_.back().back = [this, a, b, out, m, k, n] {
        const T* dc = grad(out).data.data();
        // da += dc * b^T ; db += a^T * dc
        Tensor<T> da({m, k}), db({k, n});
        kernels::par::matmul_nt(dc, val(b).data.data(), da.data.data(), m, n, k);
        kernels::par::matmul_tn(val(a).data.data(), dc, db.data.data(), k, m, n);
        accum(grad(a), da);
        accum(grad(b), db);
      };
    }
    return out;
  }

  // y = x * w^T + b, x:[m,k] w:[n,k] b:[n] (b may be -1 for no bias)
  Id linear(Id x, Id w, Id b = -1) {
    const Tensor<T>&X = val(x), &W = val(w);
    require(X.ndim() == 2 && W.ndim() == 2 && X.dim(1) == W.dim(1), "linear",
            "shape mismatch: " + shape_str(X.shape) + " vs weight " + shape_str(W.shape));
    const int64_t m = X.dim(0), k = X.dim(1), n = W.dim(0);
    Tensor<T> Y({m, n});
    kernels::par::matmul_nt(X.data.data(), W.data.data(), Y.data.data(), m, k, n);
    if (b >= 0) {
      const Tensor<T>& B = val(b);
      require(B.numel() == n, "linear", "bias length mismatch");
      T* y = Y.data.data();
      const T* bb = B.data.data();
#pragma omp parallel for schedule(static) if (m * n > 1 << 15)
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) y[i * n + j] += bb[j];
    }
    Id out = push(std::move(Y), "linear");
    if (recording) {
      nodes_.back().back = [this, x, w, b, out, m, k, n] {
        const T* dy = grad(out).data.data();
        Tensor<T> dx({m, k}), dw({n, k});
        kernels::par::matmul_nn(dy, val(w).data.data(), dx.data.data(), m, n, k);
        kernels::par::matmul_tn(dy, val(x).data.data(), dw.data.data(), n, m, k);
        accum(grad(x), dx);
        accum(grad(w), dw);
        if (b >= 0) {
          T* db = grad(b).data.data();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
        }
      };
    }
    return out;
  }

  // ------------------------------------------------------------- elementwise

  Id add(Id a, Id b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require(A.same_shape(B), "add", "shape mismatch");
    Tensor<T> C(A.shape);
    ew2(A, B, C, [](T x, T y) { return x + y; });
    Id out = push(std::move(C), "add");
    if (recording) {
      nodes_.back().back = [this, a, b, out] {
        accum(grad(a), grad(out));
        accum(grad(b), grad(out));
      };
    }
    return out;
  }

  Id mul(Id a, Id b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require(A.same_shape(B), "mul", "shape mismatch");
    Tensor<T> C(A.shape);
    ew2(A, B, C, [](T x, T y) { return x * y; });
    Id out = push(std::move(C), "mul");
    if (recording) {
      nodes_.back().back = [this, a, b, out] {
        const Tensor<T>& go = grad(out);
        Tensor<T> da(go.shape), db(go.shape);
        ew2(go, val(b), da, [](T g, T y) { return g * y; });
        ew2(go, val(a), db, [](T g, T x) { return g * x; });
        accum(grad(a), da);
        accum(grad(b), db);
      };
    }
    return out;
  }

  Id scale(Id a, T c) {
    Tensor<T> C(val(a).shape);
    const T* x = val(a).data.data();
    for (int64_t i = 0; i < C.numel(); ++i) C.at(i) = x[i] * c;
    Id out = push(std::move(C), "scale");
    if (recording) {
      nodes_.back().back = [this, a, c, out] {
        const Tensor<T>& go = grad(out);
        Tensor<T> da(go.shape);
        for (int64_t i = 0; i < da.numel(); ++i) da.at(i) = go.at(i) * c;
        accum(grad(a), da);
      };
    }
    return out;
  }

  Id sigmoid(Id a) {
    Tensor<T> Y(val(a).shape);
    ew1(val(a), Y, [](T x) { return T(1) / (T(1) + std::exp(-x)); });
    Id out = push(std::move(Y), "sigmoid");
    if (recording) {
      nodes_.back().back = [this, a, out] {
        const Tensor<T>&go = grad(out), &y = val(out);
        Tensor<T> da(go.shape);
        ew2(go, y, da, [](T g, T s) { return g * s * (T(1) - s); });
        accum(grad(a), da);
      };
    }
    return out;
  }

  Id gelu(Id a) {
    Tensor<T> Y(val(a).shape);
    kernels::par::gelu_fwd(val(a).data.data(), Y.data.data(), Y.numel());
    Id out = push(std::move(Y), "gelu");
    if (recording) {
      nodes_.back().back = [this, a, out] {
        const Tensor<T>& go = grad(out);
        kernels::par::gelu_bwd(val(a).data.data(), go.data.data(), grad(a).data.data(),
                               go.numel());
      };
    }
    return out;
  }

  // softmax over the last axis of a 2-D tensor (rows)
  Id softmax(Id a) {
    const Tensor<T>& A = val(a);
    require(A.ndim() == 2, "softmax", "expects a 2-D tensor");
    Tensor<T> Y(A.shape);
    kernels::par::softmax_rows(A.data.data(), Y.data.data(), A.dim(0), A.dim(1));
    Id out = push(std::move(Y), "softmax");
    if (recording) {
      nodes_.back().back = [this, a, out] {
        const Tensor<T>&go = grad(out), &y = val(out);
        const int64_t rows = y.dim(0), cols = y.dim(1);
        Tensor<T> da(y.shape);
#pragma omp parallel for schedule(static) if (rows > 8)
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = y.data.data() + r * cols;
          const T* gr = go.data.data() + r * cols;
          T dot = T(0);
          for (int64_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
          T* dr = da.data.data() + r * cols;
          for (int64_t j = 0; j < cols; ++j) dr[j] = yr[j] * (gr[j] - dot);
        }
        accum(grad(a), da);
      };
    }
    return out;
  }

  Id layernorm(Id x, Id gamma, Id beta, T eps = T(1e-5)) {
    const Tensor<T>& X = val(x);
    require(X.ndim() == 2, "layernorm", "expects a 2-D tensor");
    const int64_t rows = X.dim(0), cols = X.dim(1);
    require(val(gamma).numel() == cols && val(beta).numel() == cols, "layernorm",
            "gamma/beta length mismatch");
    Tensor<T> Y(X.shape), mean({rows}), rstd({rows});
    kernels::par::layernorm_fwd(X.data.data(), val(gamma).data.data(), val(beta).data.data(),
                                Y.data.data(), mean.data.data(), rstd.data.data(), rows, cols,
                                eps);
    Id out = push(std::move(Y), "layernorm");
    if (recording) {
      nodes_.back().back = [this, x, gamma, beta, out, mean, rstd, rows, cols] {
        kernels::par::layernorm_bwd(val(x).data.data(), val(gamma).data.data(),
                                    mean.data.data(), rstd.data.data(),
                                    grad(out).data.data(), grad(x).data.data(),
                                    grad(gamma).data.data(), grad(beta).data.data(), rows,
                                    cols);
      };
    }
    return out;
  }

  // NeoX rotary over heads; x:[B*n, H*dh], position = row index mod n
  Id rotary(Id x, int64_t batch, int64_t n, int64_t heads, T base = T(10000)) {
    const Tensor<T>& X = val(x);
    require(X.ndim() == 2 && X.dim(0) == batch * n && X.dim(1) % heads == 0, "rotary",
            "bad shape " + shape_str(X.shape));
    const int64_t dh = X.dim(1) / heads;
    Tensor<T> Y(X.shape);
    kernels::par::rotary(X.data.data(), Y.data.data(), batch, n, heads, dh, base, +1);
    Id out = push(std::move(Y), "rotary");
    if (recording) {
      nodes_.back().back = [this, x, out, batch, n, heads, dh, base] {
        const Tensor<T>& go = grad(out);
        Tensor<T> dx(go.shape);
        kernels::par::rotary(go.data.data(), dx.data.data(), batch, n, heads, dh, base, -1);
        accum(grad(x), dx);
      };
    }
    return out;
  }

  // causal multi-head attention over explicit K/V; q,k,v:[B*n, H*dh]
  Id attention(Id q, Id k, Id v, int64_t batch, int64_t n, int64_t heads) {
    const Tensor<T>& Q = val(q);
    require(Q.same_shape(val(k)) && Q.same_shape(val(v)), "attention", "q/k/v shape mismatch");
    require(Q.dim(0) == batch * n && Q.dim(1) % heads == 0, "attention",
            "bad shape " + shape_str(Q.shape));
    const int64_t dh = Q.dim(1) / heads;
    Tensor<T> Y(Q.shape);
    kernels::par::attention_causal_fwd(Q.data.data(), val(k).data.data(), val(v).data.data(),
                                       Y.data.data(), batch, n, heads, dh);
    Id out = push(std::move(Y), "attention");
    if (recording) {
      nodes_.back().back = [this, q, k, v, out, batch, n, heads, dh] {
        kernels::par::attention_causal_bwd(
            val(q).data.data(), val(k).data.data(), val(v).data.data(),
            grad(out).data.data(), grad(q).data.data(), grad(k).data.data(),
            grad(v).data.data(), batch, n, heads, dh);
      };
    }
    return out;
  }

  // ------------------------------------------------------------- select / gather

  // Elementwise select; mask holds 0/1, either the full shape of a/b or one
  // entry per row (broadcast across columns). Gradient flows only to the
  // selected branch; the mask is a constant.
  Id where(const Tensor<T>& mask, Id a, Id b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require(A.same_shape(B), "where", "a/b shape mismatch");
    const bool rowwise = mask.numel() != A.numel();
    if (rowwise) {
      require(A.ndim() == 2 && mask.numel() == A.dim(0), "where",
              "mask not broadcastable: " + shape_str(mask.shape) + " to " + shape_str(A.shape));
    }
    Tensor<T> C(A.shape);
    const int64_t cols = rowwise ? A.dim(1) : 1;
    const T* ma = mask.data.data();
#pragma omp parallel for schedule(static) if (C.numel() > 1 << 15)
    for (int64_t i = 0; i < C.numel(); ++i) {
      C.at(i) = ma[rowwise ? i / cols : i] != T(0) ? A.at(i) : B.at(i);
    }
    Id out = push(std::move(C), "where");
    if (recording) {
      nodes_.back().back = [this, mask, a, b, out, rowwise, cols] {
        const Tensor<T>& go = grad(out);
        Tensor<T>&da = grad(a), &db = grad(b);
        const T* ma = mask.data.data();
        for (int64_t i = 0; i < go.numel(); ++i) {
          if (ma[rowwise ? i / cols : i] != T(0)) {
            da.at(i) += go.at(i);
          } else {
            db.at(i) += go.at(i);
          }
        }
      };
    }
    return out;
  }

  // row gather: out[r] = table[ids[r]]; backward scatter-adds into the table
  Id embedding(Id table, const std::vector<int32_t>& ids) {
    const Tensor<T>& V = val(table);
    require(V.ndim() == 2, "embedding", "table must be 2-D");
    const int64_t rows = static_cast<int64_t>(ids.size()), d = V.dim(1);
    Tensor<T> E({rows, d});
    for (int64_t r = 0; r < rows; ++r) {
      const int32_t id = ids[static_cast<size_t>(r)];
      require(id >= 0 && id < V.dim(0), "embedding", "index out of range");
      std::copy_n(V.data.data() + static_cast<int64_t>(id) * d, d, E.data.data() + r * d);
    }
    Id out = push(std::move(E), "embedding");
    if (recording) {
      nodes_.back().back = [this, table, ids, out, d] {
        const Tensor<T>& go = grad(out);
        Tensor<T>& dv = grad(table);
        for (size_t r = 0; r < ids.size(); ++r) {
          const T* src = go.data.data() + static_cast<int64_t>(r) * d;
          T* dst = dv.data.data() + static_cast<int64_t>(ids[r]) * d;
          for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
        }
      };
    }
    return out;
  }

  // E' per row: mask=1 -> E + s*upd, mask=0 -> E bitwise. s:[rows], mask constant.
  Id masked_scaled_add(Id e, Id upd, Id s, const Tensor<T>& mask) {
    const Tensor<T>&E = val(e), &U = val(upd), &S = val(s);
    require(E.same_shape(U) && E.ndim() == 2, "masked_scaled_add", "E/upd shape mismatch");
    const int64_t rows = E.dim(0), cols = E.dim(1);
    require(S.numel() == rows && mask.numel() == rows, "masked_scaled_add",
            "s/mask length mismatch");
    Tensor<T> Y(E.shape);
#pragma omp parallel for schedule(static) if (rows * cols > 1 << 15)
    for (int64_t r = 0; r < rows; ++r) {
      const T* er = E.data.data() + r * cols;
      T* yr = Y.data.data() + r * cols;
      if (mask.at(r) != T(0)) {
        const T sv = S.at(r);
        const T* ur = U.data.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) yr[c] = er[c] + sv * ur[c];
      } else {
        std::copy_n(er, cols, yr);
      }
    }
    Id out = push(std::move(Y), "masked_scaled_add");
    if (recording) {
      nodes_.back().back = [this, e, upd, s, mask, out, rows, cols] {
        const Tensor<T>& go = grad(out);
        accum(grad(e), go);
        Tensor<T>&du = grad(upd), &ds = grad(s);
        const Tensor<T>& S = val(s);
        const Tensor<T>& U = val(upd);
        for (int64_t r = 0; r < rows; ++r) {
          if (mask.at(r) == T(0)) continue;
          const T* gr = go.data.data() + r * cols;
          const T* ur = U.data.data() + r * cols;
          T* dur = du.data.data() + r * cols;
          const T sv = S.at(r);
          T acc = T(0);
          for (int64_t c = 0; c < cols; ++c) {
            dur[c] += sv * gr[c];
            acc += gr[c] * ur[c];
          }
          ds.at(r) += acc;
        }
      };
    }
    return out;
  }

  Id reshape(Id a, std::vector<int64_t> shape) {
    require(Tensor<T>::numel_of(shape) == val(a).numel(), "reshape", "element count mismatch");
    Tensor<T> Y(std::move(shape), val(a).data);
    Id out = push(std::move(Y), "reshape");
    if (recording) {
      nodes_.back().back = [this, a, out] {
        const Tensor<T>& go = grad(out);
        Tensor<T>& da = grad(a);
        for (int64_t i = 0; i < go.numel(); ++i) da.at(i) += go.at(i);
      };
    }
    return out;
  }

  Id concat1d(const std::vector<Id>& parts) {
    int64_t total = 0;
    for (Id p : parts) total += val(p).numel();
    Tensor<T> Y({total});
    int64_t off = 0;
    for (Id p : parts) {
      std::copy_n(val(p).data.data(), val(p).numel(), Y.data.data() + off);
      off += val(p).numel();
    }
    Id out = push(std::move(Y), "concat1d");
    if (recording) {
      nodes_.back().back = [this, parts, out] {
        const Tensor<T>& go = grad(out);
        int64_t off2 = 0;
        for (Id p : parts) {
          Tensor<T>& dp = grad(p);
          for (int64_t i = 0; i < dp.numel(); ++i) dp.at(i) += go.at(off2 + i);
          off2 += dp.numel();
        }
      };
    }
    return out;
  }

  // gather scalar elements by flat index, in the given index order
  Id gather1d(Id a, std::vector<int64_t> idx) {
    const Tensor<T>& A = val(a);
    Tensor<T> Y({static_cast<int64_t>(idx.size())});
    for (size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] >= 0 && idx[i] < A.numel(), "gather1d", "index out of range");
      Y.at(static_cast<int64_t>(i)) = A.at(idx[i]);
    }
    Id out = push(std::move(Y), "gather1d");
    if (recording) {
      nodes_.back().back = [this, a, idx, out] {
        const Tensor<T>& go = grad(out);
        Tensor<T>& da = grad(a);
        for (size_t i = 0; i < idx.size(); ++i) da.at(idx[i]) += go.at(static_cast<int64_t>(i));
      };
    }
    return out;
  }

  // ------------------------------------------------------------- reductions / losses

  Id sum_all(Id a) {
    const Tensor<T>& A = val(a);
    T acc = T(0);
    for (int64_t i = 0; i < A.numel(); ++i) acc += A.at(i);
    Tensor<T> Y({1});
    Y.at(0) = acc;
    Id out = push(std::move(Y), "sum");
    if (recording) {
      nodes_.back().back = [this, a, out] {
        const T g = grad(out).at(0);
        Tensor<T>& da = grad(a);
        for (int64_t i = 0; i < da.numel(); ++i) da.at(i) += g;
      };
    }
    return out;
  }

  Id mean_all(Id a) {
    const int64_t n = val(a).numel();
    require(n > 0, "mean", "empty tensor");
    return scale(sum_all(a), T(1) / static_cast<T>(n));
  }

  // weighted token cross-entropy: sum_r w[r] * (logsumexp(z[r]) - z[r][y[r]]).
  // Rows with w=0 are skipped entirely.
  Id cross_entropy(Id logits, const std::vector<int32_t>& targets,
                   const std::vector<T>& weights) {
    const Tensor<T>& Z = val(logits);
    require(Z.ndim() == 2, "cross_entropy", "logits must be 2-D");
    const int64_t rows = Z.dim(0), cols = Z.dim(1);
    require(static_cast<int64_t>(targets.size()) == rows &&
                static_cast<int64_t>(weights.size()) == rows,
            "cross_entropy", "targets/weights length mismatch");
    T loss = T(0);
    for (int64_t r = 0; r < rows; ++r) {
      const T w = weights[static_cast<size_t>(r)];
      if (w == T(0)) continue;
      const int32_t y = targets[static_cast<size_t>(r)];
      require(y >= 0 && y < cols, "cross_entropy", "target id out of range");
      const T* zr = Z.data.data() + r * cols;
      T mx = zr[0];
      for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, zr[j]);
      T se = T(0);
      for (int64_t j = 0; j < cols; ++j) se += std::exp(zr[j] - mx);
      loss += w * (std::log(se) + mx - zr[y]);
    }
    Tensor<T> Y({1});
    Y.at(0) = loss;
    Id out = push(std::move(Y), "cross_entropy");
    if (recording) {
      nodes_.back().back = [this, logits, targets, weights, out, rows, cols] {
        const T g = grad(out).at(0);
        const Tensor<T>& Z = val(logits);
        Tensor<T>& dz = grad(logits);
#pragma omp parallel for schedule(static) if (rows > 64)
        for (int64_t r = 0; r < rows; ++r) {
          const T w = weights[static_cast<size_t>(r)];
          if (w == T(0)) continue;
          const T* zr = Z.data.data() + r * cols;
          T* dzr = dz.data.data() + r * cols;
          T mx = zr[0];
          for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, zr[j]);
          T se = T(0);
          for (int64_t j = 0; j < cols; ++j) se += std::exp(zr[j] - mx);
          const T inv = T(1) / se;
          const T gw = g * w;
          for (int64_t j = 0; j < cols; ++j) dzr[j] += gw * std::exp(zr[j] - mx) * inv;
          dzr[targets[static_cast<size_t>(r)]] -= gw;
        }
      };
    }
    return out;
  }

  // ------------------------------------------------------------- backward

  void backward(Id root) {
    if (!recording) throw std::logic_error("backward on a non-recording tape");
    require(val(root).numel() == 1, "backward", "root must be scalar");
    grad(root).at(0) = T(1);
    for (size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.back && n.grad.numel() != 0) n.back();
    }
  }

 private:
  std::vector<Node> nodes_;

  Id push(Tensor<T> v, const char* op, std::function<void()> back = nullptr) {
    for (const T& x : v.data) {
      if (!std::isfinite(x)) {
        throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
      }
    }
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, std::move(back)});
    return static_cast<Id>(nodes_.size() - 1);
  }

  static void require(bool ok, const char* op, const std::string& msg) {
    if (!ok) throw std::invalid_argument(std::string(op) + ": " + msg);
  }

  static void accum(Tensor<T>& dst, const Tensor<T>& src) {
    T* d = dst.data.data();
    const T* s = src.data.data();
    const int64_t n = dst.numel();
#pragma omp parallel for schedule(static) if (n > 1 << 16)
    for (int64_t i = 0; i < n; ++i) d[i] += s[i];
  }

  template <typename F>
  static void ew1(const Tensor<T>& a, Tensor<T>& out, F f) {
    const T* x = a.data.data();
    T* y = out.data.data();
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (n > 1 << 16)
    for (int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
  }

  template <typename F>
  static void ew2(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, F f) {
    const T* x = a.data.data();
    const T* yv = b.data.data();
    T* y = out.data.data();
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (n > 1 << 16)
    for (int64_t i = 0; i < n; ++i) y[i] = f(x[i], yv[i]);
  }
};

}  // namespace adaponder
