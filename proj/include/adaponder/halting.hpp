#pragma once

#include <cstdint>
#include <vector>

#include "adaponder/tensor.hpp"

namespace adaponder {

// Per-layer key/value arrays for one iteration. Rows are flattened (b,t)
// token positions, columns are H*dh head-major features — the same data
// Algorithm-style B x H x n x d_h caches hold, with the mask broadcast per row.
template <typename T>
struct LayerKVCache {
  std::vector<Tensor<T>> keys;    // n_layers tensors [B*n, d]
  std::vector<Tensor<T>> values;  // n_layers tensors [B*n, d]
};

// Persistent mask and halt bookkeeping for one forward pass.
template <typename T>
struct HaltState {
  Tensor<T> mask;                      // current m^i, [B*n] of {0,1}
  std::vector<int> halt_iter;          // first sub-tau iteration, K-1 sentinel
  std::vector<Tensor<T>> s_history;    // s^0..s^{K-2}, each [B*n]
  std::vector<Tensor<T>> mask_history; // m^0..m^{K-1} (mask entering each iteration)
};

// m' = m ⊙ 1(s >= tau). The mask is a constant for gradient purposes.
template <typename T>
Tensor<T> update_mask(const Tensor<T>& m, const Tensor<T>& s, double tau);

// Masked replacement per Algorithm-style alignment: active rows keep the
// current iteration's K/V, pruned rows the previous aligned K/V. When
// `previous` is null (iteration 0) returns `current` unchanged.
template <typename T>
LayerKVCache<T> align_kv(const LayerKVCache<T>& current, const LayerKVCache<T>* previous,
                         const Tensor<T>& mask);

// First-crossing halt index per token from the complete s history
// (iterations 0..K-2); tokens that never cross get K-1. Values after the
// first crossing are ignored (persistence).
template <typename T>
std::vector<int> record_halts(const std::vector<Tensor<T>>& s_history, double tau, int64_t K);

}  // namespace adaponder
