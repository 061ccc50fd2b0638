#include "adaponder/halting.hpp"

#include <algorithm>
#include <stdexcept>

namespace adaponder {

template <typename T>
Tensor<T> update_mask(const Tensor<T>& m, const Tensor<T>& s, double tau) {
  if (m.numel() != s.numel()) throw std::invalid_argument("update_mask: shape mismatch");
  Tensor<T> out(m.shape);
  for (int64_t i = 0; i < m.numel(); ++i) {
    out.at(i) = (m.at(i) != T(0) && static_cast<double>(s.at(i)) >= tau) ? T(1) : T(0);
  }
  return out;
}

template <typename T>
LayerKVCache<T> align_kv(const LayerKVCache<T>& current, const LayerKVCache<T>* previous,
                         const Tensor<T>& mask) {
  if (previous == nullptr) return current;
  if (previous->keys.size() != current.keys.size()) {
    throw std::invalid_argument("align_kv: layer count mismatch");
  }
  LayerKVCache<T> out;
  out.keys.reserve(current.keys.size());
  out.values.reserve(current.values.size());
  for (size_t l = 0; l < current.keys.size(); ++l) {
    const Tensor<T>&kc = current.keys[l], &kp = previous->keys[l];
    const Tensor<T>&vc = current.values[l], &vp = previous->values[l];
    if (!kc.same_shape(kp) || !vc.same_shape(vp)) {
      throw std::invalid_argument("align_kv: shape mismatch between iterations");
    }
    const int64_t rows = kc.dim(0), cols = kc.dim(1);
    if (mask.numel() != rows) throw std::invalid_argument("align_kv: mask length mismatch");
    Tensor<T> ka(kc.shape), va(vc.shape);
    for (int64_t r = 0; r < rows; ++r) {
      const bool keep = mask.at(r) != T(0);
      const T* ks = (keep ? kc : kp).data.data() + r * cols;
      const T* vs = (keep ? vc : vp).data.data() + r * cols;
      std::copy_n(ks, cols, ka.data.data() + r * cols);
      std::copy_n(vs, cols, va.data.data() + r * cols);
    }
    out.keys.push_back(std::move(ka));
    out.values.push_back(std::move(va));
  }
  return out;
}

template <typename T>
std::vector<int> record_halts(const std::vector<Tensor<T>>& s_history, double tau, int64_t K) {
  if (static_cast<int64_t>(s_history.size()) != K - 1) {
    throw std::invalid_argument("record_halts: expected K-1 gate iterations");
  }
  const int64_t n = K > 1 ? s_history[0].numel() : 0;
  std::vector<int> halt(static_cast<size_t>(n), static_cast<int>(K - 1));
  for (int64_t t = 0; t < n; ++t) {
    for (int64_t i = 0; i < K - 1; ++i) {
      if (static_cast<double>(s_history[static_cast<size_t>(i)].at(t)) < tau) {
        halt[static_cast<size_t>(t)] = static_cast<int>(i);
        break;
      }
    }
  }
  return halt;
}

template Tensor<float> update_mask<float>(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> update_mask<double>(const Tensor<double>&, const Tensor<double>&, double);
template LayerKVCache<float> align_kv<float>(const LayerKVCache<float>&, const LayerKVCache<float>*, const Tensor<float>&);
template LayerKVCache<double> align_kv<double>(const LayerKVCache<double>&, const LayerKVCache<double>*, const Tensor<double>&);
template std::vector<int> record_halts<float>(const std::vector<Tensor<float>>&, double, int64_t);
template std::vector<int> record_halts<double>(const std::vector<Tensor<double>>&, double, int64_t);

}  // namespace adaponder
