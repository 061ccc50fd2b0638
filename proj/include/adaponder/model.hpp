#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "adaponder/config.hpp"
#include "adaponder/halting.hpp"
#include "adaponder/params.hpp"
#include "adaponder/tape.hpp"

namespace adaponder {

// Parameters registered as tape leaves for one forward/backward pass.
template <typename T>
class TapedParams {
 public:
  TapedParams(Tape<T>& tape, const ParameterStore<T>& ps) {
    for (const auto& p : ps.all()) ids_[p.name] = tape.leaf(p.value, "param");
  }

  typename Tape<T>::Id id(const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) throw std::invalid_argument("no taped parameter: " + name);
    return it->second;
  }

  // accumulate tape gradients back into the store
  void harvest(Tape<T>& tape, ParameterStore<T>& ps) const {
    for (auto& p : ps.all()) {
      const Tensor<T>& g = tape.grad(ids_.at(p.name));
      for (int64_t i = 0; i < g.numel(); ++i) p.grad.at(i) += g.at(i);
    }
  }

 private:
  std::unordered_map<std::string, typename Tape<T>::Id> ids_;
};

// Decides m^{i+1} from (iteration, gate probs, m^i). The default is the
// threshold rule; the analysis module injects fixed policies here.
template <typename T>
using MaskPolicy = std::function<Tensor<T>(int iter, const Tensor<T>& s, const Tensor<T>& m)>;

// Full record of one recurrent forward: per-iteration hidden/logit/gate nodes,
// entering masks, aligned KV ids, and the resolved halt iteration per token.
template <typename T>
struct IterationTrace {
  struct Iter {
    typename Tape<T>::Id E = -1;  // embeddings entering this iteration
    typename Tape<T>::Id h = -1;
    typename Tape<T>::Id z = -1;
    typename Tape<T>::Id g = -1;  // -1 on the final iteration (no gate)
    typename Tape<T>::Id s = -1;
    Tensor<T> mask;  // m^i entering this iteration
    std::vector<typename Tape<T>::Id> k_al, v_al;  // aligned per-layer caches
  };
  std::vector<Iter> iters;
  Tensor<T> final_mask;        // m^K... the mask after the last gate (m^{K-1})
  std::vector<int> halt_iter;  // [B*n]
  int64_t B = 0, n = 0;
};

template <typename T>
struct BackboneOut {
  typename Tape<T>::Id h;
  typename Tape<T>::Id z;
  std::vector<typename Tape<T>::Id> k_al, v_al;
};

// One causal pre-LN transformer pass with rotary positions. Per layer the
// fresh K/V are aligned against prev_k/prev_v under `mask` before attention
// consumes them; iteration 0 passes empty prev vectors (alignment = identity).
template <typename T>
BackboneOut<T> backbone_forward(Tape<T>& tape, const TapedParams<T>& tp, const Config& cfg,
                                typename Tape<T>::Id E,
                                const std::vector<typename Tape<T>::Id>& prev_k,
                                const std::vector<typename Tape<T>::Id>& prev_v,
                                const Tensor<T>& mask, int64_t B, int64_t n);

// Gate MLP for iteration i on the backbone output h; returns (g, s) ids.
// i must be in [0, K-1); honors shared_gate.
template <typename T>
std::pair<typename Tape<T>::Id, typename Tape<T>::Id> gate(Tape<T>& tape,
                                                           const TapedParams<T>& tp,
                                                           const Config& cfg,
                                                           typename Tape<T>::Id h, int64_t i);

// E' = E + (m_next ⊙ s) * (softmax(z) · V); rows with m_next=0 keep E bitwise.
template <typename T>
typename Tape<T>::Id update_embeddings(Tape<T>& tape, const TapedParams<T>& tp,
                                       typename Tape<T>::Id E, typename Tape<T>::Id z,
                                       typename Tape<T>::Id s, const Tensor<T>& m_next);

// Runs the full K-iteration refinement loop. `policy` overrides the
// threshold rule when provided (fixed pruning policies, analysis).
template <typename T>
IterationTrace<T> recurrent_forward(Tape<T>& tape, const TapedParams<T>& tp, const Config& cfg,
                                    const std::vector<int32_t>& tokens, int64_t B, int64_t n,
                                    const MaskPolicy<T>& policy = nullptr);

}  // namespace adaponder
