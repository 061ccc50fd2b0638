#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adaponder/config.hpp"
#include "adaponder/data.hpp"
#include "adaponder/model.hpp"
#include "adaponder/params.hpp"

namespace adaponder {

// Per-token active-iteration counts and the derived compute totals.
// FLOP convention: 2 FLOPs per multiply-add, causal attention context,
// GEMM-class work only (norms and elementwise ops excluded).
struct FlopsReport {
  double multiplier = 0;  // mean(halt_iter + 1), in [1, K]
  double backbone = 0;
  double gate = 0;
  double update = 0;
  double head = 0;
  double total = 0;
  std::vector<int64_t> halt_hist;  // K buckets
  int64_t tokens = 0;
};

// halt_iter is flattened over windows of length n; a token's causal context
// is its position within the window.
FlopsReport count_flops(const std::vector<int>& halt_iter, int64_t n, const Config& cfg);

// Incremental decoding state: K per-iteration cache slots, each one
// LayerKVCache grown one position per emitted token. For a position halted at
// iteration i, slots j>i hold copies of slot i's row.
template <typename T>
struct DecodeState {
  std::vector<std::vector<Tensor<T>>> kcache;  // [K][L] tensors [max_seq_len, d]
  std::vector<std::vector<Tensor<T>>> vcache;
  int64_t len = 0;
  std::vector<int> halt_iter;
  std::vector<int32_t> tokens;
  Rng rng{1};

  static DecodeState make(const Config& cfg);
};

// Processes `token` at the next position: runs iterations until the gate
// halts or K-1, fills this position's cache rows in every slot, records its
// halt iteration, and returns the halt-time logits. Prior positions are never
// recomputed. forced_halt (optional, per position) overrides the tau rule:
// the gate still runs, the decision is forced.
template <typename T>
Tensor<T> decode_extend(DecodeState<T>& state, const ParameterStore<T>& ps, const Config& cfg,
                        int32_t token, const std::vector<int>* forced_halt = nullptr);

// decode_extend + sampling from the halt-time logits (greedy when
// temperature==0; otherwise softmax at the given temperature over the top_k
// candidates, top_k=0 meaning all).
template <typename T>
int32_t decode_step(DecodeState<T>& state, const ParameterStore<T>& ps, const Config& cfg,
                    int32_t token, double temperature = 0.0, int64_t top_k = 0);

// Seeds the state by running the teacher-forced recurrent forward over the
// prompt and copying its aligned per-iteration caches into the slots.
template <typename T>
void prefill(DecodeState<T>& state, const ParameterStore<T>& ps, const Config& cfg,
             const std::vector<int32_t>& prompt);

struct TokenHaltRecord {
  int64_t position = 0;
  int halt_iter = 0;
  std::vector<double> s_history;
  double nll = 0;
};

struct EvalReport {
  double mean_nll = 0;
  double ppl = 0;
  FlopsReport flops;
  int64_t tokens = 0;
};

// Teacher-forced evaluation over sequential windows of a split: per-token NLL
// at halt-time logits, perplexity, FLOPs report. When `records` is non-null it
// receives one TokenHaltRecord per evaluated token. `policy` overrides the
// threshold rule (fixed pruning policies).
template <typename T>
EvalReport evaluate(const ParameterStore<T>& ps, const Corpus& corpus, const std::string& split,
                    const Config& cfg, std::vector<TokenHaltRecord>* records = nullptr,
                    const MaskPolicy<T>& policy = nullptr);

struct GenerateResult {
  std::string text;
  std::vector<int> halt_iter;  // per generated position (prompt + new)
};

template <typename T>
GenerateResult generate(const ParameterStore<T>& ps, const Config& cfg, const std::string& prompt,
                        int64_t max_new_tokens, double temperature = 0.0, int64_t top_k = 0,
                        uint64_t seed = 1);

}  // namespace adaponder
