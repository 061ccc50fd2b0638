#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adaponder/config.hpp"
#include "adaponder/data.hpp"
#include "adaponder/model.hpp"
#include "adaponder/params.hpp"

namespace adaponder {

struct TrainMetrics {
  int64_t step = 0;
  double loss_ce = 0;
  double loss_ponder = 0;
  double k_s = 0;
  double lr = 0;
  double prune_rate = 0;  // fraction of token-iterations with m=0 among i>=1
  double tokens_per_sec = 0;
};

// Eq-style warmup of the bottom-K fraction: 0 up to S0, linear on (S0,S1),
// k_max from S1 on.
double k_schedule(int64_t step, int64_t S0, int64_t S1, double k_max);

// Cosine schedule with linear warmup over warmup_ratio*total_steps, decaying
// to 10% of the peak rate.
double lr_at(int64_t step, const Config& cfg);

// Mean cross-entropy between each token's halt-time logits and its target
// (final-iteration logits when cfg.ce_at_final).
template <typename T>
typename Tape<T>::Id ce_loss(Tape<T>& tape, const IterationTrace<T>& trace,
                             const std::vector<int32_t>& targets, const Config& cfg);

// Mean of the smallest ceil(k_s*N) gate values among tokens active at gate
// time, over all gate iterations; 0 when k_s=0 or nothing is active.
// Operates on s (probabilities) unless cfg.ponder_on_logits.
template <typename T>
typename Tape<T>::Id ponder_loss(Tape<T>& tape, const IterationTrace<T>& trace, double k_s,
                                 const Config& cfg);

// prune_rate of a trace: share of (token, iteration>=1) pairs with mask 0
template <typename T>
double prune_rate(const IterationTrace<T>& trace, const Config& cfg);

template <typename T>
struct AdamW {
  std::vector<Tensor<T>> m, v;

  void init(const ParameterStore<T>& ps) {
    m.clear();
    v.clear();
    for (const auto& p : ps.all()) {
      m.push_back(Tensor<T>::zeros(p.value.shape));
      v.push_back(Tensor<T>::zeros(p.value.shape));
    }
  }

  // decoupled weight decay; only gate parameters move under freeze_backbone
  void step(ParameterStore<T>& ps, int64_t t, double lr, const Config& cfg);
};

template <typename T>
struct StepResult {
  TrainMetrics metrics;
  IterationTrace<T>* trace = nullptr;  // unused; losses are scalars in metrics
};

// One optimization step: forward, Stage-1/Stage-2 loss, backward, clip, AdamW.
// Throws with a diagnostic batch dump path on non-finite loss.
template <typename T>
TrainMetrics train_step(ParameterStore<T>& ps, AdamW<T>& opt, const Batch& batch, int64_t step,
                        const Config& cfg);

struct TrainResult {
  std::string final_checkpoint;
  std::string metrics_path;
  TrainMetrics last;
};

// Full run: batches from the corpus, metrics JSONL, periodic checkpoints.
// resume_from (optional) must reproduce the uninterrupted trajectory bitwise
// in deterministic mode.
TrainResult train(const Config& cfg, const Corpus& corpus, const std::string& out_dir,
                  const std::string& resume_from = "");

// Checkpoint with optimizer state and data-rng for exact resume.
void save_train_checkpoint(const std::string& path, const ParameterStore<float>& ps,
                           const AdamW<float>& opt, int64_t step, const Config& cfg,
                           const Rng& data_rng);

struct LoadedTrainState {
  int64_t step = 0;
  Rng data_rng;
};

LoadedTrainState load_train_checkpoint(const std::string& path, ParameterStore<float>& ps,
                                       AdamW<float>& opt);

}  // namespace adaponder
