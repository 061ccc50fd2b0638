#pragma once

// Test-only fixed-depth control: a fixed-K probability-weighted-update
// recurrent LM (no gates, no pruning) written as flat serial float64 loops
// with its own hand-derived backward pass. Shares nothing with the tape or
// kernels code paths; parameter values and batches are shared as data only.

#include <cstdint>
#include <vector>

#include "adaponder/config.hpp"
#include "adaponder/data.hpp"
#include "adaponder/params.hpp"

namespace control {

// Forward through the K-iteration recurrence with s=1 everywhere and CE on
// the final iteration's logits; mean over tokens. When grads is true the
// hand-derived backward accumulates into ps grads (caller zeroes first).
// final_logits (optional) receives z^{K-1} [M x V].
double run_control(adaponder::ParameterStore<double>& ps, const adaponder::Config& cfg,
                   const std::vector<int32_t>& inputs, const std::vector<int32_t>& targets,
                   int64_t B, int64_t n, bool grads,
                   std::vector<double>* final_logits = nullptr);

struct ControlAdam {
  std::vector<std::vector<double>> m, v;
  void init(const adaponder::ParameterStore<double>& ps);
};

double control_lr(int64_t step, const adaponder::Config& cfg);

// clip + AdamW with decoupled decay, matching the published recipe
double control_train_step(adaponder::ParameterStore<double>& ps, ControlAdam& opt,
                          const adaponder::Batch& batch, int64_t step,
                          const adaponder::Config& cfg);

}  // namespace control
