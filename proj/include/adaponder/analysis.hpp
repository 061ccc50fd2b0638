#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adaponder/config.hpp"
#include "adaponder/inference.hpp"

namespace adaponder {

// Per-halt-step token counts, mean NLL and a clipped NLL histogram.
struct HaltStats {
  struct Group {
    int64_t count = 0;
    double mean_nll = 0;
    std::vector<int64_t> hist;
  };
  std::vector<Group> groups;  // index = halt step; count==0 means absent
  double clip = 10.0;         // NLL values clipped here before binning
  int64_t bins = 20;
};

HaltStats halt_nll_stats(const std::vector<TokenHaltRecord>& records, int64_t K,
                         double clip = 10.0, int64_t bins = 20);

// CSV with header halt_step,count,mean_nll; empty groups omitted.
std::string halt_stats_csv(const HaltStats& stats);

// Fixed pruning policies compared against the learned rule under iso-FLOPs.
//  adaptive:  keep the top fraction of active tokens by gate value each step
//  uniform:   keep each active token with constant probability p
//  geometric: keep probability decays as r^i at iteration i
struct PruningPolicy {
  enum class Kind { adaptive, uniform, geometric };
  Kind kind = Kind::adaptive;
  double param = 1.0;  // keep fraction a / keep probability p / decay r
  // optional explicit per-gate-step survival fractions (adaptive only);
  // entry i = share of all tokens still active after gate i
  std::vector<double> step_fractions;
};

PruningPolicy::Kind policy_kind_from_name(const std::string& name);
std::string policy_name(PruningPolicy::Kind k);

// Expected iteration multiplier of a fixed policy in closed form
// (sum of survival probabilities, truncated at K).
double expected_multiplier(PruningPolicy::Kind kind, double param, int64_t K);

// Solve the policy parameter so the expected multiplier hits the target;
// bisection on [0,1] to 1e-6. Throws when target is outside [1, K].
double solve_policy_param(PruningPolicy::Kind kind, double target, int64_t K);

// Mask policy override for evaluate(); rng drives the random policies.
template <typename T>
MaskPolicy<T> make_mask_policy(const PruningPolicy& policy, const Config& cfg, uint64_t seed);

struct PolicyEval {
  double eval_loss = 0;
  double achieved_multiplier = 0;
};

// Evaluate a split with the policy overriding the threshold rule; KV
// alignment and frozen embeddings still apply. Loss is halt-time CE.
template <typename T>
PolicyEval apply_policy(const ParameterStore<T>& ps, const Corpus& corpus,
                        const std::string& split, const Config& cfg,
                        const PruningPolicy& policy, double target_multiplier, uint64_t seed);

struct IsoFlopRow {
  std::string policy;
  double target_multiplier = 0;
  double achieved_multiplier = 0;
  double eval_loss = 0;
};

// All three policies at each target multiplier, parameters solved so expected
// active iterations match the target.
template <typename T>
std::vector<IsoFlopRow> iso_flop_sweep(const ParameterStore<T>& ps, const Corpus& corpus,
                                       const std::string& split, const Config& cfg,
                                       const std::vector<double>& multipliers, uint64_t seed);

// CSV with header policy,target_multiplier,achieved_multiplier,eval_loss
std::string iso_flop_csv(const std::vector<IsoFlopRow>& rows);

}  // namespace adaponder
