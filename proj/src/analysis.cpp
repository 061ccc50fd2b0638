#include "adaponder/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace adaponder {

HaltStats halt_nll_stats(const std::vector<TokenHaltRecord>& records, int64_t K, double clip,
                         int64_t bins) {
  HaltStats st;
  st.clip = clip;
  st.bins = bins;
  st.groups.resize(static_cast<size_t>(K));
  for (auto& g : st.groups) g.hist.assign(static_cast<size_t>(bins), 0);
  for (const auto& r : records) {
    if (r.halt_iter < 0 || r.halt_iter >= K) {
      throw std::invalid_argument("halt_nll_stats: halt_iter out of range");
    }
    auto& g = st.groups[static_cast<size_t>(r.halt_iter)];
    g.count++;
    g.mean_nll += r.nll;
    const double clipped = std::min(r.nll, clip);
    int64_t bin = static_cast<int64_t>(clipped / clip * static_cast<double>(bins));
    bin = std::clamp<int64_t>(bin, 0, bins - 1);
    g.hist[static_cast<size_t>(bin)]++;
  }
  for (auto& g : st.groups) {
    if (g.count > 0) g.mean_nll /= static_cast<double>(g.count);
  }
  return st;
}

std::string halt_stats_csv(const HaltStats& stats) {
  std::string out = "halt_step,count,mean_nll\n";
  for (size_t i = 0; i < stats.groups.size(); ++i) {
    const auto& g = stats.groups[i];
    if (g.count == 0) continue;  // absent, not zero
    out += std::to_string(i) + "," + std::to_string(g.count) + "," +
           std::to_string(g.mean_nll) + "\n";
  }
  return out;
}

PruningPolicy::Kind policy_kind_from_name(const std::string& name) {
  if (name == "adaptive") return PruningPolicy::Kind::adaptive;
  if (name == "uniform") return PruningPolicy::Kind::uniform;
  if (name == "geometric") return PruningPolicy::Kind::geometric;
  throw std::invalid_argument("unknown policy: " + name);
}

std::string policy_name(PruningPolicy::Kind k) {
  switch (k) {
    case PruningPolicy::Kind::adaptive: return "adaptive";
    case PruningPolicy::Kind::uniform: return "uniform";
    case PruningPolicy::Kind::geometric: return "geometric";
  }
  return "?";
}

double expected_multiplier(PruningPolicy::Kind kind, double param, int64_t K) {
  // survival(j) = probability of still being active in iteration j
  double mult = 0;
  double survival = 1.0;
  for (int64_t j = 0; j < K; ++j) {
    if (j > 0) {
      switch (kind) {
        case PruningPolicy::Kind::adaptive:
        case PruningPolicy::Kind::uniform:
          survival *= param;  // constant keep rate per continuation decision
          break;
        case PruningPolicy::Kind::geometric:
          survival *= std::pow(param, static_cast<double>(j));  // keep prob r^j at iteration j
          break;
      }
    }
    mult += survival;
  }
  return mult;
}

double solve_policy_param(PruningPolicy::Kind kind, double target, int64_t K) {
  if (target < 1.0 || target > static_cast<double>(K)) {
    throw std::invalid_argument("target multiplier " + std::to_string(target) +
                                " infeasible: must lie in [1, K]");
  }
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-9; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (expected_multiplier(kind, mid, K) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

template <typename T>
MaskPolicy<T> make_mask_policy(const PruningPolicy& policy, const Config& cfg, uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  const PruningPolicy pol = policy;
  const int64_t K = cfg.K;
  return [pol, rng, K](int iter, const Tensor<T>& s, const Tensor<T>& m) {
    const int64_t M = m.numel();
    Tensor<T> next = m;
    switch (pol.kind) {
      case PruningPolicy::Kind::adaptive: {
        std::vector<int64_t> active;
        for (int64_t t = 0; t < M; ++t) {
          if (m.at(t) != T(0)) active.push_back(t);
        }
        double frac;  // target share of all tokens active after this gate
        if (!pol.step_fractions.empty()) {
          frac = iter < static_cast<int>(pol.step_fractions.size())
                     ? pol.step_fractions[static_cast<size_t>(iter)]
                     : pol.step_fractions.back();
        } else {
          frac = std::pow(pol.param, static_cast<double>(iter + 1));
        }
        const int64_t keep = std::clamp<int64_t>(
            std::llround(frac * static_cast<double>(M)), 0, static_cast<int64_t>(active.size()));
        const int64_t prune = static_cast<int64_t>(active.size()) - keep;
        if (prune > 0) {
          // prune the `prune` active tokens with the smallest gate values
          std::stable_sort(active.begin(), active.end(),
                           [&s](int64_t a, int64_t b) { return s.at(a) < s.at(b); });
          for (int64_t i = 0; i < prune; ++i) next.at(active[static_cast<size_t>(i)]) = T(0);
        }
        break;
      }
      case PruningPolicy::Kind::uniform: {
        for (int64_t t = 0; t < M; ++t) {
          if (m.at(t) != T(0) && rng->uniform() >= pol.param) next.at(t) = T(0);
        }
        break;
      }
      case PruningPolicy::Kind::geometric: {
        const double keep = std::pow(pol.param, static_cast<double>(iter + 1));
        for (int64_t t = 0; t < M; ++t) {
          if (m.at(t) != T(0) && rng->uniform() >= keep) next.at(t) = T(0);
        }
        break;
      }
    }
    (void)K;
    return next;
  };
}

template <typename T>
PolicyEval apply_policy(const ParameterStore<T>& ps, const Corpus& corpus,
                        const std::string& split, const Config& cfg,
                        const PruningPolicy& policy, double target_multiplier, uint64_t seed) {
  PruningPolicy solved = policy;
  if (solved.step_fractions.empty()) {
    solved.param = solve_policy_param(policy.kind, target_multiplier, cfg.K);
  }
  MaskPolicy<T> mp = make_mask_policy<T>(solved, cfg, seed);
  EvalReport rep = evaluate(ps, corpus, split, cfg, nullptr, mp);
  PolicyEval out;
  out.eval_loss = rep.mean_nll;
  out.achieved_multiplier = rep.flops.multiplier;
  return out;
}

template <typename T>
std::vector<IsoFlopRow> iso_flop_sweep(const ParameterStore<T>& ps, const Corpus& corpus,
                                       const std::string& split, const Config& cfg,
                                       const std::vector<double>& multipliers, uint64_t seed) {
  std::vector<IsoFlopRow> rows;
  const PruningPolicy::Kind kinds[] = {PruningPolicy::Kind::adaptive,
                                       PruningPolicy::Kind::uniform,
                                       PruningPolicy::Kind::geometric};
  for (double target : multipliers) {
    for (auto kind : kinds) {
      PruningPolicy pol;
      pol.kind = kind;
      const uint64_t pseed =
          seed ^ (static_cast<uint64_t>(kind) << 32) ^ static_cast<uint64_t>(target * 1000);
      PolicyEval pe = apply_policy(ps, corpus, split, cfg, pol, target, pseed);
      rows.push_back(IsoFlopRow{policy_name(kind), target, pe.achieved_multiplier, pe.eval_loss});
    }
  }
  return rows;
}

std::string iso_flop_csv(const std::vector<IsoFlopRow>& rows) {
  std::string out = "policy,target_multiplier,achieved_multiplier,eval_loss\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.4f,%.6f,%.6f\n", r.policy.c_str(),
                  r.target_multiplier, r.achieved_multiplier, r.eval_loss);
    out += buf;
  }
  return out;
}

#define INSTANTIATE(T)                                                                       \
  template MaskPolicy<T> make_mask_policy<T>(const PruningPolicy&, const Config&, uint64_t); \
  template PolicyEval apply_policy<T>(const ParameterStore<T>&, const Corpus&,               \
                                      const std::string&, const Config&,                     \
                                      const PruningPolicy&, double, uint64_t);               \
  template std::vector<IsoFlopRow> iso_flop_sweep<T>(const ParameterStore<T>&, const Corpus&, \
                                                     const std::string&, const Config&,      \
                                                     const std::vector<double>&, uint64_t);

INSTANTIATE(float)
INSTANTIATE(double)
#undef INSTANTIATE

}  // namespace adaponder
