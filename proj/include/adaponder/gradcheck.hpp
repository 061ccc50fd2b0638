#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "adaponder/params.hpp"

namespace adaponder {

struct GradCheckReport {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t checked = 0;
};

// Central finite differences against analytic gradients for every parameter
// element (or a random subsample of max_per_param when positive).
//
//   loss_fn:  pure forward evaluation of the scalar objective
//   grad_fn:  fills ps gradients analytically (tape backward)
//
// loss_fn must be deterministic: it is evaluated twice up front and any
// disagreement is an error.
template <typename T>
GradCheckReport grad_check(ParameterStore<T>& ps,
                           const std::function<T(const ParameterStore<T>&)>& loss_fn,
                           const std::function<void(ParameterStore<T>&)>& grad_fn, T eps,
                           int64_t max_per_param = 0, uint64_t seed = 1) {
  const T l1 = loss_fn(ps);
  const T l2 = loss_fn(ps);
  if (l1 != l2) {
    throw std::runtime_error("grad_check: loss function is not deterministic (" +
                             std::to_string(static_cast<double>(l1)) + " vs " +
                             std::to_string(static_cast<double>(l2)) + ")");
  }

  ps.zero_grads();
  grad_fn(ps);

  GradCheckReport rep;
  Rng rng(seed);
  for (auto& p : ps.all()) {
    const int64_t n = p.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      if (max_per_param > 0 && n > max_per_param) {
        // random subsample: keep each element with probability max_per_param/n
        if (rng.uniform() >= static_cast<double>(max_per_param) / static_cast<double>(n)) {
          continue;
        }
      }
      const T orig = p.value.at(i);
      p.value.at(i) = orig + eps;
      const T lp = loss_fn(ps);
      p.value.at(i) = orig - eps;
      const T lm = loss_fn(ps);
      p.value.at(i) = orig;
      const double fd = static_cast<double>(lp - lm) / (2.0 * static_cast<double>(eps));
      const double an = static_cast<double>(p.grad.at(i));
      const double abs_err = std::fabs(fd - an);
      // the 1e-3 floor keeps finite-difference roundoff on near-zero
      // gradients from reading as large relative errors
      const double rel = abs_err / std::max({1e-3, std::fabs(fd), std::fabs(an)});
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.max_abs_err = abs_err;
        rep.worst_param = p.name;
        rep.worst_index = i;
      }
      rep.checked++;
    }
  }
  return rep;
}

}  // namespace adaponder
