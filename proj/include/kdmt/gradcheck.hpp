#pragma once

#include <functional>
#include <span>
#include <vector>

#include "kdmt/autodiff.hpp"

namespace kdmt::ad {

// Builds a scalar loss on `tape` from variables holding the inputs.
using ScalarFn = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradCheckResult {
  // max over elements of |analytic - numeric| / max(|analytic|, |numeric|, floor)
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients of every input element against central
// differences (f(x+eps) - f(x-eps)) / 2eps.
GradCheckResult check_gradients(const ScalarFn& f,
                                std::span<const Tensor> inputs,
                                double eps = 1e-5, double floor = 1e-6);

}  // namespace kdmt::ad
