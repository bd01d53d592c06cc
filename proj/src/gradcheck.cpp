#include "kdmt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "kdmt/error.hpp"

namespace kdmt::ad {
namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

}  // namespace

GradCheckResult check_gradients(const ScalarFn& f,
                                std::span<const Tensor> inputs, double eps,
                                double floor) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.variable(t));
    Var loss = f(tape, vars);
    if (loss.value().size() != 1)
      throw DimensionError("gradient check needs a scalar loss");
    tape.backward(loss);
    for (std::size_t i = 0; i < vars.size(); ++i)
      analytic.push_back(vars[i].grad().empty() ? Tensor(inputs[i].shape())
                                                : vars[i].grad());
  }

  GradCheckResult result;
  std::vector<Tensor> work(inputs.begin(), inputs.end());
  for (std::size_t i = 0; i < work.size(); ++i) {
    for (std::size_t k = 0; k < work[i].size(); ++k) {
      const double x = work[i][k];
      work[i][k] = x + eps;
      const double up = evaluate(f, work);
      work[i][k] = x - eps;
      const double down = evaluate(f, work);
      work[i][k] = x;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i][k];
      const double abs_err = std::abs(a - numeric);
      const double rel =
          abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, rel);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace kdmt::ad
