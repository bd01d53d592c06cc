#include "kdmt/adam.hpp"

#include <cmath>

#include "kdmt/error.hpp"

namespace kdmt {

void AdamOptimizer::step(Seq2SeqModel& model) {
  begin_step();
  for (auto& [name, entry] : model.parameters()) {
    if (!model.is_frozen(entry.group)) update(name, entry.param);
    entry.param.zero_grad();
  }
}

void AdamOptimizer::update(const std::string& name, ad::Parameter& param) {
  if (steps_ == 0)
    throw ContractError("AdamOptimizer::update before begin_step");
  if (param.grad.shape() != param.value.shape())
    throw DimensionError("gradient of " + name + " has shape " +
                         to_string(param.grad.shape()) + ", parameter " +
                         to_string(param.value.shape()));
  auto [it, inserted] = moments_.try_emplace(name);
  Moments& m = it->second;
  if (inserted) {
    m.first = Tensor(param.value.shape(), 0.0);
    m.second = Tensor(param.value.shape(), 0.0);
  } else if (m.first.shape() != param.value.shape()) {
    throw DimensionError("optimizer state for " + name + " has shape " +
                         to_string(m.first.shape()));
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  auto p = param.value.data();
  auto g = param.grad.data();
  auto m1 = m.first.data();
  auto m2 = m.second.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
    m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
    const double mhat = m1[i] / c1;
    const double vhat = m2[i] / c2;
    p[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
  }
}

const AdamOptimizer::Moments* AdamOptimizer::moments(
    const std::string& name) const {
  auto it = moments_.find(name);
  return it == moments_.end() ? nullptr : &it->second;
}

void AdamOptimizer::reset() {
  steps_ = 0;
  moments_.clear();
}

}  // namespace kdmt
