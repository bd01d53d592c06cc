#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "kdmt/autodiff.hpp"
#include "kdmt/model.hpp"

namespace kdmt {

struct AdamConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// Bias-corrected Adam with a constant learning rate.
class AdamOptimizer {
 public:
  struct Moments {
    Tensor first;
    Tensor second;
  };

  explicit AdamOptimizer(AdamConfig config = {}) : config_(config) {}

  // Updates every trainable parameter of `model`, then zeroes all gradients
  // (frozen ones included). Frozen parameters are left bit-identical.
  void step(Seq2SeqModel& model);

  // Updates one parameter with the current step counter's bias correction.
  void update(const std::string& name, ad::Parameter& param);

  // Advances the shared step counter; call once per optimizer step before
  // update() when driving parameters by hand.
  void begin_step() { ++steps_; }

  std::uint64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  const Moments* moments(const std::string& name) const;
  // Clears moments and the step counter.
  void reset();

 private:
  AdamConfig config_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace kdmt
