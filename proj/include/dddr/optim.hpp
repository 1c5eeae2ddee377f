#pragma once

#include <cstdint>
#include <string>

#include "dddr/tensor.hpp"

namespace dddr {

enum class OptimizerKind { Sgd, Adam };

OptimizerKind parse_optimizer_kind(const std::string& s);
std::string to_string(OptimizerKind k);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Optimizer plus its per-parameter moment buffers. Owned by one worker.
class OptimizerState {
 public:
  explicit OptimizerState(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const noexcept { return cfg_; }
  void set_lr(double lr) noexcept { cfg_.lr = lr; }
  std::uint64_t steps() const noexcept { return step_; }
  const ParamSet& first_moment() const noexcept { return m_; }
  const ParamSet& second_moment() const noexcept { return v_; }

 private:
  friend ParamSet apply_gradient_step(const ParamSet&, const ParamSet&, OptimizerState&);
  OptimizerConfig cfg_;
  std::uint64_t step_ = 0;
  ParamSet m_;
  ParamSet v_;
};

/// sgd: p - lr*g. adam: bias-corrected Adam. Increments the step counter.
/// Throws ShapeError listing the symmetric difference when names disagree.
ParamSet apply_gradient_step(const ParamSet& params, const ParamSet& grads, OptimizerState& opt);

}  // namespace dddr
