#include "dddr/optim.hpp"

#include <cmath>

namespace dddr {

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

ParamSet apply_gradient_step(const ParamSet& params, const ParamSet& grads, OptimizerState& opt) {
  require_same_layout(params, grads, "apply_gradient_step");
  const auto& cfg = opt.cfg_;
  ++opt.step_;
  ParamSet out = params;

  if (cfg.kind == OptimizerKind::Sgd) {
    for (auto& [name, p] : out) {
      const auto& g = grads.at(name);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(p[i] - cfg.lr * g[i]);
    }
    return out;
  }

  const double t = static_cast<double>(opt.step_);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : out) {
    const auto& g = grads.at(name);
    if (!opt.m_.contains(name)) {
      opt.m_.set(name, Tensor(p.shape()));
      opt.v_.set(name, Tensor(p.shape()));
    }
    auto& m = opt.m_.at(name);
    auto& v = opt.v_.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      p[i] = static_cast<float>(p[i] - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
  return out;
}

}  // namespace dddr
