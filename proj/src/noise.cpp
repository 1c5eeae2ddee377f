#include "dddr/noise.hpp"

namespace dddr {

Tensor add_gaussian_noise(const Tensor& x, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
  Tensor out = x;
  if (sigma == 0.0) return out;
  for (auto& v : out.values()) v = static_cast<float>(v + sigma * rng.normal());
  return out;
}

ParamSet add_gaussian_noise(const ParamSet& x, double sigma, Rng& rng) {
  ParamSet out;
  for (const auto& [name, t] : x) out.set(name, add_gaussian_noise(t, sigma, rng));
  return out;
}

}  // namespace dddr
