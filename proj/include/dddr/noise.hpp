#pragma once

#include "dddr/rng.hpp"
#include "dddr/tensor.hpp"

namespace dddr {

/// x + N(0, sigma^2) element-wise; sigma == 0 returns x unchanged. Throws
/// ConfigError for negative sigma.
Tensor add_gaussian_noise(const Tensor& x, double sigma, Rng& rng);
ParamSet add_gaussian_noise(const ParamSet& x, double sigma, Rng& rng);

}  // namespace dddr
