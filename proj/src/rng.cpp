#include "dddr/rng.hpp"

#include <cmath>
#include <numbers>

#include "dddr/error.hpp"
#include "dddr/tensor.hpp"

namespace dddr {
namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t combine(std::uint64_t key, std::uint64_t tag) { return mix64(key ^ mix64(tag + kGolden)); }

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream) : key_(combine(mix64(seed), stream)) {}

Rng Rng::keyed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  Rng r(seed, 0);
  for (std::uint64_t t : tags) r.key_ = combine(r.key_, t);
  return r;
}

std::uint64_t Rng::purpose(std::string_view tag) {
  return fnv1a(tag.data(), tag.size());
}

Rng Rng::derive(std::initializer_list<std::uint64_t> tags) const {
  Rng r = *this;
  r.counter_ = 0;
  r.key_ = combine(key_, 0x5bd1e995ULL);
  for (std::uint64_t t : tags) r.key_ = combine(r.key_, t);
  return r;
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform_open0() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error(ErrorKind::Usage, "Rng::below: n must be positive");
  // Lemire-style rejection keeps the draw unbiased.
  const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x < limit) return x % n;
  }
}

double Rng::normal() {
  // Box-Muller, cosine branch only; one normal per two uniforms keeps the
  // draw index -> value mapping trivial.
  const double u1 = uniform_open0();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw Error(ErrorKind::Usage, "Rng::gamma: shape must be positive");
  if (shape < 1.0) {
    // Boost to shape+1 and scale by U^(1/shape).
    const double g = gamma(shape + 1.0);
    return g * std::pow(uniform_open0(), 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform_open0();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<float> Rng::normal_vector(std::size_t n, float stddev) {
  std::vector<float> out(n);
  for (auto& v : out) v = static_cast<float>(normal()) * stddev;
  return out;
}

}  // namespace dddr
