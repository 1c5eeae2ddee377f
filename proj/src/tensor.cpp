#include "dddr/tensor.hpp"

namespace dddr {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t h) { return fnv1a(s.data(), s.size(), h); }

namespace {
std::uint64_t mix_tensor(const Tensor& t, std::uint64_t h) {
  for (std::size_t d : t.shape()) {
    const auto d64 = static_cast<std::uint64_t>(d);
    h = fnv1a(&d64, sizeof d64, h);
  }
  return fnv1a(t.data(), t.size() * sizeof(float), h);
}
}  // namespace

std::uint64_t checksum(const Tensor& t) { return mix_tensor(t, 0xcbf29ce484222325ULL); }

std::uint64_t checksum(const ParamSet& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : p) {
    h = fnv1a(name, h);
    h = mix_tensor(t, h);
  }
  return h;
}

}  // namespace dddr
