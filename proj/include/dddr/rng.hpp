#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

namespace dddr {

/// Counter-based generator: draw i of stream (seed, stream) is a pure function
/// of (seed, stream, i), so clients can be replayed in any order.
///
/// Streams are normally derived with `Rng::keyed(seed, {client, round, tag})`,
/// where string tags go through `purpose()`.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  static Rng keyed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);
  /// Hash of a purpose label, for use as a stream tag.
  static std::uint64_t purpose(std::string_view tag);

  /// Child stream; does not advance this generator.
  Rng derive(std::initializer_list<std::uint64_t> tags) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits.
  double uniform();
  /// Uniform in (0, 1].
  double uniform_open0();
  /// Integer uniform in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Gamma(shape, 1) via Marsaglia-Tsang.
  double gamma(double shape);

  std::vector<float> normal_vector(std::size_t n, float stddev = 1.0f);
  /// In-place Fisher-Yates.
  template <class V>
  void shuffle(V& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace dddr
