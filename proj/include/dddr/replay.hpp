#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "dddr/inversion.hpp"

namespace dddr {

/// `n` samples conditioned on [prompt; v_cls], quantized to 8-bit levels and
/// labelled `cls`. Deterministic in (seed, cls).
std::vector<LabeledImage> generate_class_samples(const EmbeddingStore& store, std::uint32_t cls, std::size_t n,
                                                 const DiffusionModel& model, std::uint64_t seed,
                                                 const ImageShape& image);

struct ReplayCache {
  std::uint64_t seed = 0;
  std::size_t per_class = 0;
  std::size_t sampler_steps = 0;
  ImageShape image;
  std::map<std::uint32_t, std::vector<LabeledImage>> by_class;

  std::size_t size() const;
  bool empty() const { return by_class.empty(); }
  std::vector<std::uint32_t> classes() const;
  /// Throws DataError on a count or label mismatch.
  void validate() const;
  /// Flattened into class order.
  Corpus as_corpus(std::size_t class_count) const;
};

ReplayCache make_replay_cache(const EmbeddingStore& store, std::span<const std::uint32_t> classes, std::size_t per_class,
                              const DiffusionModel& model, std::uint64_t seed, const ImageShape& image);

struct ReplayCounts {
  std::size_t past = 50;
  std::size_t current = 50;
};

struct ReplaySets {
  ReplayCache past;
  ReplayCache current;
};

/// Historical and current-task replay. The same call returns the same bytes,
/// so every client of a round sees identical sets.
ReplaySets build_replay_sets(const EmbeddingStore& store, std::span<const std::uint32_t> past,
                             std::span<const std::uint32_t> current, const ReplayCounts& counts,
                             const DiffusionModel& model, std::uint64_t seed, const ImageShape& image);

/// PGM files, manifest.csv (filename,label,seed,class plus a trailing checksum
/// line) and cache.json with the generation metadata.
void write_replay_cache(const ReplayCache& cache, const std::filesystem::path& dir);
/// Throws DataError naming the manifest line on malformed rows, and on a
/// checksum mismatch.
ReplayCache read_replay_cache(const std::filesystem::path& dir);

}  // namespace dddr
