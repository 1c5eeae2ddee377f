#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dddr/tensor.hpp"

namespace dddr {

/// Image of shape (C,H,W) with values in [0,1], plus its class index.
struct LabeledImage {
  Tensor pixels;
  std::uint32_t label = 0;
};

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t numel() const { return channels * height * width; }
  Shape as_shape() const { return {channels, height, width}; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct Corpus {
  ImageShape image;
  std::size_t class_count = 0;
  std::vector<LabeledImage> items;

  std::size_t size() const { return items.size(); }
  /// Indices of `label` in corpus order.
  std::vector<std::size_t> indices_of(std::uint32_t label) const;
  /// Rows of flattened pixels, (n, C*H*W).
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<std::uint32_t> labels_of(std::span<const std::size_t> indices) const;
};

/// Stack images into (n, C*H*W). All images must share one shape.
Tensor stack_images(std::span<const LabeledImage> images);

// ---------------------------------------------------------------------------
// Procedural shape corpus

enum class ShapeKind { Disk, Square, Triangle, Cross, Diamond };
enum class FillPattern { Solid, Outline, Stripes };

struct ShapeClass {
  ShapeKind shape = ShapeKind::Disk;
  FillPattern fill = FillPattern::Solid;
  friend bool operator==(const ShapeClass&, const ShapeClass&) = default;
};

/// Per-sample rendering jitter. Ranges are inclusive.
struct JitterSpec {
  float scale_min = 0.55f;  // radius as a fraction of half the image side
  float scale_max = 0.70f;
  float max_offset = 1.0f;  // center offset, pixels
  float intensity_min = 0.85f;
  float intensity_max = 1.0f;
  float noise_std = 0.03f;
};

struct CorpusSpec {
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<ShapeClass> classes;
  std::size_t samples_per_class = 250;
  JitterSpec jitter;
  std::uint64_t seed = 0;
};

/// 8 classes: {disk, square, triangle, cross} x {solid, outline}.
std::vector<ShapeClass> desk_shape_classes();
/// Client-side corpus: the desk classes with the client jitter pool.
CorpusSpec desk_client_spec(std::uint64_t seed, std::size_t samples_per_class = 250);
/// Pretraining corpus: same shape categories, disjoint jitter pool (larger,
/// dimmer shapes), generated from an independent seed stream.
CorpusSpec desk_pretraining_spec(std::uint64_t seed, std::size_t samples_per_class = 250);

std::string class_name(const ShapeClass& c);

/// Deterministic; pixels are quantized to 8-bit levels (k/255).
Corpus generate_shapeworld(const CorpusSpec& spec);

// ---------------------------------------------------------------------------
// IDX files

enum class IdxErrorCode { Io, BadMagic, Truncated, CountMismatch };

class IdxError : public DataError {
 public:
  IdxError(IdxErrorCode code, const std::string& what) : DataError(what), code_(code) {}
  IdxErrorCode code() const noexcept { return code_; }

 private:
  IdxErrorCode code_;
};

/// Images file (magic 0x00000803, dims N,H,W) + labels file (0x00000801, N).
/// Pixels are scaled by 1/255. class_count is max(label)+1.
Corpus load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
Corpus parse_idx(const std::string& image_bytes, const std::string& label_bytes);
/// Writes single-channel 8-bit IDX pairs; pixels are rounded to k/255.
void write_idx(const Corpus& corpus, const std::filesystem::path& images, const std::filesystem::path& labels);

// ---------------------------------------------------------------------------
// Task split, partition and holdout

enum class PartitionMode { Iid, Dirichlet };

PartitionMode parse_partition_mode(const std::string& s);
std::string to_string(PartitionMode m);

struct PartitionSpec {
  PartitionMode mode = PartitionMode::Dirichlet;
  double alpha = 0.5;
  std::size_t clients = 5;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Classes split evenly into n_tasks sorted label sets via a seeded permutation.
std::vector<std::vector<std::uint32_t>> split_tasks(std::size_t class_count, std::size_t n_tasks, std::uint64_t seed);
std::vector<std::vector<std::uint32_t>> split_tasks(const Corpus& corpus, std::size_t n_tasks, std::uint64_t seed);

/// Dir(alpha * 1_k) proportions for one class; keyed by (seed, label) so train
/// and local-test partitions of a class share them.
std::vector<double> dirichlet_proportions(const PartitionSpec& spec, std::uint32_t label);

/// Largest-remainder integerization: counts sum to n exactly; ties favour the
/// lower index.
std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t n);

/// Split `indices` (a task's train split) across spec.clients shards. Shards
/// are disjoint, sorted, and their union is `indices`.
std::vector<std::vector<std::size_t>> partition(const Corpus& corpus, std::span<const std::size_t> indices,
                                                const PartitionSpec& spec);

struct HoldoutSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Stratified per class; each class keeps at least one train and one test item.
HoldoutSplit holdout_split(const Corpus& corpus, double test_fraction, std::uint64_t seed);

struct TaskSequencePlan {
  std::vector<std::vector<std::uint32_t>> label_sets;            // [task] -> sorted classes
  std::vector<std::vector<std::vector<std::size_t>>> shards;     // [task][client] -> train indices
  std::vector<std::vector<std::vector<std::size_t>>> local_test; // [task][client] -> test indices
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::map<std::uint32_t, std::vector<std::size_t>> test_by_class;

  std::size_t n_tasks() const { return label_sets.size(); }
  std::size_t clients() const { return shards.empty() ? 0 : shards.front().size(); }
  /// Task index owning `label`.
  std::size_t task_of(std::uint32_t label) const;
};

TaskSequencePlan make_plan(const Corpus& corpus, std::size_t n_tasks, const PartitionSpec& spec,
                           double test_fraction, std::uint64_t seed);

/// Throws DataError if any plan invariant is violated.
void validate_plan(const TaskSequencePlan& plan, const Corpus& corpus);

// ---------------------------------------------------------------------------
// PGM dumps

/// Binary 8-bit PGM (P5). Multi-channel images are written as stacked planes.
void write_pgm(const std::filesystem::path& path, const Tensor& pixels);
Tensor read_pgm(const std::filesystem::path& path, const ImageShape& expected);

/// Directory of PGMs plus manifest.csv (filename,label).
void dump_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus_dump(const std::filesystem::path& dir, const ImageShape& image, std::size_t class_count);

/// Round to the nearest k/255 level.
inline float quantize_u8(float v) {
  const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<float>(static_cast<int>(c * 255.0f + 0.5f)) / 255.0f;
}

}  // namespace dddr
