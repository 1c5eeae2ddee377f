#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dddr/datasets.hpp"
#include "dddr/diffusion.hpp"
#include "dddr/fccl.hpp"
#include "dddr/inversion.hpp"
#include "dddr/replay.hpp"

namespace dddr {

struct DataConfig {
  std::string source = "shapeworld";  // shapeworld | idx
  std::size_t classes = 8;
  std::size_t samples_per_class = 250;
  std::size_t image_size = 16;
  double test_fraction = 0.2;
  std::string idx_images;
  std::string idx_labels;
};

struct PretrainSource {
  std::string checkpoint;  // load instead of training when set
  std::string source = "shapeworld";
  std::size_t samples_per_class = 250;
  std::string idx_images;
  std::string idx_labels;
};

struct ExperimentConfig {
  Method method = Method::Dddr;
  std::uint64_t seed = 0;
  std::size_t n_tasks = 2;
  DataConfig data;
  PartitionSpec partition;  // partition.seed is derived from `seed`
  PretrainSource pretrain_source;
  PretrainConfig pretrain;
  InversionConfig inversion;
  TrainConfig train;
  ClassifierShape classifier;  // input_dim and classes are derived from the data
  ReplayCounts replay;
  FisherMode fisher_mode = FisherMode::Expected;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Every recognised dotted key, in canonical order.
std::vector<std::string> config_keys();

/// JSON text; an empty file or "{}" gives all defaults. Unknown keys and
/// type mismatches are rejected with the dotted key in the message.
ExperimentConfig parse_config_text(const std::string& json_text, const std::vector<std::string>& overrides = {});
ExperimentConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
/// Applies one `key=value` override; the value is read as JSON, falling back
/// to a plain string.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);

/// Effective configuration with every key, as pretty-printed JSON.
std::string config_to_json(const ExperimentConfig& cfg);

}  // namespace dddr
