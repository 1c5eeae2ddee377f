#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dddr/config.hpp"
#include "dddr/metrics.hpp"

namespace dddr {

/// Thrown when raw training data of a finished task is requested.
class AccessViolation : public DataError {
 public:
  using DataError::DataError;
};

/// Hands out client shards of the current task only. Reads of an earlier
/// task's shards are counted and rejected; task identity never leaves here.
class TaskDataGuard {
 public:
  explicit TaskDataGuard(const TaskSequencePlan& plan) : plan_(&plan) {}

  /// Tasks only move forward.
  void begin_task(std::size_t t);
  std::size_t current() const { return current_; }
  const std::vector<std::size_t>& shard(std::size_t task, std::size_t client);

  std::size_t reads() const { return reads_; }
  std::size_t past_reads() const { return past_reads_; }

 private:
  const TaskSequencePlan* plan_;
  std::size_t current_ = 0;
  bool started_ = false;
  std::size_t reads_ = 0;
  std::size_t past_reads_ = 0;
};

struct ExperimentData {
  Corpus corpus;
  TaskSequencePlan plan;
};

/// Client corpus and task plan; deterministic in the config.
ExperimentData prepare_data(const ExperimentConfig& cfg);
/// Corpus the denoiser is pretrained on.
Corpus pretraining_corpus(const ExperimentConfig& cfg);

struct MetricsReport {
  std::string method;
  std::uint64_t seed = 0;
  AccuracyMatrix matrix;
  double average_accuracy = 0.0;          // mean over classes
  double average_accuracy_samples = 0.0;  // mean over test images
  double forgetting = 0.0;
  std::vector<double> curve;  // seen-class accuracy after each task
  ClientStats local;
  std::string loss_log = "logs/train.jsonl";
};

/// Fills the derived fields of a report from its matrix, test split and
/// final classifier.
MetricsReport build_report(const ExperimentConfig& cfg, const ExperimentData& data, AccuracyMatrix matrix,
                           const ParamSet& final_classifier);

std::string metrics_json(const MetricsReport& r);
/// task,class,accuracy rows.
std::string accuracy_csv(const AccuracyMatrix& m);
/// Reads accuracy.csv back.
AccuracyMatrix read_accuracy_csv(const std::filesystem::path& path);
/// Seen-class accuracy against task index as an SVG line chart.
std::string accuracy_svg(const std::vector<double>& curve, const std::string& title);

/// Artifact layout inside one output directory.
struct RunLayout {
  std::filesystem::path root;
  std::filesystem::path effective_config() const { return root / "config.effective.json"; }
  std::filesystem::path data_dir() const { return root / "data"; }
  std::filesystem::path denoiser() const { return root / "checkpoints" / "denoiser.ckpt"; }
  std::filesystem::path embeddings() const { return root / "checkpoints" / "embeddings.ckpt"; }
  std::filesystem::path classifier(std::size_t task) const;
  std::filesystem::path replay_dir(std::size_t task, const std::string& which) const;
  std::filesystem::path inversion_log(std::size_t task) const;
  std::filesystem::path train_log() const { return root / "logs" / "train.jsonl"; }
  std::filesystem::path metrics() const { return root / "metrics.json"; }
  std::filesystem::path accuracy_csv() const { return root / "accuracy.csv"; }
  std::filesystem::path accuracy_svg() const { return root / "accuracy.svg"; }
  std::filesystem::path summary() const { return root / "run_summary.json"; }
  std::filesystem::path audit() const { return root / "audit.json"; }
};

struct RunResult {
  MetricsReport report;
  std::size_t guard_reads = 0;
  std::size_t guard_past_reads = 0;
  std::uint64_t denoiser_checksum = 0;
  std::uint64_t embeddings_checksum = 0;
};

/// Progress lines (phase, task, round); may be empty.
using ProgressFn = std::function<void(const std::string&)>;

// Stages. Each consumes the previous stage's artifacts from `out` and throws
// MissingArtifact naming the expected file.

/// Writes the client corpus dump and the task plan.
void stage_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out);
/// Pretrains (or loads pretrain.checkpoint) and writes the denoiser checkpoint.
DiffusionModel stage_pretrain(const ExperimentConfig& cfg, const std::filesystem::path& out,
                              const ProgressFn& progress = {});
/// Federated inversion of every task's classes (dddr only).
EmbeddingStore stage_invert(const ExperimentConfig& cfg, const std::filesystem::path& out,
                            const ProgressFn& progress = {});
/// Replay, training rounds, snapshots and evaluation for every task.
RunResult stage_train(const ExperimentConfig& cfg, const std::filesystem::path& out, const ProgressFn& progress = {});

/// Full pipeline with per-task interleaving of the inversion and training
/// phases. Writes the effective config, checkpoints, logs and metrics.
RunResult run_fccl(const ExperimentConfig& cfg, const std::filesystem::path& out, const ProgressFn& progress = {});

/// Recomputes the report from stored classifier checkpoints.
MetricsReport evaluate_run(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// Similarity audit of the stored replay caches against the client corpus;
/// writes audit.json.
std::vector<ClassAudit> audit_run(const ExperimentConfig& cfg, const std::filesystem::path& out);

}  // namespace dddr
