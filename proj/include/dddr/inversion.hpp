#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dddr/diffusion.hpp"
#include "dddr/noise.hpp"
#include "dddr/optim.hpp"

namespace dddr {

enum class EmbeddingOrigin { Local, Aggregated };

struct ClassEmbedding {
  std::uint32_t cls = 0;
  Tensor v;  // (1, d_e)
  std::size_t round = 0;
  EmbeddingOrigin origin = EmbeddingOrigin::Aggregated;
};

struct InversionConfig {
  std::size_t rounds = 10;
  std::size_t local_steps = 50;
  std::size_t batch = 32;
  double lr = 5e-2;
  double init_std = 0.1;  // v0 ~ N(0, init_std^2 I)
  double sigma_g = 0.0;   // noise on uploads
  std::size_t eval_rows = 64;
  std::uint64_t seed = 0;
};

/// Per-client, per-class state carried across rounds: Adam moments and the
/// client's draw stream.
struct LocalInversionState {
  OptimizerState opt;
  Rng rng;
};

LocalInversionState make_local_state(const InversionConfig& cfg, std::uint64_t client_seed, std::uint32_t cls);

enum class InversionStatus { Ok, NoLocalData };

struct LocalInversionResult {
  InversionStatus status = InversionStatus::Ok;
  ClassEmbedding embedding;
  double loss_start = 0.0;  // on the fixed evaluation draw, before the first step
  double loss_end = 0.0;    // same draw, after the last step
};

/// Minimizes the denoising loss over the class-`cls` images of `shard` with
/// respect to the class part only. Returns NoLocalData when the shard holds no
/// such image.
LocalInversionResult local_class_inversion(const Corpus& corpus, std::span<const std::size_t> shard, std::uint32_t cls,
                                           const ClassEmbedding& start, std::size_t steps, const DiffusionModel& model,
                                           const InversionConfig& cfg, LocalInversionState& state);

/// Denoising loss of `v` on a fixed draw keyed by (cfg.seed, cls) over
/// cfg.eval_rows rows, cycling through the class-`cls` items of the shard.
double inversion_eval_loss(const Corpus& corpus, std::span<const std::size_t> shard, std::uint32_t cls,
                           const Tensor& v, const DiffusionModel& model, const InversionConfig& cfg);

/// Server-side starting point for class `cls`, keyed by (cfg.seed, cls).
ClassEmbedding initial_embedding(const InversionConfig& cfg, std::uint32_t cls, std::size_t embed_dim);

/// Unweighted mean of the uploads, accumulated in index order.
ClassEmbedding aggregate_embeddings(std::span<const ClassEmbedding> uploads);

/// Frozen embeddings plus the per-round aggregate history.
class EmbeddingStore {
 public:
  bool contains(std::uint32_t cls) const { return frozen_.count(cls) != 0; }
  const ClassEmbedding& at(std::uint32_t cls) const;
  std::vector<std::uint32_t> classes() const;
  std::size_t size() const { return frozen_.size(); }
  const std::vector<ClassEmbedding>& history() const { return history_; }

  void record_round(const ClassEmbedding& e);
  /// Throws DataError if the class is already frozen.
  void freeze(const ClassEmbedding& e);
  std::uint64_t checksum() const;

  Checkpoint to_checkpoint() const;
  static EmbeddingStore from_checkpoint(const Checkpoint& ckpt);

 private:
  std::map<std::uint32_t, ClassEmbedding> frozen_;
  std::vector<ClassEmbedding> history_;
};

struct InversionClient {
  std::vector<std::size_t> shard;
  std::uint64_t seed = 0;
};

/// One client per shard of `task`; client seeds are keyed by (seed, client).
std::vector<InversionClient> inversion_clients(const TaskSequencePlan& plan, std::size_t task, std::uint64_t seed);

struct InversionReportEntry {
  std::size_t round = 0;
  std::uint32_t cls = 0;
  std::size_t client = 0;
  double loss_start = 0.0;
  double loss_end = 0.0;
  bool participated = false;
};

struct InversionOutcome {
  std::vector<ClassEmbedding> embeddings;  // one per class, sorted by class
  std::vector<InversionReportEntry> report;
  std::uint64_t checksum_before = 0;
  std::uint64_t checksum_after = 0;
  /// Mean loss_end over participating clients, per round.
  std::vector<double> mean_round_loss(std::uint32_t cls) const;
};

/// Rounds of broadcast, local inversion, optional upload noise and averaging.
/// Final aggregates are frozen into `store`. Throws DataError naming a class
/// with no samples on any client.
InversionOutcome federated_class_inversion(const Corpus& corpus, std::span<const std::uint32_t> classes,
                                           std::span<const InversionClient> clients, const DiffusionModel& model,
                                           const InversionConfig& cfg, EmbeddingStore& store);

/// One JSON object per line: round, class, client, loss_start, loss_end, participated.
void write_inversion_report(const std::filesystem::path& path, std::span<const InversionReportEntry> report);

}  // namespace dddr
