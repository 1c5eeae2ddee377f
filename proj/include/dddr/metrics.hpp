#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dddr/datasets.hpp"
#include "dddr/replay.hpp"

namespace dddr {

/// rows[t][c]: accuracy on class c after task t, defined for the classes of
/// tasks 0..t.
struct AccuracyMatrix {
  std::vector<std::vector<std::uint32_t>> task_classes;
  std::vector<std::map<std::uint32_t, double>> rows;

  std::size_t n_tasks() const { return task_classes.size(); }
  /// Classes of tasks 0..t, sorted.
  std::vector<std::uint32_t> seen(std::size_t t) const;
  /// Throws DataError if a row does not cover exactly its seen classes or
  /// holds a value outside [0,1].
  void validate() const;
  bool complete() const { return rows.size() == task_classes.size(); }
};

/// Mean of the final row over all classes.
double average_accuracy(const AccuracyMatrix& m);
/// Mean over classes of (peak over defined rows - final).
double forgetting_measure(const AccuracyMatrix& m);
/// Mean of row t over its classes.
double seen_class_accuracy(const AccuracyMatrix& m, std::size_t t);

/// Per-class accuracy of argmax predictions on the test items of `classes`.
std::map<std::uint32_t, double> evaluate_global(const ParamSet& classifier, const Corpus& corpus,
                                                const std::map<std::uint32_t, std::vector<std::size_t>>& test_by_class,
                                                std::span<const std::uint32_t> classes);

struct ClientStats {
  std::vector<double> per_client;  // accuracy of clients with a non-empty shard
  std::vector<std::size_t> skipped;
  double mean = 0.0;
  double stddev = 0.0;  // population
};

ClientStats local_client_eval(const ParamSet& classifier, const Corpus& corpus,
                              std::span<const std::vector<std::size_t>> shards);
/// Mean and population standard deviation.
ClientStats summarize_clients(std::vector<double> accuracies);

/// 10 log10(1/MSE) for [0,1] images; identical images give 99.
double psnr(const Tensor& a, const Tensor& b);
/// Single-window SSIM over the whole image, K1=0.01, K2=0.03, L=1.
double ssim_global(const Tensor& a, const Tensor& b);

struct AuditPair {
  std::size_t real_index = 0;
  std::size_t generated_index = 0;
  double value = 0.0;
};

struct ClassAudit {
  std::uint32_t cls = 0;
  AuditPair best_psnr;
  AuditPair best_ssim;
};

/// Per class present in both, the real/generated pairs with the highest PSNR
/// and SSIM. Throws ShapeError on image shape mismatch.
std::vector<ClassAudit> similarity_audit(const Corpus& real, const ReplayCache& generated);

}  // namespace dddr
