#include "dddr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dddr/fccl.hpp"

namespace dddr {

std::vector<std::uint32_t> AccuracyMatrix::seen(std::size_t t) const {
  std::set<std::uint32_t> s;
  for (std::size_t k = 0; k <= t && k < task_classes.size(); ++k) s.insert(task_classes[k].begin(), task_classes[k].end());
  return {s.begin(), s.end()};
}

void AccuracyMatrix::validate() const {
  if (rows.size() > task_classes.size()) throw DataError("accuracy matrix: more rows than tasks");
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const auto want = seen(t);
    std::vector<std::uint32_t> have;
    for (const auto& [c, a] : rows[t]) {
      have.push_back(c);
      if (!(a >= 0.0 && a <= 1.0)) throw DataError("accuracy matrix: value outside [0,1] at task " + std::to_string(t));
    }
    if (have != want) throw DataError("accuracy matrix: row " + std::to_string(t) + " does not cover exactly its seen classes");
  }
}

namespace {

const std::map<std::uint32_t, double>& final_row(const AccuracyMatrix& m) {
  m.validate();
  if (m.task_classes.empty() || !m.complete()) throw DataError("accuracy matrix: final row incomplete");
  return m.rows.back();
}

}  // namespace

double average_accuracy(const AccuracyMatrix& m) {
  const auto& last = final_row(m);
  double s = 0.0;
  for (const auto& [_, a] : last) s += a;
  return s / static_cast<double>(last.size());
}

double forgetting_measure(const AccuracyMatrix& m) {
  const auto& last = final_row(m);
  double s = 0.0;
  for (const auto& [c, final_acc] : last) {
    double peak = final_acc;
    for (const auto& row : m.rows) {
      auto it = row.find(c);
      if (it != row.end()) peak = std::max(peak, it->second);
    }
    s += peak - final_acc;
  }
  return s / static_cast<double>(last.size());
}

double seen_class_accuracy(const AccuracyMatrix& m, std::size_t t) {
  const auto& row = m.rows.at(t);
  if (row.empty()) throw DataError("accuracy matrix: empty row");
  double s = 0.0;
  for (const auto& [_, a] : row) s += a;
  return s / static_cast<double>(row.size());
}

std::map<std::uint32_t, double> evaluate_global(const ParamSet& classifier, const Corpus& corpus,
                                                const std::map<std::uint32_t, std::vector<std::size_t>>& test_by_class,
                                                std::span<const std::uint32_t> classes) {
  std::map<std::uint32_t, double> out;
  for (std::uint32_t c : classes) {
    auto it = test_by_class.find(c);
    if (it == test_by_class.end() || it->second.empty())
      throw DataError("evaluate_global: no test images for class " + std::to_string(c));
    const auto pred = predict(classifier, corpus.gather(it->second));
    std::size_t ok = 0;
    for (auto p : pred) ok += p == c;
    out[c] = static_cast<double>(ok) / static_cast<double>(pred.size());
  }
  return out;
}

ClientStats summarize_clients(std::vector<double> accuracies) {
  ClientStats s;
  s.per_client = std::move(accuracies);
  if (s.per_client.empty()) return s;
  double m = 0.0;
  for (double a : s.per_client) m += a;
  m /= static_cast<double>(s.per_client.size());
  double v = 0.0;
  for (double a : s.per_client) v += (a - m) * (a - m);
  s.mean = m;
  s.stddev = std::sqrt(v / static_cast<double>(s.per_client.size()));
  return s;
}

ClientStats local_client_eval(const ParamSet& classifier, const Corpus& corpus,
                              std::span<const std::vector<std::size_t>> shards) {
  std::vector<double> acc;
  std::vector<std::size_t> skipped;
  for (std::size_t j = 0; j < shards.size(); ++j) {
    if (shards[j].empty()) {
      skipped.push_back(j);
      continue;
    }
    const auto pred = predict(classifier, corpus.gather(shards[j]));
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == corpus.items[shards[j][i]].label;
    acc.push_back(static_cast<double>(ok) / static_cast<double>(pred.size()));
  }
  ClientStats s = summarize_clients(std::move(acc));
  s.skipped = std::move(skipped);
  return s;
}

double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim_global(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
    cov += (a[i] - ma) * (b[i] - mb);
  }
  va /= n;
  vb /= n;
  cov /= n;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

std::vector<ClassAudit> similarity_audit(const Corpus& real, const ReplayCache& generated) {
  if (real.size() == 0 || generated.empty()) throw DataError("similarity_audit: empty input");
  if (!(real.image == generated.image)) throw ShapeError("similarity_audit: real and generated image shapes differ");
  std::vector<ClassAudit> out;
  for (const auto& [cls, gen] : generated.by_class) {
    const auto reals = real.indices_of(cls);
    if (reals.empty() || gen.empty()) continue;
    ClassAudit a;
    a.cls = cls;
    a.best_psnr.value = -1.0;
    a.best_ssim.value = -2.0;
    for (std::size_t r : reals)
      for (std::size_t g = 0; g < gen.size(); ++g) {
        const double p = psnr(real.items[r].pixels, gen[g].pixels);
        const double s = ssim_global(real.items[r].pixels, gen[g].pixels);
        if (p > a.best_psnr.value) a.best_psnr = {r, g, p};
        if (s > a.best_ssim.value) a.best_ssim = {r, g, s};
      }
    out.push_back(a);
  }
  return out;
}

}  // namespace dddr
