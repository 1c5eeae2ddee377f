#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "dddr/fccl.hpp"
#include "dddr/metrics.hpp"
#include "dddr/orchestrator.hpp"
#include "dddr/rng.hpp"

using namespace dddr;

namespace {

AccuracyMatrix two_task(std::map<std::uint32_t, double> r0, std::map<std::uint32_t, double> r1) {
  AccuracyMatrix m;
  m.task_classes = {{0}, {1}};
  m.rows = {std::move(r0), std::move(r1)};
  return m;
}

// Dense brute force: NaN marks undefined cells.
struct Dense {
  std::vector<std::vector<double>> a;  // [task][class]
};

Dense densify(const AccuracyMatrix& m, std::size_t classes) {
  Dense d;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& row : m.rows) {
    std::vector<double> r(classes, nan);
    for (const auto& [c, v] : row) r[c] = v;
    d.a.push_back(r);
  }
  return d;
}

double brute_acc(const Dense& d) {
  double s = 0;
  int n = 0;
  for (double v : d.a.back())
    if (!std::isnan(v)) s += v, ++n;
  return s / n;
}

double brute_fm(const Dense& d) {
  double s = 0;
  int n = 0;
  const auto& last = d.a.back();
  for (std::size_t c = 0; c < last.size(); ++c) {
    if (std::isnan(last[c])) continue;
    double peak = -1;
    for (const auto& row : d.a)
      if (!std::isnan(row[c]) && row[c] > peak) peak = row[c];
    s += peak - last[c];
    ++n;
  }
  return s / n;
}

AccuracyMatrix random_matrix(Rng& rng, std::size_t& classes_out) {
  const std::size_t tasks = 1 + rng.below(5);
  const std::size_t per = 1 + rng.below(4);
  std::vector<std::uint32_t> perm(tasks * per);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<std::uint32_t>(i);
  rng.shuffle(perm);
  AccuracyMatrix m;
  for (std::size_t t = 0; t < tasks; ++t) {
    std::vector<std::uint32_t> cls(perm.begin() + t * per, perm.begin() + (t + 1) * per);
    std::sort(cls.begin(), cls.end());
    m.task_classes.push_back(cls);
  }
  for (std::size_t t = 0; t < tasks; ++t) {
    std::map<std::uint32_t, double> row;
    // Values on a 1/40 grid so ties between peaks and finals occur.
    for (auto c : m.seen(t)) row[c] = static_cast<double>(rng.below(41)) / 40.0;
    m.rows.push_back(row);
  }
  classes_out = perm.size();
  return m;
}

/// Identity network on d-dim inputs: logits equal the (non-negative) input.
ParamSet identity_classifier(std::size_t d) {
  ParamSet p;
  Tensor eye({d, d});
  for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0f;
  p.set("clf.fe1.w", eye);
  p.set("clf.fe1.b", Tensor({d}));
  p.set("clf.fe2.w", eye);
  p.set("clf.fe2.b", Tensor({d}));
  p.set("clf.head.w", eye);
  p.set("clf.head.b", Tensor({d}));
  return p;
}

Corpus vector_corpus(std::size_t d) {
  Corpus c;
  c.image = {1, 1, d};
  c.class_count = d;
  return c;
}

}  // namespace

TEST_CASE("average accuracy and forgetting on hand examples") {
  SUBCASE("final row [0.8, 0.4]") {
    const auto m = two_task({{0, 1.0}}, {{0, 0.8}, {1, 0.4}});
    CHECK(average_accuracy(m) == doctest::Approx(0.6));
  }
  SUBCASE("history [0.9, 0.5] contributes 0.4") {
    const auto m = two_task({{0, 0.9}}, {{0, 0.5}, {1, 0.7}});
    CHECK(forgetting_measure(m) == doctest::Approx(0.4 / 2));
  }
  SUBCASE("all ones") {
    const auto m = two_task({{0, 1.0}}, {{0, 1.0}, {1, 1.0}});
    CHECK(average_accuracy(m) == 1.0);
    CHECK(forgetting_measure(m) == 0.0);
  }
  SUBCASE("monotone histories have no forgetting") {
    const auto m = two_task({{0, 0.3}}, {{0, 0.6}, {1, 0.1}});
    CHECK(forgetting_measure(m) == 0.0);
  }
  SUBCASE("seen-class curve") {
    const auto m = two_task({{0, 0.9}}, {{0, 0.5}, {1, 0.7}});
    CHECK(seen_class_accuracy(m, 0) == doctest::Approx(0.9));
    CHECK(seen_class_accuracy(m, 1) == doctest::Approx(0.6));
  }
}

TEST_CASE("accuracy matrix validation") {
  auto m = two_task({{0, 1.0}}, {{0, 0.5}, {1, 0.5}});
  CHECK_NOTHROW(m.validate());
  auto incomplete = m;
  incomplete.rows.pop_back();
  CHECK_THROWS_AS(average_accuracy(incomplete), DataError);
  CHECK_THROWS_AS(forgetting_measure(incomplete), DataError);
  auto extra = m;
  extra.rows[0][1] = 0.2;  // class 1 is not introduced yet
  CHECK_THROWS_AS(extra.validate(), DataError);
  auto out_of_range = m;
  out_of_range.rows[1][1] = 1.5;
  CHECK_THROWS_AS(out_of_range.validate(), DataError);
}

TEST_CASE("metrics equal brute force on random matrices") {
  Rng rng(2024);
  for (int i = 0; i < 100; ++i) {
    std::size_t classes = 0;
    const auto m = random_matrix(rng, classes);
    const Dense d = densify(m, classes);
    CHECK(average_accuracy(m) == brute_acc(d));
    CHECK(forgetting_measure(m) == brute_fm(d));
    CHECK(forgetting_measure(m) >= 0.0);
  }
}

TEST_CASE("global evaluation") {
  const std::size_t d = 4;
  const ParamSet eye = identity_classifier(d);
  Corpus c = vector_corpus(d);
  std::map<std::uint32_t, std::vector<std::size_t>> by_class;
  const std::vector<std::uint32_t> all = {0, 1, 2, 3};

  SUBCASE("perfect predictions") {
    for (std::uint32_t k = 0; k < d; ++k)
      for (int r = 0; r < 3; ++r) {
        Tensor x({1, 1, d});
        x[k] = 1.0f;
        by_class[k].push_back(c.items.size());
        c.items.push_back({x, k});
      }
    for (const auto& [k, a] : evaluate_global(eye, c, by_class, all)) CHECK(a == 1.0);
  }
  SUBCASE("constant predictor") {
    ParamSet p = eye;
    p.at("clf.head.b")[0] = 100.0f;
    for (std::uint32_t k = 0; k < d; ++k) {
      by_class[k].push_back(c.items.size());
      c.items.push_back({Tensor({1, 1, d}), k});
    }
    const auto row = evaluate_global(p, c, by_class, all);
    CHECK(row.at(0) == 1.0);
    CHECK(row.at(1) == 0.0);
    CHECK(row.at(3) == 0.0);
  }
  SUBCASE("ties go to the lowest index") {
    for (std::uint32_t k = 0; k < d; ++k) {
      by_class[k].push_back(c.items.size());
      c.items.push_back({Tensor({1, 1, d}), k});
    }
    CHECK(evaluate_global(eye, c, by_class, all).at(0) == 1.0);
  }
  SUBCASE("random logits are near chance") {
    Rng rng(11);
    for (std::size_t i = 0; i < 1000; ++i) {
      Tensor x({1, 1, d});
      for (std::size_t j = 0; j < d; ++j) x[j] = static_cast<float>(rng.uniform());
      const auto k = static_cast<std::uint32_t>(i % d);
      by_class[k].push_back(c.items.size());
      c.items.push_back({x, k});
    }
    for (const auto& [k, a] : evaluate_global(eye, c, by_class, all)) CHECK(std::abs(a - 0.25) <= 0.05);
  }
  SUBCASE("empty test class") {
    by_class[0] = {};
    CHECK_THROWS_AS(evaluate_global(eye, c, by_class, std::vector<std::uint32_t>{0}), DataError);
  }
}

TEST_CASE("client statistics") {
  const auto s = summarize_clients({0.4, 0.6});
  CHECK(s.mean == doctest::Approx(0.5));
  CHECK(s.stddev == doctest::Approx(0.1));

  const std::size_t d = 2;
  Corpus c = vector_corpus(d);
  for (std::uint32_t k = 0; k < 4; ++k) {
    Tensor x({1, 1, d});
    x[k % 2] = 1.0f;
    c.items.push_back({x, k % 2 == 0 ? 0u : (k == 1 ? 1u : 0u)});
  }
  const ParamSet eye = identity_classifier(d);
  const std::vector<std::vector<std::size_t>> same = {{0, 1, 2, 3}, {0, 1, 2, 3}, {}};
  const auto st = local_client_eval(eye, c, same);
  CHECK(st.per_client.size() == 2);
  CHECK(st.stddev == 0.0);
  CHECK(st.mean == doctest::Approx(0.75));
  REQUIRE(st.skipped.size() == 1);
  CHECK(st.skipped[0] == 2);
}

TEST_CASE("psnr and ssim") {
  Tensor a({1, 4, 4}), b({1, 4, 4});
  Rng rng(3);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<float>(rng.uniform() * 0.5);
  CHECK(psnr(a, a) == 99.0);
  CHECK(ssim_global(a, a) == doctest::Approx(1.0));
  for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] + 0.5f;
  CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-6));

  Tensor p({1, 1, 2}), q({1, 1, 2});
  p[1] = 1.0f;
  q[0] = 1.0f;
  const double c2 = 0.03 * 0.03;
  CHECK(ssim_global(p, q) == doctest::Approx((-0.5 + c2) / (0.5 + c2)));
  CHECK_THROWS_AS(psnr(a, p), ShapeError);
  CHECK_THROWS_AS(ssim_global(a, p), ShapeError);
}

TEST_CASE("similarity audit picks the closest pair") {
  Corpus real;
  real.image = {1, 4, 4};
  real.class_count = 2;
  Rng rng(9);
  for (std::uint32_t k = 0; k < 6; ++k) {
    Tensor x({1, 4, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());
    real.items.push_back({x, k % 2});
  }
  ReplayCache gen;
  gen.image = real.image;
  gen.per_class = 2;
  Tensor noise({1, 4, 4});
  for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = static_cast<float>(rng.uniform());
  gen.by_class[0] = {{noise, 0}, {real.items[2].pixels, 0}};
  Tensor near = real.items[3].pixels;
  near[0] = std::min(1.0f, near[0] + 0.1f);
  gen.by_class[1] = {{near, 1}, {noise, 1}};

  const auto audit = similarity_audit(real, gen);
  REQUIRE(audit.size() == 2);
  CHECK(audit[0].cls == 0);
  CHECK(audit[0].best_psnr.real_index == 2);
  CHECK(audit[0].best_psnr.generated_index == 1);
  CHECK(audit[0].best_psnr.value == 99.0);
  CHECK(audit[0].best_ssim.value == doctest::Approx(1.0));
  CHECK(audit[1].best_psnr.real_index == 3);
  CHECK(audit[1].best_psnr.generated_index == 0);
  CHECK(audit[1].best_psnr.value < 99.0);

  ReplayCache wrong = gen;
  wrong.image = {1, 2, 8};
  CHECK_THROWS_AS(similarity_audit(real, wrong), ShapeError);
  CHECK_THROWS_AS(similarity_audit(real, ReplayCache{}), DataError);
}

TEST_CASE("accuracy csv round trip and chart") {
  const auto m = two_task({{0, 0.9}}, {{0, 1.0 / 3.0}, {1, 0.7}});
  const auto dir = std::filesystem::temp_directory_path() / "dddr_test_csv";
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "accuracy.csv", std::ios::binary);
    out << accuracy_csv(m);
  }
  const auto back = read_accuracy_csv(dir / "accuracy.csv");
  CHECK(back.task_classes == m.task_classes);
  CHECK(back.rows == m.rows);

  {
    std::ofstream out(dir / "accuracy.csv", std::ios::binary);
    out << "task,class,accuracy\n0,0,0.5\n0,1\n";
  }
  CHECK_THROWS_WITH_AS(read_accuracy_csv(dir / "accuracy.csv"), doctest::Contains(":3:"), DataError);

  const std::string svg = accuracy_svg({1.0, 0.5}, "finetune");
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("finetune") != std::string::npos);
  std::filesystem::remove_all(dir);
}
