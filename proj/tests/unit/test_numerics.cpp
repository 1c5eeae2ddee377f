#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "dddr/autodiff.hpp"
#include "dddr/checkpoint.hpp"
#include "dddr/gradcheck.hpp"
#include "dddr/optim.hpp"
#include "dddr/rng.hpp"

using namespace dddr;

namespace {

ParamSet single(const std::string& name, std::vector<float> v) {
  ParamSet p;
  const std::size_t n = v.size();
  p.set(name, Tensor(Shape{n}, std::move(v)));
  return p;
}

ParamSetD random_params(Rng& rng, std::initializer_list<std::pair<const char*, Shape>> spec, double scale) {
  ParamSetD p;
  for (const auto& [name, shape] : spec) {
    TensorD t(shape);
    for (auto& v : t.values()) v = rng.normal() * scale;
    p.set(name, std::move(t));
  }
  return p;
}

}  // namespace

TEST_CASE("square loss gradient is analytic") {
  const GraphFn<float> f = [](Tape<float>& t, const ParamVars& p) { return t.sum(t.square(p.at("w"))); };
  const auto ev = evaluate_with_gradients(f, single("w", {3.0f}));
  CHECK(ev.loss == doctest::Approx(9.0));
  CHECK(ev.grads.at("w")[0] == doctest::Approx(6.0));
}

TEST_CASE("sum has all-ones gradient") {
  const GraphFn<float> f = [](Tape<float>& t, const ParamVars& p) { return t.sum(p.at("w")); };
  const auto ev = evaluate_with_gradients(f, single("w", {-1.5f, 0.0f, 2.0f, 7.0f}));
  for (float g : ev.grads.at("w").values()) CHECK(g == 1.0f);
}

TEST_CASE("two-layer net gradients match central differences") {
  Rng rng(11, 0);
  for (int trial = 0; trial < 5; ++trial) {
    const ParamSetD params =
        random_params(rng, {{"l1.w", {4, 5}}, {"l1.b", {5}}, {"l2.w", {5, 3}}, {"l2.b", {3}}}, 0.7);
    TensorD x({6, 4});
    for (auto& v : x.values()) v = rng.normal();
    const GraphFn<double> f = [x](Tape<double>& t, const ParamVars& p) {
      Var h = t.silu(t.add(t.matmul(t.constant(x), p.at("l1.w")), p.at("l1.b")));
      Var y = t.add(t.matmul(h, p.at("l2.w")), p.at("l2.b"));
      return t.mean(t.square(t.log_softmax(y)));
    };
    const auto report = finite_difference_check(f, params);
    INFO(report.summary());
    CHECK(report.passed);
  }
}

TEST_CASE("every kernel passes a finite-difference check") {
  Rng rng(5, 1);
  const ParamSetD params = random_params(rng, {{"a", {3, 4}}, {"b", {3, 4}}, {"c", {4}}}, 1.0);
  const GraphFn<double> f = [](Tape<double>& t, const ParamVars& p) {
    Var a = p.at("a"), b = p.at("b");
    Var s = t.add(t.mul(t.relu(a), t.silu(b)), p.at("c"));
    Var n = t.l2_normalize(t.concat(s, t.softmax(b)));
    Var g = t.matmul(n, t.transpose(n));
    Var q = t.affine(t.sub(g, t.constant(TensorD({3, 3}, 0.1))), 2.0, 0.5);
    return t.add(t.sum(t.square(q)), t.mean(t.log_softmax(a)));
  };
  const auto report = finite_difference_check(f, params);
  INFO(report.summary());
  CHECK(report.passed);
}

TEST_CASE("corrupted gradient fails the check") {
  const ParamSetD params = params_cast<double>(single("w", {1.5f, -0.5f}));
  ParamSetD analytic;
  analytic.set("w", TensorD(Shape{2}, std::vector<double>{3.0 + 0.1, -1.0}));
  const ScalarFn f = [](const ParamSetD& p) {
    double s = 0.0;
    for (double v : p.at("w").values()) s += v * v;
    return s;
  };
  CHECK_FALSE(finite_difference_check(f, params, analytic).passed);
  analytic.at("w")[0] = 3.0;
  CHECK(finite_difference_check(f, params, analytic).passed);
}

TEST_CASE("sgd and adam updates") {
  SUBCASE("sgd p - lr*g") {
    OptimizerState opt({OptimizerKind::Sgd, 0.1});
    const auto out = apply_gradient_step(single("p", {1.0f}), single("p", {2.0f}), opt);
    CHECK(out.at("p")[0] == doctest::Approx(0.8));
    CHECK(opt.steps() == 1);
  }
  SUBCASE("zero gradient is the identity under sgd") {
    OptimizerState opt({OptimizerKind::Sgd, 0.5});
    const ParamSet p = single("p", {1.25f, -3.0f});
    CHECK(apply_gradient_step(p, single("p", {0.0f, 0.0f}), opt) == p);
  }
  SUBCASE("adam first step") {
    // m = 0.1, v = 0.001; bias-corrected m_hat = v_hat = 1 -> step of lr.
    OptimizerState opt({OptimizerKind::Adam, 0.1, 0.9, 0.999, 1e-8});
    const auto out = apply_gradient_step(single("p", {0.0f}), single("p", {1.0f}), opt);
    CHECK(out.at("p")[0] == doctest::Approx(-0.1).epsilon(1e-6));
  }
  SUBCASE("mismatched names list the symmetric difference") {
    OptimizerState opt;
    try {
      apply_gradient_step(single("a", {1.0f}), single("b", {1.0f}), opt);
      FAIL("expected a ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("only in first: [a]") != std::string::npos);
      CHECK(msg.find("only in second: [b]") != std::string::npos);
    }
  }
}

TEST_CASE("primitive kernels") {
  Tape<float> t;
  SUBCASE("softmax of zeros is uniform") {
    const auto y = t.value(t.softmax(t.constant(Tensor::row({0.0f, 0.0f}))));
    CHECK(y[0] == doctest::Approx(0.5));
    CHECK(y[1] == doctest::Approx(0.5));
  }
  SUBCASE("softmax matches scalar evaluation") {
    const auto y = t.value(t.softmax(t.constant(Tensor::row({1.0f, 2.0f, 3.0f}))));
    const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
    double total = 0.0;
    for (int i = 0; i < 3; ++i) {
      CHECK(std::abs(y[i] - static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z)) < 1e-6);
      total += y[i];
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  SUBCASE("log_softmax equals log(softmax)") {
    const Tensor x = Tensor::row({0.3f, -1.2f, 4.0f, 0.0f});
    const auto ls = t.value(t.log_softmax(t.constant(x)));
    const auto s = t.value(t.softmax(t.constant(x)));
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(ls[i] - std::log(s[i])) < 1e-5);
  }
  SUBCASE("l2_normalize 3-4-5") {
    const auto y = t.value(t.l2_normalize(t.constant(Tensor::row({3.0f, 4.0f}))));
    CHECK(y[0] == doctest::Approx(0.6));
    CHECK(y[1] == doctest::Approx(0.8));
    CHECK(std::abs(std::hypot(y[0], y[1]) - 1.0) < 1e-6);
  }
  SUBCASE("l2_normalize rejects the zero vector") {
    CHECK_THROWS_AS(t.l2_normalize(t.constant(Tensor::row({0.0f, 0.0f}))), NumericError);
  }
}

TEST_CASE("kernel errors name the kernel") {
  Tape<float> t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({2, 3}));
  try {
    t.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("(2,3) x (2,3)") != std::string::npos);
  }
  Var big = t.constant(Tensor::row({1e30f}));
  try {
    t.square(big);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("square") != std::string::npos);
  }
}

TEST_CASE("kernel evaluation is bit-deterministic") {
  Rng rng(3, 3);
  Tensor w({16, 8}), x({32, 16});
  for (auto& v : w.values()) v = static_cast<float>(rng.normal());
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  ParamSet p;
  p.set("w", w);
  const GraphFn<float> f = [x](Tape<float>& t, const ParamVars& v) {
    return t.mean(t.softmax(t.matmul(t.constant(x), v.at("w"))));
  };
  const auto a = evaluate_with_gradients(f, p);
  const auto b = evaluate_with_gradients(f, p);
  CHECK(a.loss == b.loss);
  CHECK(checksum(a.grads) == checksum(b.grads));
}

TEST_CASE("rng streams are reproducible and independent") {
  Rng a = Rng::keyed(42, {1, 2, Rng::purpose("noise")});
  Rng b = Rng::keyed(42, {1, 2, Rng::purpose("noise")});
  Rng c = Rng::keyed(42, {2, 1, Rng::purpose("noise")});
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
  }
  Rng n(7, 0);
  double s = 0.0, s2 = 0.0;
  const int N = 20000;
  for (int i = 0; i < N; ++i) {
    const double v = n.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / N) < 0.03);
  CHECK(std::abs(s2 / N - 1.0) < 0.05);
  Rng g(9, 0);
  double gs = 0.0;
  for (int i = 0; i < N; ++i) gs += g.gamma(0.5);
  CHECK(std::abs(gs / N - 0.5) < 0.03);
}

TEST_CASE("checkpoint round trip and corruption") {
  Checkpoint ck;
  ck.params.set("b.bias", Tensor(Shape{3}, std::vector<float>{1.0f, -0.0f, 3.5e-8f}));
  ck.params.set("a.weight", Tensor(Shape{2, 2}, std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f}));
  ck.attrs["kind"] = "test run";
  const std::string bytes = encode_checkpoint(ck);
  CHECK(bytes.substr(0, 8) == "DDDRCKPT");
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.params == ck.params);
  CHECK(back.attrs.at("kind") == "test run");
  CHECK(checksum(back.params) == checksum(ck.params));

  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 2)), DataError);

  const auto path = std::filesystem::temp_directory_path() / "dddr_test_ckpt.bin";
  save_checkpoint(path, ck);
  CHECK(load_checkpoint(path).params == ck.params);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), MissingArtifact);
}
