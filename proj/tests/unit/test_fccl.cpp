#include <cmath>
#include <numeric>

#include "doctest.h"
#include "dddr/fccl.hpp"
#include "dddr/gradcheck.hpp"

using namespace dddr;

namespace {

using LD = long double;

std::vector<LD> log_softmax_ld(const std::vector<LD>& z) {
  LD m = z[0];
  for (LD v : z) m = std::max(m, v);
  LD s = 0;
  for (LD v : z) s += std::exp(v - m);
  std::vector<LD> out;
  for (LD v : z) out.push_back(v - m - std::log(s));
  return out;
}

std::vector<LD> row(const TensorD& t, std::size_t r) {
  std::vector<LD> out;
  for (std::size_t c = 0; c < t.cols(); ++c) out.push_back(t.at(r, c));
  return out;
}

TensorD random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  TensorD t({r, c});
  for (auto& v : t.values()) v = rng.normal() * scale;
  return t;
}

LD ce_oracle(const TensorD& logits, const std::vector<std::uint32_t>& y) {
  LD s = 0;
  for (std::size_t r = 0; r < y.size(); ++r) s -= log_softmax_ld(row(logits, r))[y[r]];
  return s / y.size();
}

LD supcon_oracle(const TensorD& z, const std::vector<std::uint32_t>& y, LD tau) {
  const std::size_t n = y.size();
  LD total = 0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<LD> sims;
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      LD s = 0;
      for (std::size_t k = 0; k < z.cols(); ++k) s += static_cast<LD>(z.at(i, k)) * z.at(j, k);
      sims.push_back(s / tau);
      idx.push_back(j);
    }
    const auto lsm = log_softmax_ld(sims);
    LD acc = 0;
    std::size_t pos = 0;
    for (std::size_t k = 0; k < idx.size(); ++k)
      if (y[idx[k]] == y[i]) {
        acc -= lsm[k];
        ++pos;
      }
    if (pos) {
      total += acc / pos;
      ++anchors;
    }
  }
  return total / anchors;
}

TensorD normalize_rows(TensorD t) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
    for (std::size_t c = 0; c < t.cols(); ++c) t[r * t.cols() + c] /= std::sqrt(s);
  }
  return t;
}

/// Smallest |pre-activation| over every relu input; finite differences are
/// only meaningful away from the kinks.
double relu_margin(const ParamSetD& p, const TensorD& x) {
  Tape<double> tape;
  const auto v = bind_params(tape, p, false);
  Var a1 = tape.add(tape.matmul(tape.constant(x), v.at("clf.fe1.w")), v.at("clf.fe1.b"));
  Var a2 = tape.add(tape.matmul(tape.relu(a1), v.at("clf.fe2.w")), v.at("clf.fe2.b"));
  Var a3 = tape.add(tape.matmul(tape.relu(a2), v.at("proj.l1.w")), v.at("proj.l1.b"));
  double m = 1e30;
  for (Var a : {a1, a2, a3})
    for (double z : tape.value(a).values()) m = std::min(m, std::abs(z));
  return m;
}

/// Classifier + projection with random biases, redrawn until no relu input
/// sits within `margin` of zero.
ParamSetD smooth_instance(const ClassifierShape& shape, const TensorD& x, Rng& rng, double margin = 0.02) {
  for (;;) {
    ParamSetD p = params_cast<double>(init_classifier(shape, rng));
    p.merge(params_cast<double>(init_projection(shape, rng)));
    for (auto& [name, t] : p)
      if (name.back() == 'b')
        for (auto& b : t.values()) b = 0.5 * rng.normal();
    if (relu_margin(p, x) > margin) return p;
  }
}

Corpus four_class_corpus(std::uint64_t seed, std::size_t per_class) {
  CorpusSpec spec = desk_client_spec(seed, per_class);
  spec.classes.resize(4);
  return generate_shapeworld(spec);
}

}  // namespace

TEST_CASE("cross entropy") {
  Tape<double> tape;
  SUBCASE("confident logits give zero loss") {
    const std::vector<std::uint32_t> y{0};
    Var l = cross_entropy(tape, tape.constant(TensorD({1, 3}, std::vector<double>{60, 0, 0})), y);
    CHECK(tape.scalar(l) < 1e-20);
  }
  SUBCASE("uniform logits give ln C") {
    const std::vector<std::uint32_t> y{0, 3, 5};
    Var l = cross_entropy(tape, tape.constant(TensorD({3, 6}, 0.7)), y);
    CHECK(tape.scalar(l) == doctest::Approx(std::log(6.0)).epsilon(1e-12));
  }
  SUBCASE("random batches match the scalar definition") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
      const TensorD logits = random_matrix(4, 5, rng, 3.0);
      std::vector<std::uint32_t> y(4);
      for (auto& v : y) v = static_cast<std::uint32_t>(rng.below(5));
      Tape<double> t;
      CHECK(std::abs(t.scalar(cross_entropy(t, t.constant(logits), y)) - static_cast<double>(ce_oracle(logits, y))) < 1e-5);
    }
  }
  SUBCASE("label outside the head") {
    const std::vector<std::uint32_t> y{4};
    CHECK_THROWS_AS(cross_entropy(tape, tape.constant(TensorD({1, 4}, 0.0)), y), DataError);
  }
}

TEST_CASE("supervised contrastive loss") {
  SUBCASE("two identical positives at unit temperature") {
    Tape<double> tape;
    const std::vector<std::uint32_t> y{1, 1};
    const TensorD z = normalize_rows(TensorD({2, 3}, std::vector<double>{1, 2, 2, 1, 2, 2}));
    auto l = supcon(tape, tape.constant(z), y, 1.0);
    REQUIRE(l);
    CHECK(std::abs(tape.scalar(*l)) < 1e-12);
  }
  SUBCASE("hand-set projections match the scalar definition") {
    const std::vector<std::uint32_t> y{0, 0, 1, 1};
    const TensorD z = normalize_rows(TensorD({4, 2}, std::vector<double>{1, 0.2, 0.8, 0.6, -0.3, 1, -1, -0.5}));
    for (double tau : {0.07, 0.5, 1.0}) {
      Tape<double> tape;
      auto l = supcon(tape, tape.constant(z), y, tau);
      REQUIRE(l);
      CHECK(std::abs(tape.scalar(*l) - static_cast<double>(supcon_oracle(z, y, tau))) < 1e-5);
    }
  }
  SUBCASE("anchors without positives are skipped") {
    const std::vector<std::uint32_t> y{0, 0, 1, 2, 2, 3};
    Rng rng(2);
    const TensorD z = normalize_rows(random_matrix(6, 4, rng));
    Tape<double> tape;
    auto l = supcon(tape, tape.constant(z), y, 0.3);
    REQUIRE(l);
    CHECK(std::abs(tape.scalar(*l) - static_cast<double>(supcon_oracle(z, y, 0.3))) < 1e-5);
    const std::vector<std::uint32_t> distinct{0, 1, 2, 3, 4, 5};
    CHECK_FALSE(supcon(tape, tape.constant(z), distinct, 0.3).has_value());
  }
  SUBCASE("invariant to scaling before normalization and to permutation") {
    Rng rng(6);
    const std::vector<std::uint32_t> y{2, 0, 2, 1, 0, 1, 1};
    const TensorD raw = random_matrix(7, 5, rng);
    auto loss = [&](const TensorD& r, const std::vector<std::uint32_t>& labels) {
      Tape<double> tape;
      return tape.scalar(*supcon(tape, tape.l2_normalize(tape.constant(r)), labels, 0.07));
    };
    const double base = loss(raw, y);
    TensorD scaled = raw;
    for (auto& v : scaled.values()) v *= 3.7;
    CHECK(loss(scaled, y) == doctest::Approx(base).epsilon(1e-10));
    std::vector<std::size_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    TensorD pr({7, 5});
    std::vector<std::uint32_t> py(7);
    for (std::size_t i = 0; i < 7; ++i) {
      py[i] = y[perm[i]];
      for (std::size_t c = 0; c < 5; ++c) pr[i * 5 + c] = raw.at(perm[i], c);
    }
    CHECK(loss(pr, py) == doctest::Approx(base).epsilon(1e-10));
  }
}

TEST_CASE("distillation") {
  Rng rng(12);
  const TensorD s = random_matrix(5, 4, rng, 2.0);
  SUBCASE("identical models give zero") {
    for (auto dir : {KdDirection::TeacherToStudent, KdDirection::StudentToTeacher}) {
      Tape<double> tape;
      CHECK(std::abs(tape.scalar(distillation(tape, tape.constant(s), s, 1.0, dir))) < 1e-12);
    }
  }
  SUBCASE("uniform teacher matches the scalar definition") {
    Tape<double> tape;
    const double kl = tape.scalar(distillation(tape, tape.constant(s), TensorD({5, 4}, 0.3), 1.0));
    LD oracle = 0;
    for (std::size_t r = 0; r < 5; ++r) {
      const auto lq = log_softmax_ld(row(s, r));
      LD m = 0;
      for (LD v : lq) m += v;
      oracle += -std::log(4.0L) - m / 4;
    }
    CHECK(std::abs(kl - static_cast<double>(oracle / 5)) < 1e-5);
  }
  SUBCASE("reverse direction matches the scalar definition") {
    const TensorD t = random_matrix(5, 4, rng);
    Tape<double> tape;
    const double kl = tape.scalar(distillation(tape, tape.constant(s), t, 2.0, KdDirection::StudentToTeacher));
    LD oracle = 0;
    for (std::size_t r = 0; r < 5; ++r) {
      std::vector<LD> sr, tr;
      for (std::size_t c = 0; c < 4; ++c) {
        sr.push_back(s.at(r, c) / 2.0L);
        tr.push_back(t.at(r, c) / 2.0L);
      }
      const auto lq = log_softmax_ld(sr), lp = log_softmax_ld(tr);
      for (std::size_t c = 0; c < 4; ++c) oracle += std::exp(lq[c]) * (lq[c] - lp[c]);
    }
    CHECK(std::abs(kl - static_cast<double>(oracle / 5)) < 1e-5);
  }
}

TEST_CASE("ewc penalty and the weighted objective") {
  ParamSetD theta, anchor, fisher;
  theta.set("w", TensorD({1}, 3.0));
  anchor.set("w", TensorD({1}, 1.0));
  fisher.set("w", TensorD({1}, 1.0));
  Tape<double> tape;
  auto vars = bind_params(tape, theta, true);
  CHECK(tape.scalar(ewc_penalty(tape, vars, anchor, fisher, 1.0)) == doctest::Approx(2.0));
  CHECK(tape.scalar(ewc_penalty(tape, vars, theta, fisher, 5.0)) == 0.0);
  CHECK_THROWS_AS(ewc_penalty(tape, vars, anchor, fisher, -1.0), ConfigError);

  CHECK(total_objective({1, 1, 1, 1}, {1, 0.5, 10}) == doctest::Approx(12.5));
  CHECK(total_objective({0.7, 3, 4, 5}, {0, 0, 0}) == 0.7);
}

TEST_CASE("loss gradients match finite differences") {
  const std::vector<std::uint32_t> y{0, 1, 1, 2, 0, 2};
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    Rng rng = Rng::keyed(trial, {Rng::purpose("fccl_fd")});
    const ClassifierShape shape{5, 6, 4, 3, 5, 3};
    const TensorD x = random_matrix(6, 5, rng);
    const ParamSetD p = smooth_instance(shape, x, rng);
    const TensorD teacher = random_matrix(6, 3, rng);
    ParamSetD anchor, fisher;
    for (const auto& [name, t] : p.subset("clf.")) {
      anchor.set(name, random_matrix(1, t.size(), rng).reshaped(t.shape()));
      TensorD f = random_matrix(1, t.size(), rng).reshaped(t.shape());
      for (auto& v : f.values()) v = std::abs(v);
      fisher.set(name, f);
    }
    const GraphFn<double> f = [&](Tape<double>& tape, const ParamVars& v) {
      Var feats = classifier_features(tape, v, tape.constant(x));
      Var logits = classifier_head(tape, v, feats);
      Var ce = cross_entropy(tape, logits, y);
      Var scl = *supcon(tape, projection(tape, v, feats), y, 0.5);
      Var kd = distillation(tape, logits, teacher, 1.0);
      Var ewc = ewc_penalty(tape, v, anchor, fisher, 0.3);
      return tape.add(tape.add(ce, tape.affine(scl, 1.0)), tape.add(tape.affine(kd, 10.0), ewc));
    };
    const auto report = finite_difference_check(f, p);
    INFO(report.summary());
    CHECK(report.passed);
  }
}

TEST_CASE("objective gradient is the weighted sum of term gradients") {
  Rng rng(31);
  const ClassifierShape shape{5, 6, 4, 3, 5, 3};
  ParamSetD p = params_cast<double>(init_classifier(shape, rng));
  p.merge(params_cast<double>(init_projection(shape, rng)));
  const TensorD x = random_matrix(6, 5, rng), xp = random_matrix(4, 5, rng), teacher = random_matrix(4, 3, rng);
  const std::vector<std::uint32_t> y{0, 1, 1, 2, 0, 2}, yp{2, 1, 0, 0};
  const LossWeights w;
  auto term = [&](int which) -> GraphFn<double> {
    return [&, which](Tape<double>& tape, const ParamVars& v) {
      Var feats = classifier_features(tape, v, tape.constant(x));
      Var pl = classifier_head(tape, v, classifier_features(tape, v, tape.constant(xp)));
      Var ce = cross_entropy(tape, classifier_head(tape, v, feats), y);
      Var scl = *supcon(tape, projection(tape, v, feats), y, 0.07);
      Var pce = cross_entropy(tape, pl, yp);
      Var kd = distillation(tape, pl, teacher, 1.0);
      switch (which) {
        case 0: return ce;
        case 1: return scl;
        case 2: return pce;
        case 3: return kd;
        default:
          return tape.add(tape.add(ce, tape.affine(scl, w.w1)), tape.add(tape.affine(pce, w.w2), tape.affine(kd, w.w3)));
      }
    };
  };
  const auto total = evaluate_with_gradients(term(4), p);
  std::vector<Evaluation<double>> parts;
  for (int k = 0; k < 4; ++k) parts.push_back(evaluate_with_gradients(term(k), p));
  CHECK(total.loss == doctest::Approx(total_objective({parts[0].loss, parts[1].loss, parts[2].loss, parts[3].loss}, w)));
  for (const auto& [name, g] : total.grads) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double sum = parts[0].grads.at(name)[i] + w.w1 * parts[1].grads.at(name)[i] +
                         w.w2 * parts[2].grads.at(name)[i] + w.w3 * parts[3].grads.at(name)[i];
      CHECK(std::abs(g[i] - sum) <= 1e-5 * std::max(1.0, std::abs(sum)));
    }
  }
}

TEST_CASE("aggregate_classifier") {
  auto update = [](float v, std::size_t n) {
    ClientUpdate u;
    u.params.set("a", Tensor({2}, v));
    u.samples = n;
    return u;
  };
  const std::vector<ClientUpdate> even{update(1, 5), update(3, 5)};
  CHECK(aggregate_classifier(even).at("a")[0] == doctest::Approx(2.0f));
  const std::vector<ClientUpdate> weighted{update(0, 1), update(4, 3)};
  CHECK(aggregate_classifier(weighted).at("a")[1] == doctest::Approx(3.0f));
  const std::vector<ClientUpdate> single{update(0.37f, 9)};
  CHECK(aggregate_classifier(single) == single[0].params);
  const std::vector<ClientUpdate> zero{update(1, 0), update(2, 0)};
  CHECK_THROWS_AS(aggregate_classifier(zero), DataError);
  CHECK_THROWS_AS(aggregate_classifier(std::span<const ClientUpdate>{}), DataError);

  Rng rng(5);
  const ClassifierShape shape{8, 6, 4, 3};
  const ParamSet p = init_classifier(shape, rng);
  std::vector<ClientUpdate> same(3);
  for (std::size_t j = 0; j < 3; ++j) same[j] = {j, p, 10 + j, {}, 0, 0};
  const ParamSet agg = aggregate_classifier(same);
  for (const auto& [name, t] : p)
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::abs(agg.at(name)[i] - t[i]) <= 1e-6);

  std::vector<ClientUpdate> bad = same;
  bad[1].params.erase("clf.head.b");
  CHECK_THROWS_AS(aggregate_classifier(bad), ShapeError);
}

TEST_CASE("fisher estimate") {
  // One weight, two classes: logits (0, w*x), p = sigmoid(w*x).
  const LogitsFn logistic = [](Tape<float>& tape, const ParamVars& v, Var x) {
    Var wx = tape.matmul(x, v.at("w"));
    return tape.concat(tape.affine(wx, 0.0f), wx);
  };
  const double w = 0.8;
  ParamSet p;
  p.set("w", Tensor({1, 1}, static_cast<float>(w)));
  const std::vector<float> xs{0.5f, -1.5f, 2.0f};
  const Tensor x({3, 1}, xs);
  const std::vector<std::uint32_t> labels{1, 0, 1};
  const ParamSet f = fisher_estimate(p, logistic, x, labels, 3);
  double expected = 0.0;
  for (float xi : xs) {
    const double pr = 1.0 / (1.0 + std::exp(-w * xi));
    expected += pr * (1.0 - pr) * xi * xi;
  }
  CHECK(std::abs(f.at("w")[0] - expected / 3.0) < 1e-4);

  const ParamSet fe = fisher_estimate(p, logistic, x, labels, 3, FisherMode::Empirical);
  double emp = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double pr = 1.0 / (1.0 + std::exp(-w * xs[i]));
    emp += std::pow((labels[i] - pr) * xs[i], 2);
  }
  CHECK(std::abs(fe.at("w")[0] - emp / 3.0) < 1e-4);

  const ParamSet fz = fisher_estimate(p, logistic, Tensor({2, 1}, 0.0f), std::vector<std::uint32_t>{0, 1}, 2);
  CHECK(fz.at("w")[0] == 0.0f);

  Rng rng(2);
  const Corpus c = four_class_corpus(1, 5);
  const ParamSet clf = init_classifier({256, 16, 8, 4}, rng);
  std::vector<std::size_t> idx(c.size());
  std::iota(idx.begin(), idx.end(), 0);
  const ParamSet fc = fisher_estimate(clf, classifier_logits_fn(), c.gather(idx), c.labels_of(idx), 6);
  CHECK(fc.names() == clf.names());
  for (const auto& [_, t] : fc)
    for (float v : t.values()) CHECK(v >= 0.0f);
}

TEST_CASE("predict breaks ties toward the lowest index") {
  Rng rng(1);
  ParamSet p = init_classifier({2, 3, 2, 3}, rng);
  for (auto& [name, t] : p)
    if (name.rfind("clf.head", 0) == 0)
      for (auto& v : t.values()) v = 0.0f;
  CHECK(predict(p, Tensor({2, 2}, 0.4f)) == std::vector<std::uint32_t>{0, 0});
}

TEST_CASE("local training") {
  const Corpus c = four_class_corpus(3, 10);
  const ClassifierShape shape{256, 32, 16, 4, 16, 8};
  Rng init(1);
  ParamSet global = init_classifier(shape, init);
  global.merge(init_projection(shape, init));
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch = 8;
  LocalInputs in;
  in.real = &c;

  SUBCASE("zero epochs returns the broadcast parameters") {
    cfg.epochs = 0;
    Rng rng(2);
    const auto up = local_train_client(0, global, in, cfg, rng);
    CHECK(up.params == global);
    CHECK(up.samples == c.size());
  }
  SUBCASE("identical inputs give identical updates") {
    Rng a(9), b(9);
    const auto ua = local_train_client(0, global, in, cfg, a);
    const auto ub = local_train_client(1, global, in, cfg, b);
    CHECK(ua.params == ub.params);
    CHECK(ua.term_means == ub.term_means);
  }
  SUBCASE("training lowers the objective") {
    Rng e1(4), e2(4), t(5);
    const double before = total_objective(evaluate_terms(global, in, cfg, e1), cfg.weights);
    const auto up = local_train_client(0, global, in, cfg, t);
    const double after = total_objective(evaluate_terms(up.params, in, cfg, e2), cfg.weights);
    CHECK(after < before);
    CHECK(up.term_means.count("scl") == 1);
  }
  SUBCASE("finetune ignores replay and the snapshot") {
    const Corpus past = four_class_corpus(8, 3);
    const Snapshot snap(global.subset("clf."), 0);
    in.past = &past;
    in.current = &past;
    in.snapshot = &snap;
    cfg.method = Method::Finetune;
    Rng rng(3);
    const auto up = local_train_client(0, global, in, cfg, rng);
    CHECK(up.term_means.count("pce") == 0);
    CHECK(up.term_means.count("kd") == 0);
    CHECK(up.term_means.count("scl") == 0);
    CHECK(up.params.subset("proj.") == global.subset("proj."));
  }
  SUBCASE("dddr uses past replay and distillation") {
    const Corpus past = four_class_corpus(8, 3);
    const Snapshot snap(global.subset("clf."), 0);
    in.past = &past;
    in.current = &past;
    in.snapshot = &snap;
    Rng rng(3);
    const auto up = local_train_client(0, global, in, cfg, rng);
    CHECK(up.term_means.count("pce") == 1);
    CHECK(up.term_means.count("kd") == 1);
    CHECK(snap.params() == global.subset("clf."));
    CHECK_NOTHROW(snap.verify());
  }
  SUBCASE("upload noise") {
    cfg.epochs = 0;
    cfg.sigma_c = 0.01;
    Rng rng(2);
    CHECK_FALSE(local_train_client(0, global, in, cfg, rng).params == global);
  }
  SUBCASE("degenerate projections drop out of the contrastive term") {
    ParamSet dead = global;
    dead.at("proj.l2.w") = Tensor(dead.at("proj.l2.w").shape());
    cfg.epochs = 1;
    Rng rng(6);
    const auto up = local_train_client(0, dead, in, cfg, rng);
    CHECK(up.scl_skipped == up.steps);
    CHECK(up.term_means.count("scl") == 0);
    CHECK(std::isfinite(up.term_means.at("total")));
  }
  SUBCASE("no data at all") {
    LocalInputs none;
    Rng rng(2);
    CHECK_THROWS_AS(local_train_client(0, global, none, cfg, rng), DataError);
  }
}

TEST_CASE("centralized training of the oracle architecture") {
  const Corpus train = four_class_corpus(21, 150);
  const Corpus test = four_class_corpus(22, 50);
  Rng init(3);
  const ParamSet p0 = init_classifier({256, 128, 64, 4}, init);
  TrainConfig cfg;
  cfg.method = Method::Finetune;
  cfg.epochs = 10;
  cfg.batch = 32;
  LocalInputs in;
  in.real = &train;
  Rng rng(4);
  const auto up = local_train_client(0, p0, in, cfg, rng);
  std::vector<std::size_t> idx(test.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto pred = predict(up.params, test.gather(idx));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) ok += pred[i] == test.items[i].label;
  CHECK(static_cast<double>(ok) / static_cast<double>(idx.size()) >= 0.95);
}
