#include "dddr/fccl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dddr/noise.hpp"

namespace dddr {

// ---------------------------------------------------------------------------
// Models

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

double he(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

}  // namespace

ParamSet init_classifier(const ClassifierShape& s, Rng& rng) {
  if (!s.input_dim || !s.hidden || !s.feature_dim || !s.classes) throw ConfigError("classifier: zero-sized layer");
  ParamSet p;
  p.set("clf.fe1.w", gaussian({s.input_dim, s.hidden}, he(s.input_dim), rng));
  p.set("clf.fe1.b", Tensor({s.hidden}));
  p.set("clf.fe2.w", gaussian({s.hidden, s.feature_dim}, he(s.hidden), rng));
  p.set("clf.fe2.b", Tensor({s.feature_dim}));
  p.set("clf.head.w", gaussian({s.feature_dim, s.classes}, 1.0 / std::sqrt(static_cast<double>(s.feature_dim)), rng));
  p.set("clf.head.b", Tensor({s.classes}));
  return p;
}

ParamSet init_projection(const ClassifierShape& s, Rng& rng) {
  ParamSet p;
  p.set("proj.l1.w", gaussian({s.feature_dim, s.proj_hidden}, he(s.feature_dim), rng));
  p.set("proj.l1.b", Tensor({s.proj_hidden}));
  p.set("proj.l2.w", gaussian({s.proj_hidden, s.proj_dim}, 1.0 / std::sqrt(static_cast<double>(s.proj_hidden)), rng));
  p.set("proj.l2.b", Tensor({s.proj_dim}));
  return p;
}

ClassifierShape infer_classifier_shape(const ParamSet& p) {
  ClassifierShape s;
  s.input_dim = p.at("clf.fe1.w").shape()[0];
  s.hidden = p.at("clf.fe1.w").shape()[1];
  s.feature_dim = p.at("clf.fe2.w").shape()[1];
  s.classes = p.at("clf.head.w").shape()[1];
  if (p.contains("proj.l1.w")) {
    s.proj_hidden = p.at("proj.l1.w").shape()[1];
    s.proj_dim = p.at("proj.l2.w").shape()[1];
  }
  return s;
}

template <class T>
Var classifier_features(Tape<T>& tape, const ParamVars& p, Var x) {
  Var h = tape.relu(tape.add(tape.matmul(x, p.at("clf.fe1.w")), p.at("clf.fe1.b")));
  return tape.relu(tape.add(tape.matmul(h, p.at("clf.fe2.w")), p.at("clf.fe2.b")));
}

template <class T>
Var classifier_head(Tape<T>& tape, const ParamVars& p, Var features) {
  return tape.add(tape.matmul(features, p.at("clf.head.w")), p.at("clf.head.b"));
}

namespace {

template <class T>
Var projection_raw(Tape<T>& tape, const ParamVars& p, Var features) {
  Var h = tape.relu(tape.add(tape.matmul(features, p.at("proj.l1.w")), p.at("proj.l1.b")));
  return tape.add(tape.matmul(h, p.at("proj.l2.w")), p.at("proj.l2.b"));
}

}  // namespace

template <class T>
Var projection(Tape<T>& tape, const ParamVars& p, Var features) {
  return tape.l2_normalize(projection_raw(tape, p, features));
}

Tensor classifier_logits(const ParamSet& params, const Tensor& x) {
  Tape<float> tape;
  const ParamVars vars = bind_params(tape, params, false);
  Var logits = classifier_head(tape, vars, classifier_features(tape, vars, tape.constant(x)));
  return tape.value(logits);
}

std::vector<std::uint32_t> predict(const ParamSet& params, const Tensor& x) {
  const Tensor logits = classifier_logits(params, x);
  const std::size_t n = logits.rows(), c = logits.cols();
  std::vector<std::uint32_t> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (logits[r * c + k] > logits[r * c + best]) best = k;
    out[r] = static_cast<std::uint32_t>(best);
  }
  return out;
}

Snapshot::Snapshot(ParamSet params, std::size_t task)
    : params_(std::move(params)), task_(task), checksum_(dddr::checksum(params_)) {}

void Snapshot::verify() const {
  if (dddr::checksum(params_) != checksum_)
    throw NumericError("snapshot of task " + std::to_string(task_) + " was modified");
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const std::uint32_t> labels) {
  const std::size_t n = tape.value(logits).rows(), c = tape.value(logits).cols();
  if (labels.size() != n) throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  BasicTensor<T> target({n, c});
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= c)
      throw DataError("cross_entropy: label " + std::to_string(labels[r]) + " outside " + std::to_string(c) + " classes");
    target[r * c + labels[r]] = static_cast<T>(1.0 / static_cast<double>(n));
  }
  return tape.affine(tape.sum(tape.mul(tape.log_softmax(logits), tape.constant(std::move(target)))), T{-1});
}

template <class T>
std::optional<Var> supcon(Tape<T>& tape, Var z, std::span<const std::uint32_t> labels, double tau) {
  if (!(tau > 0.0)) throw ConfigError("supcon: tau must be positive");
  const std::size_t n = tape.value(z).rows();
  if (labels.size() != n) throw ShapeError("supcon: label count does not match rows");
  std::vector<std::size_t> positives(n, 0);
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) positives[i] += (j != i && labels[j] == labels[i]);
    anchors += positives[i] > 0;
  }
  if (anchors == 0) return std::nullopt;

  BasicTensor<T> mask({n, n});
  BasicTensor<T> weight({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    mask[i * n + i] = static_cast<T>(-1e9);
    if (!positives[i]) continue;
    const double w = 1.0 / (static_cast<double>(positives[i]) * static_cast<double>(anchors));
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && labels[j] == labels[i]) weight[i * n + j] = static_cast<T>(w);
  }
  Var sim = tape.affine(tape.matmul(z, tape.transpose(z)), static_cast<T>(1.0 / tau));
  Var logp = tape.log_softmax(tape.add(sim, tape.constant(std::move(mask))));
  return tape.affine(tape.sum(tape.mul(logp, tape.constant(std::move(weight)))), T{-1});
}

template <class T>
Var distillation(Tape<T>& tape, Var student_logits, const BasicTensor<T>& teacher_logits, double temperature,
                 KdDirection dir) {
  if (!(temperature > 0.0)) throw ConfigError("distillation: temperature must be positive");
  const auto& s = tape.value(student_logits);
  if (s.shape() != teacher_logits.shape())
    throw ShapeError("distillation: student " + shape_str(s.shape()) + " vs teacher " + shape_str(teacher_logits.shape()));
  const std::size_t n = s.rows();
  const T inv_t = static_cast<T>(1.0 / temperature);
  BasicTensor<T> scaled = teacher_logits;
  for (auto& v : scaled.values()) v *= inv_t;
  const BasicTensor<T> log_p = log_softmax_rows(scaled);
  Var log_q = tape.log_softmax(tape.affine(student_logits, inv_t));
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(n));
  if (dir == KdDirection::TeacherToStudent) {
    BasicTensor<T> p = softmax_rows(scaled);
    double neg_entropy = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] > 0) neg_entropy += static_cast<double>(p[i]) * static_cast<double>(log_p[i]);
    Var cross = tape.sum(tape.mul(log_q, tape.constant(std::move(p))));
    return tape.affine(cross, -inv_n, static_cast<T>(neg_entropy / static_cast<double>(n)));
  }
  Var q = tape.softmax(tape.affine(student_logits, inv_t));
  return tape.affine(tape.sum(tape.mul(q, tape.sub(log_q, tape.constant(log_p)))), inv_n);
}

template <class T>
Var ewc_penalty(Tape<T>& tape, const ParamVars& p, const BasicParamSet<T>& anchor, const BasicParamSet<T>& fisher,
                double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("ewc_penalty: lambda must be >= 0");
  Var acc = tape.constant(BasicTensor<T>::scalar(T{0}));
  for (const auto& [name, f] : fisher) {
    const auto& a = anchor.at(name);
    Var v = p.at(name);
    if (tape.value(v).shape() != a.shape() || a.shape() != f.shape())
      throw ShapeError("ewc_penalty: shape mismatch for " + name);
    Var d = tape.sub(v, tape.constant(a));
    acc = tape.add(acc, tape.sum(tape.mul(tape.square(d), tape.constant(f))));
  }
  return tape.affine(acc, static_cast<T>(lambda / 2.0));
}

double total_objective(const LossTerms& t, const LossWeights& w) {
  return t.ce + w.w1 * t.scl + w.w2 * t.pce + w.w3 * t.kd;
}

#define DDDR_INSTANTIATE(T)                                                                                     \
  template Var classifier_features<T>(Tape<T>&, const ParamVars&, Var);                                        \
  template Var classifier_head<T>(Tape<T>&, const ParamVars&, Var);                                            \
  template Var projection<T>(Tape<T>&, const ParamVars&, Var);                                                 \
  template Var cross_entropy<T>(Tape<T>&, Var, std::span<const std::uint32_t>);                                \
  template std::optional<Var> supcon<T>(Tape<T>&, Var, std::span<const std::uint32_t>, double);                \
  template Var distillation<T>(Tape<T>&, Var, const BasicTensor<T>&, double, KdDirection);                     \
  template Var ewc_penalty<T>(Tape<T>&, const ParamVars&, const BasicParamSet<T>&, const BasicParamSet<T>&, double);
DDDR_INSTANTIATE(float)
DDDR_INSTANTIATE(double)
#undef DDDR_INSTANTIATE

// ---------------------------------------------------------------------------
// Local training

Method parse_method(const std::string& s) {
  if (s == "dddr") return Method::Dddr;
  if (s == "finetune") return Method::Finetune;
  if (s == "fedewc") return Method::FedEwc;
  throw ConfigError("unknown method '" + s + "' (expected dddr, finetune or fedewc)");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::Dddr: return "dddr";
    case Method::Finetune: return "finetune";
    case Method::FedEwc: return "fedewc";
  }
  return "?";
}

namespace {

struct Plan {
  bool gen_current = false;
  bool past = false;
  bool kd = false;
  bool scl = false;
  bool ewc = false;
};

Plan plan_for(const LocalInputs& in, const TrainConfig& cfg) {
  Plan p;
  const bool dddr = cfg.method == Method::Dddr;
  p.gen_current = dddr && cfg.use_current_replay && in.current && in.current->size() > 0;
  p.past = dddr && cfg.use_past_replay && in.past && in.past->size() > 0;
  p.kd = p.past && in.snapshot && cfg.weights.w3 > 0.0;
  p.scl = dddr && cfg.weights.w1 > 0.0;
  p.ewc = cfg.method == Method::FedEwc && in.ewc && !in.ewc->empty() && cfg.ewc_lambda > 0.0;
  return p;
}

/// Endless shuffled pass over a pool.
class Cursor {
 public:
  Cursor(std::size_t n, Rng& rng) : order_(n), rng_(&rng) {
    std::iota(order_.begin(), order_.end(), 0);
    rng_->shuffle(order_);
  }
  std::vector<std::size_t> take(std::size_t k) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k && !order_.empty(); ++i) {
      if (pos_ == order_.size()) {
        rng_->shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  Rng* rng_;
};

struct Batch {
  Tensor x;
  std::vector<std::uint32_t> y;
  Tensor past_x;
  std::vector<std::uint32_t> past_y;
  Tensor teacher;  // snapshot logits on past_x
};

Tensor stack_rows(const Corpus& a, std::span<const std::size_t> ia, const Corpus* b, std::span<const std::size_t> ib) {
  const std::size_t d = a.image.numel();
  Tensor out({ia.size() + ib.size(), d});
  std::size_t r = 0;
  for (std::size_t i : ia) std::copy(a.items[i].pixels.values().begin(), a.items[i].pixels.values().end(), out.data() + d * r++);
  for (std::size_t i : ib) std::copy(b->items[i].pixels.values().begin(), b->items[i].pixels.values().end(), out.data() + d * r++);
  return out;
}

struct Objective {
  Var total;
  Var ce;
  std::optional<Var> scl, pce, kd, ewc;
};

/// Rows whose raw projection is exactly zero (dead ReLUs) cannot be
/// normalized and are left out of the contrastive term.
std::optional<Var> contrastive_term(Tape<float>& tape, const ParamVars& vars, Var feats,
                                    std::span<const std::uint32_t> labels, double tau) {
  Var raw = projection_raw(tape, vars, feats);
  const Tensor& v = tape.value(raw);
  const std::size_t n = v.rows(), d = v.cols();
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c)
      if (v[r * d + c] != 0.0f) {
        keep.push_back(r);
        break;
      }
  if (keep.size() == n) return supcon(tape, tape.l2_normalize(raw), labels, tau);
  if (keep.size() < 2) return std::nullopt;
  Tensor sel({keep.size(), n});
  std::vector<std::uint32_t> kept_labels;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    sel.at(i, keep[i]) = 1.0f;
    kept_labels.push_back(labels[keep[i]]);
  }
  return supcon(tape, tape.l2_normalize(tape.matmul(tape.constant(sel), raw)), kept_labels, tau);
}

Objective build_objective(Tape<float>& tape, const ParamVars& vars, const Batch& b, const Plan& plan,
                          const TrainConfig& cfg, const EwcState* ewc) {
  Objective o;
  const auto w1 = static_cast<float>(cfg.weights.w1), w2 = static_cast<float>(cfg.weights.w2),
             w3 = static_cast<float>(cfg.weights.w3);
  Var feats = classifier_features(tape, vars, tape.constant(b.x));
  o.ce = cross_entropy(tape, classifier_head(tape, vars, feats), b.y);
  o.total = o.ce;
  if (plan.scl) {
    o.scl = contrastive_term(tape, vars, feats, b.y, cfg.tau);
    if (o.scl) o.total = tape.add(o.total, tape.affine(*o.scl, w1));
  }
  if (plan.past && b.past_y.size()) {
    Var pl = classifier_head(tape, vars, classifier_features(tape, vars, tape.constant(b.past_x)));
    o.pce = cross_entropy(tape, pl, b.past_y);
    o.total = tape.add(o.total, tape.affine(*o.pce, w2));
    if (plan.kd) {
      o.kd = distillation(tape, pl, b.teacher, cfg.kd_temperature, cfg.kd_direction);
      o.total = tape.add(o.total, tape.affine(*o.kd, w3));
    }
  }
  if (plan.ewc) {
    o.ewc = ewc_penalty(tape, vars, ewc->anchor, ewc->fisher, cfg.ewc_lambda);
    o.total = tape.add(o.total, *o.ewc);
  }
  return o;
}

void check_inputs(const LocalInputs& in) {
  const bool real = in.real && in.real->size() > 0;
  const bool replay = (in.current && in.current->size() > 0) || (in.past && in.past->size() > 0);
  if (!real && !replay) throw DataError("local training: client has neither local data nor replay data");
  if (in.snapshot) in.snapshot->verify();
}

}  // namespace

ClientUpdate local_train_client(std::size_t client, const ParamSet& global, const LocalInputs& in,
                                const TrainConfig& cfg, Rng& rng) {
  check_inputs(in);
  if (cfg.batch == 0) throw ConfigError("train.batch must be positive");
  const Plan plan = plan_for(in, cfg);
  const bool has_real = in.real && in.real->size() > 0;
  const Corpus& primary = has_real ? *in.real : *in.current;
  // With no real data the generated current set plays the primary role.
  const bool gen_current = has_real && plan.gen_current;

  ParamSet trainable = global.subset("clf.");
  ParamSet frozen;
  if (plan.scl) {
    trainable.merge(global.subset("proj."));
  } else {
    frozen = global.subset("proj.");
  }

  ClientUpdate up;
  up.client = client;
  up.samples = has_real ? in.real->size() : 0;
  OptimizerState opt({cfg.optimizer, cfg.lr});
  Cursor current_cursor(gen_current ? in.current->size() : 0, rng);
  Cursor past_cursor(plan.past ? in.past->size() : 0, rng);
  std::vector<std::size_t> order(primary.size());
  std::iota(order.begin(), order.end(), 0);
  std::map<std::string, double> sums;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch, order.size() - start));
      Batch b;
      std::vector<std::size_t> gen;
      if (gen_current) gen = current_cursor.take(idx.size());
      b.x = stack_rows(primary, idx, gen_current ? in.current : nullptr, gen);
      for (std::size_t i : idx) b.y.push_back(primary.items[i].label);
      for (std::size_t i : gen) b.y.push_back(in.current->items[i].label);
      if (plan.past) {
        const auto pi = past_cursor.take(cfg.batch);
        b.past_x = in.past->gather(pi);
        b.past_y = in.past->labels_of(pi);
        if (plan.kd) b.teacher = classifier_logits(in.snapshot->params(), b.past_x);
      }

      Tape<float> tape;
      ParamVars vars = bind_params(tape, trainable, true);
      for (auto& [k, v] : bind_params(tape, frozen, false)) vars[k] = v;
      const Objective o = build_objective(tape, vars, b, plan, cfg, in.ewc);
      tape.backward(o.total);
      trainable = apply_gradient_step(trainable, collect_grads(tape, trainable, vars), opt);

      sums["total"] += tape.scalar(o.total);
      sums["ce"] += tape.scalar(o.ce);
      if (o.scl) sums["scl"] += tape.scalar(*o.scl);
      if (plan.scl && !o.scl) ++up.scl_skipped;
      if (o.pce) sums["pce"] += tape.scalar(*o.pce);
      if (o.kd) sums["kd"] += tape.scalar(*o.kd);
      if (o.ewc) sums["ewc"] += tape.scalar(*o.ewc);
      ++up.steps;
    }
  }

  for (const auto& [k, v] : sums) up.term_means[k] = v / static_cast<double>(std::max<std::size_t>(up.steps, 1));
  trainable.merge(frozen);
  up.params = cfg.sigma_c > 0.0 ? add_gaussian_noise(trainable, cfg.sigma_c, rng) : std::move(trainable);
  return up;
}

LossTerms evaluate_terms(const ParamSet& params, const LocalInputs& in, const TrainConfig& cfg, Rng& rng) {
  check_inputs(in);
  const Plan plan = plan_for(in, cfg);
  const bool has_real = in.real && in.real->size() > 0;
  const Corpus& primary = has_real ? *in.real : *in.current;
  const bool gen_current = has_real && plan.gen_current;
  Batch b;
  Cursor pc(primary.size(), rng);
  const auto idx = pc.take(std::min(cfg.batch, primary.size()));
  std::vector<std::size_t> gen;
  if (gen_current) gen = Cursor(in.current->size(), rng).take(idx.size());
  b.x = stack_rows(primary, idx, gen_current ? in.current : nullptr, gen);
  for (std::size_t i : idx) b.y.push_back(primary.items[i].label);
  for (std::size_t i : gen) b.y.push_back(in.current->items[i].label);
  if (plan.past) {
    const auto pi = Cursor(in.past->size(), rng).take(cfg.batch);
    b.past_x = in.past->gather(pi);
    b.past_y = in.past->labels_of(pi);
    if (plan.kd) b.teacher = classifier_logits(in.snapshot->params(), b.past_x);
  }
  Tape<float> tape;
  const ParamVars vars = bind_params(tape, params, false);
  const Objective o = build_objective(tape, vars, b, plan, cfg, in.ewc);
  LossTerms t;
  t.ce = tape.scalar(o.ce);
  if (o.scl) t.scl = tape.scalar(*o.scl);
  if (o.pce) t.pce = tape.scalar(*o.pce);
  if (o.kd) t.kd = tape.scalar(*o.kd);
  return t;
}

// ---------------------------------------------------------------------------
// Aggregation

ParamSet weighted_average(std::span<const ParamSet> params, std::span<const double> weights) {
  if (params.empty()) throw DataError("weighted_average: no parameter sets");
  if (params.size() != weights.size()) throw ShapeError("weighted_average: weight count does not match");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw DataError("weighted_average: negative weight");
    total += w;
  }
  if (!(total > 0.0)) throw DataError("weighted_average: zero total weight");
  for (const auto& p : params) require_same_layout(params.front(), p, "weighted_average");
  ParamSet out;
  for (const auto& [name, first] : params.front()) {
    std::vector<double> acc(first.size(), 0.0);
    for (std::size_t j = 0; j < params.size(); ++j) {
      const double w = weights[j] / total;
      const auto& t = params[j].at(name);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * static_cast<double>(t[i]);
    }
    Tensor t(first.shape());
    for (std::size_t i = 0; i < acc.size(); ++i) t[i] = static_cast<float>(acc[i]);
    out.set(name, std::move(t));
  }
  return out;
}

ParamSet aggregate_classifier(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw DataError("aggregate_classifier: no updates");
  std::vector<ParamSet> params;
  std::vector<double> weights;
  for (const auto& u : updates) {
    params.push_back(u.params);
    weights.push_back(static_cast<double>(u.samples));
  }
  return weighted_average(params, weights);
}

// ---------------------------------------------------------------------------
// Fisher

LogitsFn classifier_logits_fn() {
  return [](Tape<float>& tape, const ParamVars& p, Var x) {
    return classifier_head(tape, p, classifier_features(tape, p, x));
  };
}

ParamSet fisher_estimate(const ParamSet& params, const LogitsFn& logits, const Tensor& x,
                         std::span<const std::uint32_t> labels, std::size_t n_samples, FisherMode mode) {
  const std::size_t n = std::min(n_samples, x.rows());
  if (n == 0) throw DataError("fisher_estimate: no samples");
  if (labels.size() != x.rows()) throw ShapeError("fisher_estimate: label count does not match rows");
  const std::size_t d = x.cols();
  std::map<std::string, std::vector<double>> acc;
  for (const auto& [name, t] : params) acc[name].assign(t.size(), 0.0);

  auto add_grad = [&](const Tensor& row, std::uint32_t y, double weight) {
    Tape<float> tape;
    const ParamVars vars = bind_params(tape, params, true);
    Var lsm = tape.log_softmax(logits(tape, vars, tape.constant(row)));
    const std::size_t c = tape.value(lsm).cols();
    if (y >= c) throw DataError("fisher_estimate: label " + std::to_string(y) + " outside " + std::to_string(c) + " classes");
    Tensor pick({1, c});
    pick[y] = 1.0f;
    tape.backward(tape.sum(tape.mul(lsm, tape.constant(pick))));
    for (const auto& [name, v] : vars) {
      const Tensor g = tape.grad(v);
      auto& a = acc[name];
      for (std::size_t i = 0; i < g.size(); ++i) a[i] += weight * static_cast<double>(g[i]) * g[i];
    }
  };

  for (std::size_t r = 0; r < n; ++r) {
    Tensor row({1, d});
    std::copy(x.data() + r * d, x.data() + (r + 1) * d, row.data());
    if (mode == FisherMode::Empirical) {
      add_grad(row, labels[r], 1.0);
      continue;
    }
    Tape<float> probe;
    const Tensor p = softmax_rows(probe.value(logits(probe, bind_params(probe, params, false), probe.constant(row))));
    for (std::size_t y = 0; y < p.size(); ++y)
      if (p[y] > 0.0f) add_grad(row, static_cast<std::uint32_t>(y), p[y]);
  }

  ParamSet out;
  for (const auto& [name, a] : acc) {
    Tensor t(params.at(name).shape());
    for (std::size_t i = 0; i < a.size(); ++i) t[i] = static_cast<float>(a[i] / static_cast<double>(n));
    out.set(name, std::move(t));
  }
  return out;
}

}  // namespace dddr
