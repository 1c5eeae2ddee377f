#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dddr/autodiff.hpp"
#include "dddr/datasets.hpp"
#include "dddr/optim.hpp"
#include "dddr/rng.hpp"

namespace dddr {

// ---------------------------------------------------------------------------
// Models

struct ClassifierShape {
  std::size_t input_dim = 256;
  std::size_t hidden = 128;
  std::size_t feature_dim = 64;
  std::size_t classes = 8;  // head covers every class from the start
  std::size_t proj_hidden = 64;
  std::size_t proj_dim = 32;
};

/// "clf.*" feature extractor and head.
ParamSet init_classifier(const ClassifierShape& s, Rng& rng);
/// "proj.*" projection head used only by the contrastive term.
ParamSet init_projection(const ClassifierShape& s, Rng& rng);
ClassifierShape infer_classifier_shape(const ParamSet& p);

template <class T>
Var classifier_features(Tape<T>& tape, const ParamVars& p, Var x);
template <class T>
Var classifier_head(Tape<T>& tape, const ParamVars& p, Var features);
/// l2-normalized projection of features.
template <class T>
Var projection(Tape<T>& tape, const ParamVars& p, Var features);

/// Logits for rows of x, evaluated without gradients.
Tensor classifier_logits(const ParamSet& params, const Tensor& x);
/// Argmax per row; ties go to the lowest index.
std::vector<std::uint32_t> predict(const ParamSet& params, const Tensor& x);

/// Frozen copy of the classifier taken at the end of a task.
class Snapshot {
 public:
  Snapshot(ParamSet params, std::size_t task);
  const ParamSet& params() const { return params_; }
  std::size_t task() const { return task_; }
  std::uint64_t checksum() const { return checksum_; }
  /// Throws if the parameters no longer match the recorded checksum.
  void verify() const;

 private:
  ParamSet params_;
  std::size_t task_;
  std::uint64_t checksum_;
};

// ---------------------------------------------------------------------------
// Losses (graph form, usable in float and double)

/// Mean cross-entropy of full-softmax logits. Throws DataError for labels
/// outside the head.
template <class T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const std::uint32_t> labels);

/// Supervised contrastive loss over l2-normalized rows `z`. Anchors with no
/// same-label partner are skipped; returns nullopt when every anchor is
/// skipped.
template <class T>
std::optional<Var> supcon(Tape<T>& tape, Var z, std::span<const std::uint32_t> labels, double tau);

enum class KdDirection { TeacherToStudent, StudentToTeacher };

/// Mean over rows of KL(softmax(teacher/T) || softmax(student/T)) by default.
template <class T>
Var distillation(Tape<T>& tape, Var student_logits, const BasicTensor<T>& teacher_logits, double temperature,
                 KdDirection dir = KdDirection::TeacherToStudent);

/// lambda/2 * sum F (theta - anchor)^2 over every tensor in `fisher`.
template <class T>
Var ewc_penalty(Tape<T>& tape, const ParamVars& p, const BasicParamSet<T>& anchor, const BasicParamSet<T>& fisher,
                double lambda);

struct LossWeights {
  double w1 = 1.0;   // contrastive
  double w2 = 0.5;   // cross-entropy on past replay
  double w3 = 10.0;  // distillation
};

struct LossTerms {
  double ce = 0.0;
  double scl = 0.0;
  double pce = 0.0;
  double kd = 0.0;
};

/// ce + w1*scl + w2*pce + w3*kd.
double total_objective(const LossTerms& t, const LossWeights& w);

// ---------------------------------------------------------------------------
// Local training

enum class Method { Dddr, Finetune, FedEwc };
Method parse_method(const std::string& s);
std::string to_string(Method m);

struct TrainConfig {
  Method method = Method::Dddr;
  std::size_t rounds = 100;
  std::size_t epochs = 5;
  std::size_t batch = 32;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double tau = 0.07;
  double kd_temperature = 1.0;
  KdDirection kd_direction = KdDirection::TeacherToStudent;
  LossWeights weights;
  bool use_past_replay = true;     // ablation switch for the past-class terms
  bool use_current_replay = true;
  double ewc_lambda = 100.0;
  std::size_t fisher_samples = 200;
  double sigma_c = 0.0;  // noise on classifier uploads
};

/// Diagonal Fisher state carried between tasks by the EWC baseline.
struct EwcState {
  ParamSet anchor;
  ParamSet fisher;
  bool empty() const { return anchor.empty(); }
};

struct LocalInputs {
  const Corpus* real = nullptr;          // client shard of the current task
  const Corpus* past = nullptr;          // generated past-class data
  const Corpus* current = nullptr;       // generated current-class data
  const Snapshot* snapshot = nullptr;    // previous-task classifier
  const EwcState* ewc = nullptr;
};

struct ClientUpdate {
  std::size_t client = 0;
  ParamSet params;  // classifier + projection head
  std::size_t samples = 0;
  std::map<std::string, double> term_means;  // ce, scl, pce, kd, ewc, total
  std::size_t steps = 0;
  std::size_t scl_skipped = 0;
};

/// Runs cfg.epochs epochs of minibatch optimization from `global`. Each step
/// pairs a real batch with an equal-size generated current batch and, when
/// past replay is on, a past batch for the cross-entropy and distillation
/// terms.
ClientUpdate local_train_client(std::size_t client, const ParamSet& global, const LocalInputs& in,
                                const TrainConfig& cfg, Rng& rng);

/// Objective of `params` on one fixed batch layout, for monitoring.
LossTerms evaluate_terms(const ParamSet& params, const LocalInputs& in, const TrainConfig& cfg, Rng& rng);

/// Sample-count weighted mean of the updates' parameters.
ParamSet aggregate_classifier(std::span<const ClientUpdate> updates);
/// Same, on raw parameter sets.
ParamSet weighted_average(std::span<const ParamSet> params, std::span<const double> weights);

enum class FisherMode { Expected, Empirical };

using LogitsFn = std::function<Var(Tape<float>&, const ParamVars&, Var x)>;

/// Diagonal Fisher averaged over the first n_samples rows: expected mode
/// weights every label by the model's probability; empirical mode uses the
/// observed label.
ParamSet fisher_estimate(const ParamSet& params, const LogitsFn& logits, const Tensor& x,
                         std::span<const std::uint32_t> labels, std::size_t n_samples,
                         FisherMode mode = FisherMode::Expected);

/// Classifier logits as a LogitsFn.
LogitsFn classifier_logits_fn();

}  // namespace dddr
