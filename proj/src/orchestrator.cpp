#include "dddr/orchestrator.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dddr/checkpoint.hpp"
#include "json.hpp"

namespace dddr {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Access guard

void TaskDataGuard::begin_task(std::size_t t) {
  if (t >= plan_->n_tasks()) throw ConfigError("access guard: task " + std::to_string(t) + " out of range");
  if (started_ && t < current_)
    throw AccessViolation("access guard: cannot return to task " + std::to_string(t) + " after task " +
                          std::to_string(current_));
  current_ = t;
  started_ = true;
}

const std::vector<std::size_t>& TaskDataGuard::shard(std::size_t task, std::size_t client) {
  if (!started_) throw AccessViolation("access guard: no task has begun");
  if (task < current_) {
    ++past_reads_;
    throw AccessViolation("access guard: read of task " + std::to_string(task) + " data during task " +
                          std::to_string(current_));
  }
  if (task > current_)
    throw AccessViolation("access guard: read of future task " + std::to_string(task) + " during task " +
                          std::to_string(current_));
  if (client >= plan_->clients()) throw ConfigError("access guard: client out of range");
  ++reads_;
  return plan_->shards[task][client];
}

// ---------------------------------------------------------------------------
// Seeds and data

namespace {

std::uint64_t sub_seed(std::uint64_t seed, const char* tag) {
  return Rng::keyed(seed, {Rng::purpose(tag)}).next_u64();
}

PartitionSpec partition_of(const ExperimentConfig& cfg) {
  PartitionSpec p = cfg.partition;
  p.seed = sub_seed(cfg.seed, "partition");
  return p;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact(path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact(path.string());
}

Corpus client_corpus_fresh(const ExperimentConfig& cfg) {
  if (cfg.data.source == "idx") return load_idx(cfg.data.idx_images, cfg.data.idx_labels);
  CorpusSpec spec = desk_client_spec(sub_seed(cfg.seed, "data"), cfg.data.samples_per_class);
  spec.height = spec.width = cfg.data.image_size;
  spec.classes.resize(cfg.data.classes);
  return generate_shapeworld(spec);
}

Corpus pretrain_corpus_fresh(const ExperimentConfig& cfg) {
  if (cfg.pretrain_source.source == "idx") return load_idx(cfg.pretrain_source.idx_images, cfg.pretrain_source.idx_labels);
  CorpusSpec spec = desk_pretraining_spec(sub_seed(cfg.seed, "pretrain_data"), cfg.pretrain_source.samples_per_class);
  spec.height = spec.width = cfg.data.image_size;
  return generate_shapeworld(spec);
}

json meta_of(const Corpus& c) {
  json j;
  j["channels"] = c.image.channels;
  j["height"] = c.image.height;
  j["width"] = c.image.width;
  j["class_count"] = c.class_count;
  j["size"] = c.size();
  return j;
}

Corpus read_dump(const fs::path& dir) {
  const json meta = json::parse(read_text(dir / "meta.json"));
  ImageShape image{meta.at("channels").get<std::size_t>(), meta.at("height").get<std::size_t>(),
                   meta.at("width").get<std::size_t>()};
  Corpus c = read_corpus_dump(dir, image, meta.at("class_count").get<std::size_t>());
  if (c.size() != meta.at("size").get<std::size_t>()) throw DataError("corpus dump " + dir.string() + ": size mismatch");
  return c;
}

void write_dump(const Corpus& c, const fs::path& dir) {
  fs::create_directories(dir);
  dump_corpus(c, dir);
  write_text(dir / "meta.json", meta_of(c).dump(2) + "\n");
}

ExperimentData plan_data(const ExperimentConfig& cfg, Corpus corpus) {
  if (cfg.n_tasks > corpus.class_count)
    throw ConfigError("experiment.n_tasks: must not exceed the corpus class count (" +
                      std::to_string(corpus.class_count) + ")");
  ExperimentData d;
  d.plan = make_plan(corpus, cfg.n_tasks, partition_of(cfg), cfg.data.test_fraction, sub_seed(cfg.seed, "plan"));
  validate_plan(d.plan, corpus);
  d.corpus = std::move(corpus);
  return d;
}

Corpus subset(const Corpus& c, std::span<const std::size_t> idx) {
  Corpus out;
  out.image = c.image;
  out.class_count = c.class_count;
  out.items.reserve(idx.size());
  for (std::size_t i : idx) out.items.push_back(c.items.at(i));
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ExperimentData prepare_data(const ExperimentConfig& cfg) {
  cfg.validate();
  return plan_data(cfg, client_corpus_fresh(cfg));
}

Corpus pretraining_corpus(const ExperimentConfig& cfg) {
  cfg.validate();
  return pretrain_corpus_fresh(cfg);
}

fs::path RunLayout::classifier(std::size_t task) const {
  return root / "checkpoints" / ("classifier_task" + std::to_string(task) + ".ckpt");
}
fs::path RunLayout::replay_dir(std::size_t task, const std::string& which) const {
  return root / "replay" / ("task" + std::to_string(task)) / which;
}
fs::path RunLayout::inversion_log(std::size_t task) const {
  return root / "logs" / ("inversion_task" + std::to_string(task) + ".jsonl");
}

// ---------------------------------------------------------------------------
// Reports

MetricsReport build_report(const ExperimentConfig& cfg, const ExperimentData& data, AccuracyMatrix matrix,
                           const ParamSet& final_classifier) {
  MetricsReport r;
  r.method = to_string(cfg.method);
  r.seed = cfg.seed;
  r.average_accuracy = average_accuracy(matrix);
  r.forgetting = forgetting_measure(matrix);
  double hits = 0.0, total = 0.0;
  for (const auto& [c, a] : matrix.rows.back()) {
    const double n = static_cast<double>(data.plan.test_by_class.at(c).size());
    hits += a * n;
    total += n;
  }
  r.average_accuracy_samples = hits / total;
  for (std::size_t t = 0; t < matrix.rows.size(); ++t) r.curve.push_back(seen_class_accuracy(matrix, t));
  std::vector<std::vector<std::size_t>> local(data.plan.clients());
  for (std::size_t t = 0; t < data.plan.n_tasks(); ++t)
    for (std::size_t j = 0; j < local.size(); ++j)
      local[j].insert(local[j].end(), data.plan.local_test[t][j].begin(), data.plan.local_test[t][j].end());
  r.local = local_client_eval(final_classifier, data.corpus, local);
  r.matrix = std::move(matrix);
  return r;
}

std::string metrics_json(const MetricsReport& r) {
  json j;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["average_accuracy"] = r.average_accuracy;
  j["average_accuracy_samples"] = r.average_accuracy_samples;
  j["forgetting"] = r.forgetting;
  j["curve"] = r.curve;
  j["task_classes"] = r.matrix.task_classes;
  json rows = json::array();
  for (const auto& row : r.matrix.rows) {
    json o = json::object();
    for (const auto& [c, a] : row) o[std::to_string(c)] = a;
    rows.push_back(o);
  }
  j["matrix"] = rows;
  j["local_clients"] = {{"mean", r.local.mean},
                        {"std", r.local.stddev},
                        {"per_client", r.local.per_client},
                        {"skipped", r.local.skipped}};
  j["loss_log"] = r.loss_log;
  return j.dump(2) + "\n";
}

std::string accuracy_csv(const AccuracyMatrix& m) {
  std::string out = "task,class,accuracy\n";
  for (std::size_t t = 0; t < m.rows.size(); ++t)
    for (const auto& [c, a] : m.rows[t]) out += std::to_string(t) + "," + std::to_string(c) + "," + fmt(a) + "\n";
  return out;
}

AccuracyMatrix read_accuracy_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  if (line != "task,class,accuracy") throw DataError(path.string() + ":1: bad header");
  AccuracyMatrix m;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t t = 0;
    unsigned c = 0;
    double a = 0.0;
    char extra = 0;
    if (std::sscanf(line.c_str(), "%zu,%u,%lf%c", &t, &c, &a, &extra) != 3)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected task,class,accuracy");
    if (t > m.rows.size()) throw DataError(path.string() + ":" + std::to_string(lineno) + ": task index skips a row");
    if (t == m.rows.size()) m.rows.emplace_back();
    m.rows[t][c] = a;
  }
  std::set<std::uint32_t> before;
  for (const auto& row : m.rows) {
    std::vector<std::uint32_t> fresh;
    for (const auto& [c, _] : row)
      if (!before.count(c)) fresh.push_back(c);
    before.insert(fresh.begin(), fresh.end());
    m.task_classes.push_back(fresh);
  }
  m.validate();
  return m;
}

std::string accuracy_svg(const std::vector<double>& curve, const std::string& title) {
  const double w = 480, h = 320, left = 56, right = 24, top = 40, bottom = 48;
  const double pw = w - left - right, ph = h - top - bottom;
  auto x_of = [&](std::size_t t) {
    return curve.size() <= 1 ? left + pw / 2 : left + pw * static_cast<double>(t) / static_cast<double>(curve.size() - 1);
  };
  auto y_of = [&](double a) { return top + ph * (1.0 - a); };
  char buf[256];
  std::string s;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                w, h, w, h);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">%s</text>\n", left,
                title.c_str());
  s += buf;
  std::snprintf(buf, sizeof buf,
                "<path d=\"M%.1f %.1f V%.1f H%.1f\" stroke=\"black\" fill=\"none\"/>\n", left, top, top + ph, left + pw);
  s += buf;
  for (int k = 0; k <= 4; ++k) {
    const double a = k / 4.0;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">%.2f</text>\n",
                  left - 6, y_of(a) + 3, a);
    s += buf;
  }
  for (std::size_t t = 0; t < curve.size(); ++t) {
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">%zu</text>\n",
                  x_of(t), top + ph + 16, t + 1);
    s += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">task</text>\n",
                left + pw / 2, h - 10);
  s += buf;
  if (!curve.empty()) {
    s += "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (std::size_t t = 0; t < curve.size(); ++t) {
      std::snprintf(buf, sizeof buf, "%s%.1f,%.1f", t ? " " : "", x_of(t), y_of(curve[t]));
      s += buf;
    }
    s += "\"/>\n";
    for (std::size_t t = 0; t < curve.size(); ++t) {
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"#1f77b4\"/>\n", x_of(t),
                    y_of(curve[t]));
      s += buf;
    }
  }
  s += "</svg>\n";
  return s;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

void report_progress(const ProgressFn& p, const std::string& msg) {
  if (p) p(msg);
}

/// Runs one phase and prefixes any error with phase and task context.
template <class F>
auto in_phase(const std::string& phase, std::size_t task, F&& f) {
  try {
    return f();
  } catch (const MissingArtifact&) {
    throw;
  } catch (const Error& e) {
    const std::string msg = phase + " (task " + std::to_string(task) + "): " + e.what();
    switch (e.kind()) {
      case ErrorKind::Usage: throw ConfigError(msg);
      case ErrorKind::Data: throw DataError(msg);
      case ErrorKind::Numeric: throw NumericError(msg);
    }
    throw;
  }
}

class Pipeline {
 public:
  Pipeline(const ExperimentConfig& cfg, fs::path out, ExperimentData data, const ProgressFn& progress)
      : cfg_(cfg), lay_{std::move(out)}, data_(std::move(data)), guard_(data_.plan), progress_(progress) {
    matrix_.task_classes = data_.plan.label_sets;
    train_ = cfg.train;
    train_.method = cfg.method;
  }

  bool dddr() const { return cfg_.method == Method::Dddr; }
  const ExperimentData& data() const { return data_; }
  TaskDataGuard& guard() { return guard_; }
  EmbeddingStore& store() { return store_; }

  void set_model(DiffusionModel m) {
    if (m.config.data_dim != data_.corpus.image.numel())
      throw DataError("denoiser data dimension " + std::to_string(m.config.data_dim) +
                      " does not match client images (" + std::to_string(data_.corpus.image.numel()) + ")");
    model_ = std::move(m);
    model_checksum_ = model_->frozen_checksum();
  }

  void invert_task(std::size_t t) {
    guard_.begin_task(t);
    InversionConfig icfg = cfg_.inversion;
    icfg.seed = sub_seed(cfg_.seed, "inversion");
    std::vector<InversionClient> clients;
    for (std::size_t j = 0; j < data_.plan.clients(); ++j)
      clients.push_back({guard_.shard(t, j), Rng::keyed(icfg.seed, {Rng::purpose("client"), j}).next_u64()});
    const auto& classes = data_.plan.label_sets[t];
    report_progress(progress_, "invert: task " + std::to_string(t) + ", " + std::to_string(classes.size()) + " classes");
    const InversionOutcome o = in_phase("inversion", t, [&] {
      return federated_class_inversion(data_.corpus, classes, clients, *model_, icfg, store_);
    });
    if (o.checksum_after != model_checksum_) throw NumericError("inversion (task " + std::to_string(t) + "): denoiser changed");
    write_inversion_report(lay_.inversion_log(t), o.report);
  }

  void begin_training() {
    Rng rng = Rng::keyed(cfg_.seed, {Rng::purpose("classifier")});
    ClassifierShape shape = cfg_.classifier;
    shape.input_dim = data_.corpus.image.numel();
    shape.classes = data_.corpus.class_count;
    global_ = init_classifier(shape, rng);
    global_.merge(init_projection(shape, rng));
    fs::create_directories(lay_.train_log().parent_path());
    train_log_.open(lay_.train_log(), std::ios::binary | std::ios::trunc);
    if (!train_log_) throw DataError("cannot write " + lay_.train_log().string());
  }

  void train_task(std::size_t t) {
    guard_.begin_task(t);
    const auto& current = data_.plan.label_sets[t];
    std::vector<std::uint32_t> past;
    for (std::size_t s = 0; s < t; ++s) past.insert(past.end(), data_.plan.label_sets[s].begin(), data_.plan.label_sets[s].end());
    std::sort(past.begin(), past.end());

    ReplaySets sets;
    if (dddr()) {
      const std::vector<std::uint32_t> use_past = cfg_.train.use_past_replay ? past : std::vector<std::uint32_t>{};
      const std::vector<std::uint32_t> use_cur = cfg_.train.use_current_replay ? current : std::vector<std::uint32_t>{};
      report_progress(progress_, "replay: task " + std::to_string(t));
      sets = in_phase("replay", t, [&] {
        return build_replay_sets(store_, use_past, use_cur, cfg_.replay, *model_,
                                 Rng::keyed(cfg_.seed, {Rng::purpose("replay"), t}).next_u64(), data_.corpus.image);
      });
      if (!sets.past.empty()) write_replay_cache(sets.past, lay_.replay_dir(t, "past"));
      if (!sets.current.empty()) write_replay_cache(sets.current, lay_.replay_dir(t, "current"));
    }
    const Corpus past_c = sets.past.as_corpus(data_.corpus.class_count);
    const Corpus cur_c = sets.current.as_corpus(data_.corpus.class_count);

    std::vector<Corpus> locals;
    for (std::size_t j = 0; j < data_.plan.clients(); ++j) locals.push_back(subset(data_.corpus, guard_.shard(t, j)));

    const std::uint64_t train_seed = sub_seed(cfg_.seed, "train");
    for (std::size_t r = 0; r < cfg_.train.rounds; ++r) {
      std::vector<ClientUpdate> updates;
      for (std::size_t j = 0; j < locals.size(); ++j) {
        if (locals[j].size() == 0) continue;
        LocalInputs in;
        in.real = &locals[j];
        in.past = past_c.size() ? &past_c : nullptr;
        in.current = cur_c.size() ? &cur_c : nullptr;
        in.snapshot = snapshot_ ? &*snapshot_ : nullptr;
        in.ewc = ewc_.empty() ? nullptr : &ewc_;
        Rng rng = Rng::keyed(train_seed, {t, r, j});
        ClientUpdate up = in_phase("training", t, [&] { return local_train_client(j, global_, in, train_, rng); });
        json line;
        line["task"] = t;
        line["round"] = r;
        line["client"] = j;
        line["samples"] = up.samples;
        line["steps"] = up.steps;
        for (const auto& [k, v] : up.term_means) line[k] = v;
        train_log_ << line.dump() << '\n';
        updates.push_back(std::move(up));
      }
      global_ = in_phase("aggregation", t, [&] { return aggregate_classifier(updates); });
      if ((r + 1) % 10 == 0 || r + 1 == cfg_.train.rounds)
        report_progress(progress_, "train: task " + std::to_string(t) + " round " + std::to_string(r + 1) + "/" +
                                       std::to_string(cfg_.train.rounds));
    }
    train_log_.flush();

    const ParamSet clf = global_.subset("clf.");
    matrix_.rows.push_back(evaluate_global(clf, data_.corpus, data_.plan.test_by_class, matrix_.seen(t)));
    Checkpoint ck;
    ck.params = global_;
    ck.attrs["kind"] = "classifier";
    ck.attrs["task"] = std::to_string(t);
    ck.attrs["method"] = to_string(cfg_.method);
    fs::create_directories(lay_.classifier(t).parent_path());
    save_checkpoint(lay_.classifier(t), ck);
    snapshot_.emplace(clf, t);

    if (cfg_.method == Method::FedEwc) {
      std::vector<ParamSet> fishers;
      std::vector<double> weights;
      for (std::size_t j = 0; j < locals.size(); ++j) {
        if (locals[j].size() == 0) continue;
        std::vector<std::size_t> idx(locals[j].size());
        std::iota(idx.begin(), idx.end(), 0);
        Rng::keyed(cfg_.seed, {Rng::purpose("fisher"), t, j}).shuffle(idx);
        idx.resize(std::min(idx.size(), cfg_.train.fisher_samples));
        fishers.push_back(fisher_estimate(clf, classifier_logits_fn(), locals[j].gather(idx), locals[j].labels_of(idx),
                                          idx.size(), cfg_.fisher_mode));
        weights.push_back(static_cast<double>(locals[j].size()));
      }
      ParamSet f = weighted_average(fishers, weights);
      if (!ewc_.fisher.empty())
        for (auto& [name, tensor] : f)
          for (std::size_t i = 0; i < tensor.size(); ++i) tensor[i] += ewc_.fisher.at(name)[i];
      ewc_.fisher = std::move(f);
      ewc_.anchor = clf;
    }
  }

  RunResult finish() {
    RunResult res;
    res.report = build_report(cfg_, data_, matrix_, global_.subset("clf."));
    res.guard_reads = guard_.reads();
    res.guard_past_reads = guard_.past_reads();
    res.denoiser_checksum = model_ ? model_checksum_ : 0;
    res.embeddings_checksum = dddr() ? store_.checksum() : 0;
    if (dddr()) save_checkpoint(lay_.embeddings(), store_.to_checkpoint());
    write_text(lay_.metrics(), metrics_json(res.report));
    write_text(lay_.accuracy_csv(), accuracy_csv(res.report.matrix));
    write_text(lay_.accuracy_svg(), accuracy_svg(res.report.curve, res.report.method + ": seen-class accuracy"));
    json s;
    s["method"] = res.report.method;
    s["seed"] = cfg_.seed;
    s["tasks"] = data_.plan.n_tasks();
    s["access_guard"] = {{"shard_reads", res.guard_reads}, {"past_task_reads", res.guard_past_reads}};
    s["denoiser_checksum"] = hex64(res.denoiser_checksum);
    s["embeddings_checksum"] = hex64(res.embeddings_checksum);
    write_text(lay_.summary(), s.dump(2) + "\n");
    return res;
  }

 private:
  const ExperimentConfig& cfg_;
  TrainConfig train_;
  RunLayout lay_;
  ExperimentData data_;
  TaskDataGuard guard_;
  ProgressFn progress_;
  std::optional<DiffusionModel> model_;
  std::uint64_t model_checksum_ = 0;
  EmbeddingStore store_;
  ParamSet global_;
  std::optional<Snapshot> snapshot_;
  EwcState ewc_;
  AccuracyMatrix matrix_;
  std::ofstream train_log_;
};

ExperimentData load_client_data(const ExperimentConfig& cfg, const RunLayout& lay) {
  require_file(lay.data_dir() / "client" / "meta.json");
  return plan_data(cfg, read_dump(lay.data_dir() / "client"));
}

DiffusionModel load_denoiser(const RunLayout& lay) {
  require_file(lay.denoiser());
  return DiffusionModel::from_checkpoint(load_checkpoint(lay.denoiser()));
}

}  // namespace

void stage_gen_data(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  RunLayout lay{out};
  const ExperimentData d = prepare_data(cfg);
  write_dump(d.corpus, lay.data_dir() / "client");
  if (cfg.pretrain_source.checkpoint.empty()) write_dump(pretrain_corpus_fresh(cfg), lay.data_dir() / "pretrain");
  json plan;
  plan["label_sets"] = d.plan.label_sets;
  json shards = json::array();
  for (const auto& task : d.plan.shards) {
    json sizes = json::array();
    for (const auto& s : task) sizes.push_back(s.size());
    shards.push_back(sizes);
  }
  plan["shard_sizes"] = shards;
  plan["train"] = d.plan.train.size();
  plan["test"] = d.plan.test.size();
  write_text(lay.data_dir() / "plan.json", plan.dump(2) + "\n");
}

DiffusionModel stage_pretrain(const ExperimentConfig& cfg, const fs::path& out, const ProgressFn& progress) {
  cfg.validate();
  RunLayout lay{out};
  DiffusionModel model;
  if (!cfg.pretrain_source.checkpoint.empty()) {
    require_file(cfg.pretrain_source.checkpoint);
    report_progress(progress, "pretrain: loading " + cfg.pretrain_source.checkpoint);
    model = DiffusionModel::from_checkpoint(load_checkpoint(cfg.pretrain_source.checkpoint));
  } else {
    require_file(lay.data_dir() / "pretrain" / "meta.json");
    const Corpus corpus = read_dump(lay.data_dir() / "pretrain");
    PretrainConfig p = cfg.pretrain;
    p.seed = sub_seed(cfg.seed, "pretrain");
    report_progress(progress, "pretrain: " + std::to_string(p.steps) + " steps on " + std::to_string(corpus.size()) + " images");
    model = in_phase("pretraining", 0, [&] { return pretrain_diffusion(corpus, p); });
  }
  fs::create_directories(lay.denoiser().parent_path());
  save_checkpoint(lay.denoiser(), model.to_checkpoint());
  return model;
}

EmbeddingStore stage_invert(const ExperimentConfig& cfg, const fs::path& out, const ProgressFn& progress) {
  cfg.validate();
  RunLayout lay{out};
  Pipeline p(cfg, out, load_client_data(cfg, lay), progress);
  if (!p.dddr()) {
    report_progress(progress, "invert: nothing to do for method " + to_string(cfg.method));
    return {};
  }
  p.set_model(load_denoiser(lay));
  for (std::size_t t = 0; t < p.data().plan.n_tasks(); ++t) p.invert_task(t);
  save_checkpoint(lay.embeddings(), p.store().to_checkpoint());
  return p.store();
}

RunResult stage_train(const ExperimentConfig& cfg, const fs::path& out, const ProgressFn& progress) {
  cfg.validate();
  RunLayout lay{out};
  Pipeline p(cfg, out, load_client_data(cfg, lay), progress);
  if (p.dddr()) {
    p.set_model(load_denoiser(lay));
    require_file(lay.embeddings());
    p.store() = EmbeddingStore::from_checkpoint(load_checkpoint(lay.embeddings()));
  }
  p.begin_training();
  for (std::size_t t = 0; t < p.data().plan.n_tasks(); ++t) p.train_task(t);
  return p.finish();
}

RunResult run_fccl(const ExperimentConfig& cfg, const fs::path& out, const ProgressFn& progress) {
  cfg.validate();
  RunLayout lay{out};
  fs::create_directories(out);
  write_text(lay.effective_config(), config_to_json(cfg));
  stage_gen_data(cfg, out);
  Pipeline p(cfg, out, load_client_data(cfg, lay), progress);
  if (p.dddr()) p.set_model(stage_pretrain(cfg, out, progress));
  p.begin_training();
  for (std::size_t t = 0; t < p.data().plan.n_tasks(); ++t) {
    if (p.dddr()) p.invert_task(t);
    p.train_task(t);
  }
  return p.finish();
}

MetricsReport evaluate_run(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  RunLayout lay{out};
  const ExperimentData data = load_client_data(cfg, lay);
  AccuracyMatrix m;
  m.task_classes = data.plan.label_sets;
  ParamSet last;
  for (std::size_t t = 0; t < data.plan.n_tasks(); ++t) {
    require_file(lay.classifier(t));
    last = load_checkpoint(lay.classifier(t)).params.subset("clf.");
    m.rows.push_back(evaluate_global(last, data.corpus, data.plan.test_by_class, m.seen(t)));
  }
  return build_report(cfg, data, std::move(m), last);
}

std::vector<ClassAudit> audit_run(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  RunLayout lay{out};
  const ExperimentData data = load_client_data(cfg, lay);
  ReplayCache merged;
  bool any = false;
  for (std::size_t t = 0; t < data.plan.n_tasks(); ++t) {
    const fs::path dir = lay.replay_dir(t, "current");
    if (!fs::exists(dir)) continue;
    ReplayCache c = read_replay_cache(dir);
    if (!any) {
      merged = c;
      merged.by_class.clear();
      any = true;
    }
    for (auto& [cls, imgs] : c.by_class) merged.by_class[cls] = std::move(imgs);
  }
  if (!any) throw MissingArtifact(lay.replay_dir(0, "current").string());
  const Corpus train = subset(data.corpus, data.plan.train);
  const auto audit = similarity_audit(train, merged);
  json arr = json::array();
  for (const auto& a : audit) {
    arr.push_back({{"class", a.cls},
                   {"best_psnr", {{"real", data.plan.train[a.best_psnr.real_index]},
                                  {"generated", a.best_psnr.generated_index},
                                  {"psnr_db", a.best_psnr.value}}},
                   {"best_ssim", {{"real", data.plan.train[a.best_ssim.real_index]},
                                  {"generated", a.best_ssim.generated_index},
                                  {"ssim", a.best_ssim.value}}}});
  }
  write_text(lay.audit(), json{{"classes", arr}}.dump(2) + "\n");
  return audit;
}

}  // namespace dddr
