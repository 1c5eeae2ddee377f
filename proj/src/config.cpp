#include "dddr/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"

namespace dddr {

using json = nlohmann::ordered_json;

namespace {

std::string type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer() || j.is_number_unsigned()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

[[noreturn]] void mismatch(const std::string& key, const std::string& want, const json& got) {
  throw ConfigError(key + ": expected " + want + ", got " + type_name(got));
}

struct Field {
  std::string key;
  std::function<json()> get;
  std::function<void(const json&)> set;
};

Field num(const std::string& k, double& v) {
  return {k, [&v] { return json(v); }, [k, &v](const json& j) {
            if (!j.is_number()) mismatch(k, "number", j);
            v = j.get<double>();
          }};
}

template <class U>
Field count(const std::string& k, U& v) {
  return {k, [&v] { return json(v); }, [k, &v](const json& j) {
            if (j.is_number_unsigned()) {
              v = static_cast<U>(j.get<std::uint64_t>());
            } else if (j.is_number_integer()) {
              if (j.get<std::int64_t>() < 0) throw ConfigError(k + ": must be non-negative");
              v = static_cast<U>(j.get<std::int64_t>());
            } else {
              mismatch(k, "integer", j);
            }
          }};
}

Field flag(const std::string& k, bool& v) {
  return {k, [&v] { return json(v); }, [k, &v](const json& j) {
            if (!j.is_boolean()) mismatch(k, "boolean", j);
            v = j.get<bool>();
          }};
}

Field text(const std::string& k, std::string& v) {
  return {k, [&v] { return json(v); }, [k, &v](const json& j) {
            if (!j.is_string()) mismatch(k, "string", j);
            v = j.get<std::string>();
          }};
}

template <class E, class Parse, class Show>
Field choice(const std::string& k, E& v, Parse parse, Show show) {
  return {k, [&v, show] { return json(show(v)); }, [k, &v, parse](const json& j) {
            if (!j.is_string()) mismatch(k, "string", j);
            try {
              v = parse(j.get<std::string>());
            } catch (const ConfigError& e) {
              throw ConfigError(k + ": " + e.what());
            }
          }};
}

KdDirection parse_kd(const std::string& s) {
  if (s == "teacher_to_student") return KdDirection::TeacherToStudent;
  if (s == "student_to_teacher") return KdDirection::StudentToTeacher;
  throw ConfigError("unknown direction '" + s + "' (expected teacher_to_student or student_to_teacher)");
}
std::string show_kd(KdDirection d) {
  return d == KdDirection::TeacherToStudent ? "teacher_to_student" : "student_to_teacher";
}
FisherMode parse_fisher(const std::string& s) {
  if (s == "expected") return FisherMode::Expected;
  if (s == "empirical") return FisherMode::Empirical;
  throw ConfigError("unknown fisher mode '" + s + "' (expected expected or empirical)");
}
std::string show_fisher(FisherMode m) { return m == FisherMode::Expected ? "expected" : "empirical"; }
PartitionMode parse_partition(const std::string& s) {
  try {
    return parse_partition_mode(s);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}
OptimizerKind parse_optimizer(const std::string& s) {
  try {
    return parse_optimizer_kind(s);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

std::vector<Field> fields(ExperimentConfig& c) {
  auto& d = c.data;
  auto& ps = c.pretrain_source;
  auto& p = c.pretrain;
  auto& inv = c.inversion;
  auto& t = c.train;
  return {
      choice("experiment.method", c.method, parse_method, [](Method m) { return to_string(m); }),
      count("experiment.seed", c.seed),
      count("experiment.n_tasks", c.n_tasks),
      choice("experiment.fisher_mode", c.fisher_mode, parse_fisher, show_fisher),

      text("data.source", d.source),
      count("data.classes", d.classes),
      count("data.samples_per_class", d.samples_per_class),
      count("data.image_size", d.image_size),
      num("data.test_fraction", d.test_fraction),
      text("data.idx_images", d.idx_images),
      text("data.idx_labels", d.idx_labels),

      count("federation.clients", c.partition.clients),
      choice("federation.partition", c.partition.mode, parse_partition,
             [](PartitionMode m) { return to_string(m); }),
      num("federation.alpha", c.partition.alpha),

      text("pretrain.checkpoint", ps.checkpoint),
      text("pretrain.source", ps.source),
      count("pretrain.samples_per_class", ps.samples_per_class),
      text("pretrain.idx_images", ps.idx_images),
      text("pretrain.idx_labels", ps.idx_labels),
      count("pretrain.steps", p.steps),
      count("pretrain.batch", p.batch),
      num("pretrain.lr", p.lr),
      num("pretrain.ema_decay", p.ema_decay),
      count("pretrain.timesteps", p.timesteps),
      num("pretrain.beta_min", p.beta_min),
      num("pretrain.beta_max", p.beta_max),
      count("pretrain.embed_dim", p.embed_dim),
      count("pretrain.time_dim", p.time_dim),
      count("pretrain.hidden", p.hidden),
      count("pretrain.layers", p.layers),
      num("pretrain.sigma_data", p.sigma_data),
      count("pretrain.latent_dim", p.latent_dim),
      count("pretrain.trace_every", p.trace_every),

      count("inversion.rounds", inv.rounds),
      count("inversion.local_steps", inv.local_steps),
      count("inversion.batch", inv.batch),
      num("inversion.lr", inv.lr),
      num("inversion.init_std", inv.init_std),
      count("inversion.eval_rows", inv.eval_rows),

      count("training.rounds", t.rounds),
      count("training.epochs", t.epochs),
      count("training.batch", t.batch),
      num("training.lr", t.lr),
      choice("training.optimizer", t.optimizer, parse_optimizer, [](OptimizerKind k) { return to_string(k); }),
      num("training.tau", t.tau),
      num("training.kd_temperature", t.kd_temperature),
      choice("training.kd_direction", t.kd_direction, parse_kd, show_kd),
      flag("training.use_past_replay", t.use_past_replay),
      flag("training.use_current_replay", t.use_current_replay),
      num("training.ewc_lambda", t.ewc_lambda),
      count("training.fisher_samples", t.fisher_samples),

      count("classifier.hidden", c.classifier.hidden),
      count("classifier.feature_dim", c.classifier.feature_dim),
      count("classifier.proj_hidden", c.classifier.proj_hidden),
      count("classifier.proj_dim", c.classifier.proj_dim),

      num("loss.w1", t.weights.w1),
      num("loss.w2", t.weights.w2),
      num("loss.w3", t.weights.w3),

      count("replay.past", c.replay.past),
      count("replay.current", c.replay.current),

      num("noise.sigma_c", t.sigma_c),
      num("noise.sigma_g", inv.sigma_g),
  };
}

void require(bool ok, const std::string& key, const std::string& constraint) {
  if (!ok) throw ConfigError(key + ": " + constraint);
}

void apply_tree(ExperimentConfig& cfg, const json& tree, const std::string& prefix,
                const std::map<std::string, const Field*>& by_key) {
  for (const auto& [k, v] : tree.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    auto it = by_key.find(key);
    if (it != by_key.end()) {
      it->second->set(v);
    } else if (v.is_object()) {
      auto sec = by_key.lower_bound(key + ".");
      if (sec == by_key.end() || sec->first.rfind(key + ".", 0) != 0) throw ConfigError("unknown key '" + key + "'");
      apply_tree(cfg, v, key, by_key);
    } else {
      throw ConfigError("unknown key '" + key + "'");
    }
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  require(n_tasks >= 1, "experiment.n_tasks", "must be >= 1");
  require(data.source == "shapeworld" || data.source == "idx", "data.source", "must be shapeworld or idx");
  if (data.source == "shapeworld") {
    require(data.classes >= 2 && data.classes <= desk_shape_classes().size(), "data.classes",
            "must be in [2, " + std::to_string(desk_shape_classes().size()) + "] for shapeworld");
    require(n_tasks <= data.classes, "experiment.n_tasks", "must not exceed data.classes");
    require(data.image_size >= 8, "data.image_size", "must be >= 8");
  } else {
    require(!data.idx_images.empty(), "data.idx_images", "required when data.source is idx");
    require(!data.idx_labels.empty(), "data.idx_labels", "required when data.source is idx");
  }
  require(data.samples_per_class >= 2, "data.samples_per_class", "must be >= 2");
  require(data.test_fraction > 0.0 && data.test_fraction < 1.0, "data.test_fraction", "must be in (0, 1)");

  require(partition.clients >= 1, "federation.clients", "must be >= 1");
  require(partition.alpha > 0.0, "federation.alpha", "must be > 0");

  if (pretrain_source.checkpoint.empty()) {
    require(pretrain_source.source == "shapeworld" || pretrain_source.source == "idx", "pretrain.source",
            "must be shapeworld or idx");
    if (pretrain_source.source == "idx") {
      require(!pretrain_source.idx_images.empty(), "pretrain.idx_images", "required when pretrain.source is idx");
      require(!pretrain_source.idx_labels.empty(), "pretrain.idx_labels", "required when pretrain.source is idx");
    }
    require(pretrain_source.samples_per_class >= 1, "pretrain.samples_per_class", "must be >= 1");
    require(pretrain.steps >= 1, "pretrain.steps", "must be >= 1");
    require(pretrain.batch >= 1, "pretrain.batch", "must be >= 1");
    require(pretrain.lr > 0.0, "pretrain.lr", "must be > 0");
    require(pretrain.ema_decay >= 0.0 && pretrain.ema_decay < 1.0, "pretrain.ema_decay", "must be in [0, 1)");
    require(pretrain.timesteps >= 2, "pretrain.timesteps", "must be >= 2");
    require(pretrain.beta_min > 0.0, "pretrain.beta_min", "must be > 0");
    require(pretrain.beta_max > pretrain.beta_min && pretrain.beta_max < 1.0, "pretrain.beta_max",
            "must be in (beta_min, 1)");
    require(pretrain.embed_dim >= 1, "pretrain.embed_dim", "must be >= 1");
    require(pretrain.time_dim >= 2 && pretrain.time_dim % 2 == 0, "pretrain.time_dim", "must be even and >= 2");
    require(pretrain.hidden >= 1, "pretrain.hidden", "must be >= 1");
    require(pretrain.layers >= 1, "pretrain.layers", "must be >= 1");
    require(pretrain.sigma_data >= 0.0, "pretrain.sigma_data", "must be >= 0");
    require(pretrain.trace_every >= 1, "pretrain.trace_every", "must be >= 1");
  }

  require(inversion.rounds >= 1, "inversion.rounds", "must be >= 1");
  require(inversion.local_steps >= 1, "inversion.local_steps", "must be >= 1");
  require(inversion.batch >= 1, "inversion.batch", "must be >= 1");
  require(inversion.lr > 0.0, "inversion.lr", "must be > 0");
  require(inversion.init_std >= 0.0, "inversion.init_std", "must be >= 0");
  require(inversion.eval_rows >= 1, "inversion.eval_rows", "must be >= 1");

  require(train.rounds >= 1, "training.rounds", "must be >= 1");
  require(train.epochs >= 1, "training.epochs", "must be >= 1");
  require(train.batch >= 1, "training.batch", "must be >= 1");
  require(train.lr > 0.0, "training.lr", "must be > 0");
  require(train.tau > 0.0, "training.tau", "must be > 0");
  require(train.kd_temperature > 0.0, "training.kd_temperature", "must be > 0");
  require(train.ewc_lambda >= 0.0, "training.ewc_lambda", "must be >= 0");
  require(train.fisher_samples >= 1, "training.fisher_samples", "must be >= 1");

  require(classifier.hidden >= 1, "classifier.hidden", "must be >= 1");
  require(classifier.feature_dim >= 1, "classifier.feature_dim", "must be >= 1");
  require(classifier.proj_hidden >= 1, "classifier.proj_hidden", "must be >= 1");
  require(classifier.proj_dim >= 1, "classifier.proj_dim", "must be >= 1");

  require(train.weights.w1 >= 0.0, "loss.w1", "must be >= 0");
  require(train.weights.w2 >= 0.0, "loss.w2", "must be >= 0");
  require(train.weights.w3 >= 0.0, "loss.w3", "must be >= 0");

  if (method == Method::Dddr) {
    require(replay.current >= 1 || !train.use_current_replay, "replay.current", "must be >= 1 for dddr");
    require(replay.past >= 1 || !train.use_past_replay, "replay.past", "must be >= 1 for dddr");
  }
  require(train.sigma_c >= 0.0, "noise.sigma_c", "must be >= 0");
  require(inversion.sigma_g >= 0.0, "noise.sigma_g", "must be >= 0");
}

std::vector<std::string> config_keys() {
  ExperimentConfig c;
  std::vector<std::string> out;
  for (const auto& f : fields(c)) out.push_back(f.key);
  return out;
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  auto fs = fields(cfg);
  for (const auto& f : fs) {
    if (f.key != key) continue;
    json v = json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    f.set(v);
    return;
  }
  throw ConfigError("unknown key '" + key + "'");
}

ExperimentConfig parse_config_text(const std::string& json_text, const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  const bool blank = json_text.find_first_not_of(" \t\r\n") == std::string::npos;
  if (!blank) {
    json tree;
    try {
      tree = json::parse(json_text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!tree.is_object()) throw ConfigError("config: top level must be an object");
    auto fs = fields(cfg);
    std::map<std::string, const Field*> by_key;
    for (const auto& f : fs) by_key[f.key] = &f;
    apply_tree(cfg, tree, "", by_key);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), overrides);
}

std::string config_to_json(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  json out = json::object();
  for (const auto& f : fields(copy)) {
    const auto dot = f.key.find('.');
    out[f.key.substr(0, dot)][f.key.substr(dot + 1)] = f.get();
  }
  return out.dump(2) + "\n";
}

}  // namespace dddr
