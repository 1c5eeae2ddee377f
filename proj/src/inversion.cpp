#include "dddr/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace dddr {

namespace {

std::vector<std::size_t> class_items(const Corpus& corpus, std::span<const std::size_t> shard, std::uint32_t cls) {
  std::vector<std::size_t> out;
  for (std::size_t i : shard)
    if (corpus.items.at(i).label == cls) out.push_back(i);
  return out;
}

double class_loss(const DiffusionModel& model, const Tensor& z0, const LdmNoise& noise, const Tensor& v) {
  const std::size_t n = z0.rows();
  Tape<float> tape;
  const ParamVars vars = bind_params(tape, model.denoiser, false);
  Var cls = tape.constant(repeat_rows(v, n));
  Var loss = ldm_loss(tape, vars, model.config, model.schedule, z0, noise, tape.constant(repeat_rows(model.prompt, n)), cls);
  return tape.scalar(loss);
}

void check_embedding(const DiffusionModel& model, const Tensor& v) {
  if (v.size() != model.config.embed_dim)
    throw ShapeError("class embedding " + shape_str(v.shape()) + " does not match embed_dim " +
                     std::to_string(model.config.embed_dim));
  if (!v.all_finite()) throw NumericError("class embedding has non-finite entries");
}

}  // namespace

LocalInversionState make_local_state(const InversionConfig& cfg, std::uint64_t client_seed, std::uint32_t cls) {
  return {OptimizerState({OptimizerKind::Adam, cfg.lr}), Rng::keyed(client_seed, {Rng::purpose("inversion"), cls})};
}

double inversion_eval_loss(const Corpus& corpus, std::span<const std::size_t> shard, std::uint32_t cls,
                           const Tensor& v, const DiffusionModel& model, const InversionConfig& cfg) {
  const auto pool = class_items(corpus, shard, cls);
  if (pool.empty()) throw DataError("no images of class " + std::to_string(cls) + " in shard");
  if (cfg.eval_rows == 0) throw ConfigError("inversion: eval_rows must be positive");
  // Cycle through the class images so small shards still get eval_rows draws.
  std::vector<std::size_t> items(cfg.eval_rows);
  for (std::size_t i = 0; i < items.size(); ++i) items[i] = pool[i % pool.size()];
  const Tensor z0 = model.autoencoder.encode(corpus.gather(items));
  Rng rng = Rng::keyed(cfg.seed, {Rng::purpose("inversion_eval"), cls});
  const LdmNoise noise = draw_ldm_noise(items.size(), model.config.data_dim, model.schedule, rng);
  return class_loss(model, z0, noise, v);
}

LocalInversionResult local_class_inversion(const Corpus& corpus, std::span<const std::size_t> shard, std::uint32_t cls,
                                           const ClassEmbedding& start, std::size_t steps, const DiffusionModel& model,
                                           const InversionConfig& cfg, LocalInversionState& state) {
  check_embedding(model, start.v);
  LocalInversionResult out;
  out.embedding = start;
  out.embedding.cls = cls;
  out.embedding.origin = EmbeddingOrigin::Local;
  const auto items = class_items(corpus, shard, cls);
  if (items.empty()) {
    out.status = InversionStatus::NoLocalData;
    return out;
  }
  out.loss_start = inversion_eval_loss(corpus, shard, cls, start.v, model, cfg);

  ParamSet v;
  v.set("v", start.v.reshaped({1, model.config.embed_dim}));
  const std::size_t n = cfg.batch;
  const Tensor ones({n, 1}, 1.0f);
  const Tensor prompt_rows = repeat_rows(model.prompt, n);
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = items[static_cast<std::size_t>(state.rng.below(items.size()))];
    const Tensor z0 = model.autoencoder.encode(corpus.gather(idx));
    const LdmNoise noise = draw_ldm_noise(n, model.config.data_dim, model.schedule, state.rng);
    const GraphFn<float> f = [&](Tape<float>& tape, const ParamVars& vars) {
      Var rows = tape.matmul(tape.constant(ones), vars.at("v"));
      return ldm_loss(tape, vars, model.config, model.schedule, z0, noise, tape.constant(prompt_rows), rows);
    };
    const auto ev = evaluate_with_gradients(f, v, model.denoiser);
    v = apply_gradient_step(v, ev.grads, state.opt);
  }
  out.embedding.v = v.at("v").reshaped(start.v.shape());
  out.loss_end = inversion_eval_loss(corpus, shard, cls, out.embedding.v, model, cfg);
  return out;
}

ClassEmbedding initial_embedding(const InversionConfig& cfg, std::uint32_t cls, std::size_t embed_dim) {
  Rng init = Rng::keyed(cfg.seed, {Rng::purpose("inversion_init"), cls});
  return {cls, Tensor({1, embed_dim}, init.normal_vector(embed_dim, cfg.init_std)), 0, EmbeddingOrigin::Aggregated};
}

ClassEmbedding aggregate_embeddings(std::span<const ClassEmbedding> uploads) {
  if (uploads.empty()) throw DataError("aggregate_embeddings: no uploads");
  const auto& first = uploads.front();
  std::vector<double> acc(first.v.size(), 0.0);
  for (const auto& u : uploads) {
    if (u.v.shape() != first.v.shape())
      throw ShapeError("aggregate_embeddings: " + shape_str(u.v.shape()) + " vs " + shape_str(first.v.shape()));
    if (u.cls != first.cls) throw DataError("aggregate_embeddings: uploads for different classes");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += u.v[i];
  }
  ClassEmbedding out = first;
  out.origin = EmbeddingOrigin::Aggregated;
  const double k = static_cast<double>(uploads.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.v[i] = static_cast<float>(acc[i] / k);
  return out;
}

// ---------------------------------------------------------------------------
// Store

const ClassEmbedding& EmbeddingStore::at(std::uint32_t cls) const {
  auto it = frozen_.find(cls);
  if (it == frozen_.end()) throw DataError("no frozen embedding for class " + std::to_string(cls));
  return it->second;
}

std::vector<std::uint32_t> EmbeddingStore::classes() const {
  std::vector<std::uint32_t> out;
  for (const auto& [c, _] : frozen_) out.push_back(c);
  return out;
}

void EmbeddingStore::record_round(const ClassEmbedding& e) {
  if (contains(e.cls)) throw DataError("embedding for class " + std::to_string(e.cls) + " is frozen");
  history_.push_back(e);
}

void EmbeddingStore::freeze(const ClassEmbedding& e) {
  if (contains(e.cls)) throw DataError("embedding for class " + std::to_string(e.cls) + " is frozen");
  if (!e.v.all_finite()) throw NumericError("embedding for class " + std::to_string(e.cls) + " is not finite");
  frozen_.emplace(e.cls, e);
}

std::uint64_t EmbeddingStore::checksum() const {
  ParamSet p;
  for (const auto& [c, e] : frozen_) p.set("class." + std::to_string(c), e.v);
  return dddr::checksum(p);
}

Checkpoint EmbeddingStore::to_checkpoint() const {
  Checkpoint c;
  c.attrs["kind"] = "embeddings";
  for (const auto& [cls, e] : frozen_) {
    c.params.set("class." + std::to_string(cls), e.v);
    c.attrs["round." + std::to_string(cls)] = std::to_string(e.round);
  }
  for (std::size_t i = 0; i < history_.size(); ++i) {
    char key[32];
    std::snprintf(key, sizeof key, "history.%06zu", i);
    c.params.set(key, history_[i].v);
    c.attrs[std::string(key) + ".class"] = std::to_string(history_[i].cls);
    c.attrs[std::string(key) + ".round"] = std::to_string(history_[i].round);
  }
  return c;
}

EmbeddingStore EmbeddingStore::from_checkpoint(const Checkpoint& ckpt) {
  auto kind = ckpt.attrs.find("kind");
  if (kind == ckpt.attrs.end() || kind->second != "embeddings") throw DataError("checkpoint is not an embedding store");
  EmbeddingStore s;
  for (const auto& [name, t] : ckpt.params) {
    if (name.rfind("history.", 0) == 0) {
      ClassEmbedding e;
      e.v = t;
      e.cls = static_cast<std::uint32_t>(std::stoul(ckpt.attrs.at(name + ".class")));
      e.round = std::stoul(ckpt.attrs.at(name + ".round"));
      s.history_.push_back(std::move(e));
    } else if (name.rfind("class.", 0) == 0) {
      ClassEmbedding e;
      e.cls = static_cast<std::uint32_t>(std::stoul(name.substr(6)));
      e.v = t;
      auto r = ckpt.attrs.find("round." + std::to_string(e.cls));
      if (r != ckpt.attrs.end()) e.round = std::stoul(r->second);
      s.frozen_.emplace(e.cls, std::move(e));
    } else {
      throw DataError("embedding store: unexpected tensor " + name);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Federated phase

std::vector<InversionClient> inversion_clients(const TaskSequencePlan& plan, std::size_t task, std::uint64_t seed) {
  if (task >= plan.n_tasks()) throw ConfigError("inversion_clients: task out of range");
  std::vector<InversionClient> out;
  for (std::size_t c = 0; c < plan.clients(); ++c)
    out.push_back({plan.shards[task][c], Rng::keyed(seed, {Rng::purpose("client"), c}).next_u64()});
  return out;
}

std::vector<double> InversionOutcome::mean_round_loss(std::uint32_t cls) const {
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  for (const auto& e : report)
    if (e.cls == cls && e.participated) {
      acc[e.round].first += e.loss_end;
      acc[e.round].second += 1;
    }
  std::vector<double> out;
  for (const auto& [_, p] : acc) out.push_back(p.first / static_cast<double>(p.second));
  return out;
}

InversionOutcome federated_class_inversion(const Corpus& corpus, std::span<const std::uint32_t> classes,
                                           std::span<const InversionClient> clients, const DiffusionModel& model,
                                           const InversionConfig& cfg, EmbeddingStore& store) {
  if (clients.empty()) throw ConfigError("federated_class_inversion: no clients");
  InversionOutcome out;
  out.checksum_before = model.frozen_checksum();

  std::vector<std::uint32_t> sorted(classes.begin(), classes.end());
  std::sort(sorted.begin(), sorted.end());
  for (std::uint32_t cls : sorted) {
    if (store.contains(cls)) throw DataError("embedding for class " + std::to_string(cls) + " is frozen");
    bool any = false;
    for (const auto& c : clients) any = any || !class_items(corpus, c.shard, cls).empty();
    if (!any) throw DataError("class " + std::to_string(cls) + " has no samples on any client");
  }

  for (std::uint32_t cls : sorted) {
    ClassEmbedding global = initial_embedding(cfg, cls, model.config.embed_dim);
    std::vector<LocalInversionState> states;
    for (const auto& c : clients) states.push_back(make_local_state(cfg, c.seed, cls));

    for (std::size_t round = 1; round <= cfg.rounds; ++round) {
      std::vector<ClassEmbedding> uploads;
      for (std::size_t j = 0; j < clients.size(); ++j) {
        auto res = local_class_inversion(corpus, clients[j].shard, cls, global, cfg.local_steps, model, cfg, states[j]);
        const bool ok = res.status == InversionStatus::Ok;
        out.report.push_back({round, cls, j, res.loss_start, res.loss_end, ok});
        if (!ok) continue;
        if (cfg.sigma_g > 0.0) {
          Rng noise = Rng::keyed(cfg.seed, {Rng::purpose("inversion_noise"), round, cls, j});
          res.embedding.v = add_gaussian_noise(res.embedding.v, cfg.sigma_g, noise);
        }
        uploads.push_back(std::move(res.embedding));
      }
      global = aggregate_embeddings(uploads);
      global.round = round;
      store.record_round(global);
    }
    store.freeze(global);
    out.embeddings.push_back(global);
  }

  out.checksum_after = model.frozen_checksum();
  if (out.checksum_after != out.checksum_before) throw NumericError("frozen denoiser changed during inversion");
  return out;
}

void write_inversion_report(const std::filesystem::path& path, std::span<const InversionReportEntry> report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  for (const auto& e : report) {
    nlohmann::ordered_json j;
    j["round"] = e.round;
    j["class"] = e.cls;
    j["client"] = e.client;
    j["loss_start"] = e.loss_start;
    j["loss_end"] = e.loss_end;
    j["participated"] = e.participated;
    f << j.dump() << '\n';
  }
}

}  // namespace dddr
