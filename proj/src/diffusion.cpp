#include "dddr/diffusion.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "dddr/optim.hpp"

namespace dddr {

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.size() < 2) throw ConfigError("noise schedule: need at least 2 steps");
  NoiseSchedule s;
  double prod = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("noise schedule: beta must lie in (0,1)");
    prod *= 1.0 - b;
    s.alphas_bar.push_back(prod);
  }
  s.betas = std::move(betas);
  return s;
}

NoiseSchedule build_schedule(std::size_t steps, double beta_min, double beta_max) {
  if (steps < 2) throw ConfigError("build_schedule: T must be >= 2, got " + std::to_string(steps));
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw ConfigError("build_schedule: need 0 < beta_min <= beta_max < 1");
  std::vector<double> betas(steps);
  for (std::size_t i = 0; i < steps; ++i)
    betas[i] = beta_min + (beta_max - beta_min) * static_cast<double>(i) / static_cast<double>(steps - 1);
  return NoiseSchedule::from_betas(std::move(betas));
}

Tensor forward_diffuse(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.steps())
    throw ConfigError("forward_diffuse: t=" + std::to_string(t) + " outside [1," + std::to_string(sched.steps()) + "]");
  if (z0.shape() != eps.shape())
    throw ShapeError("forward_diffuse: z0 " + shape_str(z0.shape()) + " vs eps " + shape_str(eps.shape()));
  const double a = std::sqrt(sched.alpha_bar(t)), s = std::sqrt(1.0 - sched.alpha_bar(t));
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(a * z0[i] + s * eps[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Autoencoder

Autoencoder Autoencoder::identity(std::size_t data_dim) {
  Autoencoder ae;
  ae.data_dim_ = data_dim;
  return ae;
}

Autoencoder Autoencoder::fit_linear(const Tensor& x, std::size_t latent_dim) {
  const std::size_t n = x.rows(), d = x.cols();
  if (latent_dim == 0 || latent_dim > d) throw ConfigError("autoencoder: latent_dim must be in [1, data_dim]");
  if (n < 2) throw DataError("autoencoder: need at least 2 training rows");
  Eigen::MatrixXd X(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = x[r * d + c];
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const Eigen::MatrixXd C = X.rowwise() - mu;
  const Eigen::MatrixXd cov = (C.transpose() * C) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues ascend; keep the last latent_dim vectors, largest first.
  Autoencoder ae;
  ae.data_dim_ = d;
  ae.mean_ = Tensor({1, d});
  ae.basis_ = Tensor({d, latent_dim});
  for (std::size_t c = 0; c < d; ++c) ae.mean_[c] = static_cast<float>(mu(static_cast<Eigen::Index>(c)));
  for (std::size_t k = 0; k < latent_dim; ++k) {
    const auto col = static_cast<Eigen::Index>(d - 1 - k);
    for (std::size_t r = 0; r < d; ++r)
      ae.basis_[r * latent_dim + k] = static_cast<float>(eig.eigenvectors()(static_cast<Eigen::Index>(r), col));
  }
  const Tensor rec = ae.decode(ae.encode(x));
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (static_cast<double>(rec[i]) - x[i]) * (static_cast<double>(rec[i]) - x[i]);
  ae.fit_mse_ = se / static_cast<double>(x.size());
  return ae;
}

Autoencoder Autoencoder::from_params(const ParamSet& params, std::size_t data_dim) {
  if (!params.contains("ae.basis")) return identity(data_dim);
  Autoencoder ae;
  ae.data_dim_ = data_dim;
  ae.mean_ = params.at("ae.mean");
  ae.basis_ = params.at("ae.basis");
  if (ae.basis_.shape()[0] != data_dim) throw DataError("autoencoder: basis does not match data_dim");
  return ae;
}

Tensor Autoencoder::encode(const Tensor& x) const {
  if (x.cols() != data_dim_)
    throw ShapeError("autoencoder encode: expected rows of " + std::to_string(data_dim_) + ", got " + shape_str(x.shape()));
  if (is_identity()) return x.reshaped({x.rows(), data_dim_});
  const std::size_t n = x.rows(), m = latent_dim();
  Tensor out({n, m});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < m; ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < data_dim_; ++c)
        s += (static_cast<double>(x[r * data_dim_ + c]) - mean_[c]) * basis_[c * m + k];
      out[r * m + k] = static_cast<float>(s);
    }
  return out;
}

Tensor Autoencoder::decode(const Tensor& z) const {
  if (z.cols() != latent_dim())
    throw ShapeError("autoencoder decode: expected rows of " + std::to_string(latent_dim()) + ", got " + shape_str(z.shape()));
  if (is_identity()) return z.reshaped({z.rows(), data_dim_});
  const std::size_t n = z.rows(), m = latent_dim();
  Tensor out({n, data_dim_});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < data_dim_; ++c) {
      double s = mean_[c];
      for (std::size_t k = 0; k < m; ++k) s += static_cast<double>(z[r * m + k]) * basis_[c * m + k];
      out[r * data_dim_ + c] = static_cast<float>(s);
    }
  return out;
}

ParamSet Autoencoder::params() const {
  ParamSet p;
  if (!is_identity()) {
    p.set("ae.mean", mean_);
    p.set("ae.basis", basis_);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Denoiser

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

std::string hidden_name(std::size_t i, const char* suffix) { return "den.h" + std::to_string(i) + suffix; }

}  // namespace

ParamSet init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  if (cfg.layers < 1 || cfg.hidden == 0 || cfg.data_dim == 0 || cfg.embed_dim == 0 || cfg.time_dim < 2)
    throw ConfigError("denoiser: invalid architecture");
  const std::size_t h = cfg.hidden;
  auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  ParamSet p;
  p.set("den.in.w", gaussian({cfg.data_dim, h}, fan(cfg.data_dim), rng));
  p.set("den.in.b", Tensor({h}));
  p.set("den.time.w", gaussian({cfg.time_dim, h}, fan(cfg.time_dim), rng));
  p.set("den.cond.w", gaussian({2 * cfg.embed_dim, h}, fan(2 * cfg.embed_dim), rng));
  for (std::size_t i = 1; i < cfg.layers; ++i) {
    p.set(hidden_name(i, ".w"), gaussian({h, h}, fan(h), rng));
    p.set(hidden_name(i, ".b"), Tensor({h}));
  }
  p.set("den.out.w", gaussian({h, cfg.data_dim}, 0.1 * fan(h), rng));
  p.set("den.out.b", Tensor({cfg.data_dim}));
  return p;
}

template <class T>
BasicTensor<T> time_embedding(std::span<const std::size_t> timesteps, std::size_t dim) {
  const std::size_t half = dim / 2;
  BasicTensor<T> out({timesteps.size(), dim});
  for (std::size_t r = 0; r < timesteps.size(); ++r) {
    const double t = static_cast<double>(timesteps[r]);
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      out[r * dim + k] = static_cast<T>(std::sin(t * freq));
      out[r * dim + half + k] = static_cast<T>(std::cos(t * freq));
    }
  }
  return out;
}

namespace {

template <class T>
Var mlp_forward(Tape<T>& tape, const ParamVars& p, const DenoiserConfig& cfg, Var z, Var temb, Var cond) {
  Var h = tape.matmul(z, p.at("den.in.w"));
  h = tape.add(h, tape.matmul(temb, p.at("den.time.w")));
  h = tape.add(h, tape.matmul(cond, p.at("den.cond.w")));
  h = tape.silu(tape.add(h, p.at("den.in.b")));
  for (std::size_t i = 1; i < cfg.layers; ++i)
    h = tape.silu(tape.add(tape.matmul(h, p.at(hidden_name(i, ".w"))), p.at(hidden_name(i, ".b"))));
  return tape.add(tape.matmul(h, p.at("den.out.w")), p.at("den.out.b"));
}

}  // namespace

template <class T>
Var denoiser_forward(Tape<T>& tape, const ParamVars& p, const DenoiserConfig& cfg, const NoiseSchedule& sched,
                     const BasicTensor<T>& z_t, std::span<const std::size_t> timesteps, Var cond) {
  const std::size_t n = z_t.rows(), d = z_t.cols();
  if (timesteps.size() != n) throw ShapeError("denoiser_forward: one timestep per row required");
  Var temb = tape.constant(time_embedding<T>(timesteps, cfg.time_dim));
  if (cfg.sigma_data <= 0.0) return mlp_forward(tape, p, cfg, tape.constant(z_t), temb, cond);
  BasicTensor<T> zin({n, d}), skip({n, d}), gain({n, d});
  const double sd2 = cfg.sigma_data * cfg.sigma_data;
  for (std::size_t r = 0; r < n; ++r) {
    const double ab = sched.alpha_bar(timesteps[r]);
    const double s2 = (1.0 - ab) / ab, q = s2 + sd2;
    const double c_in = 1.0 / std::sqrt(q * ab), c_skip = std::sqrt(s2) / (q * std::sqrt(ab));
    const double c_out = cfg.sigma_data / std::sqrt(q);
    for (std::size_t c = 0; c < d; ++c) {
      const double z = static_cast<double>(z_t[r * d + c]);
      zin[r * d + c] = static_cast<T>(c_in * z);
      skip[r * d + c] = static_cast<T>(c_skip * z);
      gain[r * d + c] = static_cast<T>(c_out);
    }
  }
  Var f = mlp_forward(tape, p, cfg, tape.constant(std::move(zin)), temb, cond);
  return tape.sub(tape.constant(std::move(skip)), tape.mul(f, tape.constant(std::move(gain))));
}

LdmNoise draw_ldm_noise(std::size_t n, std::size_t dim, const NoiseSchedule& sched, Rng& rng) {
  LdmNoise noise;
  noise.timesteps.resize(n);
  for (auto& t : noise.timesteps) t = 1 + static_cast<std::size_t>(rng.below(sched.steps()));
  noise.eps = Tensor({n, dim}, rng.normal_vector(n * dim));
  return noise;
}

template <class T>
BasicTensor<T> repeat_rows(const BasicTensor<T>& v, std::size_t n) {
  const std::size_t d = v.size();
  BasicTensor<T> out({n, d});
  for (std::size_t r = 0; r < n; ++r) std::copy(v.values().begin(), v.values().end(), out.data() + r * d);
  return out;
}

template <class T>
Var ldm_loss(Tape<T>& tape, const ParamVars& den, const DenoiserConfig& cfg, const NoiseSchedule& sched,
             const BasicTensor<T>& z0, const LdmNoise& noise, Var prompt_rows, Var class_rows) {
  const std::size_t n = z0.rows(), d = z0.cols();
  if (n == 0) throw DataError("ldm_loss: empty batch");
  if (noise.timesteps.size() != n || noise.eps.rows() != n || noise.eps.cols() != d)
    throw ShapeError("ldm_loss: noise draw does not match batch " + shape_str(z0.shape()));
  BasicTensor<T> zt({n, d});
  BasicTensor<T> eps({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    const double ab = sched.alpha_bar(noise.timesteps[r]);
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    for (std::size_t c = 0; c < d; ++c) {
      eps[r * d + c] = static_cast<T>(noise.eps[r * d + c]);
      zt[r * d + c] = static_cast<T>(a * static_cast<double>(z0[r * d + c]) + s * static_cast<double>(noise.eps[r * d + c]));
    }
  }
  Var cond = tape.concat(prompt_rows, class_rows);
  Var pred = denoiser_forward(tape, den, cfg, sched, zt, noise.timesteps, cond);
  return tape.mean(tape.square(tape.sub(pred, tape.constant(std::move(eps)))));
}

#define DDDR_INSTANTIATE(T)                                                                                   \
  template BasicTensor<T> time_embedding<T>(std::span<const std::size_t>, std::size_t);                      \
  template Var denoiser_forward<T>(Tape<T>&, const ParamVars&, const DenoiserConfig&, const NoiseSchedule&,    \
                                   const BasicTensor<T>&, std::span<const std::size_t>, Var);                \
  template BasicTensor<T> repeat_rows<T>(const BasicTensor<T>&, std::size_t);                                \
  template Var ldm_loss<T>(Tape<T>&, const ParamVars&, const DenoiserConfig&, const NoiseSchedule&,          \
                           const BasicTensor<T>&, const LdmNoise&, Var, Var);
DDDR_INSTANTIATE(float)
DDDR_INSTANTIATE(double)
#undef DDDR_INSTANTIATE

// ---------------------------------------------------------------------------
// Model container

std::uint64_t DiffusionModel::frozen_checksum() const {
  ParamSet p = denoiser;
  p.set("prompt", prompt);
  return checksum(p);
}

Tensor DiffusionModel::pretrain_class_embedding(std::uint32_t label) const {
  if (class_table.empty() || label >= class_table.rows())
    throw DataError("diffusion: no pretraining class " + std::to_string(label));
  const std::size_t d = class_table.cols();
  std::vector<float> row(class_table.data() + label * d, class_table.data() + (label + 1) * d);
  return Tensor::row(std::move(row));
}

namespace {

std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

std::size_t attr_size(const Checkpoint& c, const std::string& key) {
  auto it = c.attrs.find(key);
  if (it == c.attrs.end()) throw DataError("diffusion checkpoint: missing attribute " + key);
  return static_cast<std::size_t>(std::stoull(it->second));
}

}  // namespace

Checkpoint DiffusionModel::to_checkpoint() const {
  Checkpoint c;
  c.params = denoiser;
  c.params.set("prompt", prompt);
  if (!class_table.empty()) c.params.set("pretrain.class_table", class_table);
  c.params.merge(autoencoder.params());
  if (!loss_trace.empty()) c.params.set("trace.loss", Tensor({loss_trace.size()}, loss_trace));
  c.attrs["kind"] = "denoiser";
  c.attrs["data_dim"] = std::to_string(config.data_dim);
  c.attrs["image_dim"] = std::to_string(autoencoder.data_dim());
  c.attrs["embed_dim"] = std::to_string(config.embed_dim);
  c.attrs["time_dim"] = std::to_string(config.time_dim);
  c.attrs["hidden"] = std::to_string(config.hidden);
  c.attrs["layers"] = std::to_string(config.layers);
  c.attrs["sigma_data"] = join_doubles({config.sigma_data});
  c.attrs["betas"] = join_doubles(schedule.betas);
  return c;
}

DiffusionModel DiffusionModel::from_checkpoint(const Checkpoint& ckpt) {
  auto kind = ckpt.attrs.find("kind");
  if (kind == ckpt.attrs.end() || kind->second != "denoiser") throw DataError("checkpoint is not a denoiser checkpoint");
  DiffusionModel m;
  m.config.data_dim = attr_size(ckpt, "data_dim");
  m.config.embed_dim = attr_size(ckpt, "embed_dim");
  m.config.time_dim = attr_size(ckpt, "time_dim");
  m.config.hidden = attr_size(ckpt, "hidden");
  m.config.layers = attr_size(ckpt, "layers");
  auto sd = ckpt.attrs.find("sigma_data");
  m.config.sigma_data = sd == ckpt.attrs.end() ? 0.0 : std::stod(sd->second);
  m.schedule = NoiseSchedule::from_betas(split_doubles(ckpt.attrs.at("betas")));
  m.denoiser = ckpt.params.subset("den.");
  m.prompt = ckpt.params.at("prompt");
  if (ckpt.params.contains("pretrain.class_table")) m.class_table = ckpt.params.at("pretrain.class_table");
  m.autoencoder = Autoencoder::from_params(ckpt.params, attr_size(ckpt, "image_dim"));
  if (ckpt.params.contains("trace.loss")) {
    const auto& t = ckpt.params.at("trace.loss");
    m.loss_trace.assign(t.values().begin(), t.values().end());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Pretraining and sampling

DiffusionModel pretrain_diffusion(const Corpus& corpus, const PretrainConfig& cfg) {
  if (corpus.size() == 0) throw DataError("pretrain_diffusion: empty corpus");
  if (cfg.batch == 0) throw ConfigError("pretrain_diffusion: batch must be positive");
  DiffusionModel model;
  model.schedule = build_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max);

  const std::size_t image_dim = corpus.image.numel();
  if (cfg.latent_dim == 0) {
    model.autoencoder = Autoencoder::identity(image_dim);
  } else {
    std::vector<std::size_t> all(corpus.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    model.autoencoder = Autoencoder::fit_linear(corpus.gather(all), cfg.latent_dim);
  }

  model.config = {model.autoencoder.latent_dim(), cfg.embed_dim, cfg.time_dim, cfg.hidden, cfg.layers, cfg.sigma_data};
  Rng init = Rng::keyed(cfg.seed, {Rng::purpose("denoiser_init")});
  ParamSet trainable = init_denoiser(model.config, init);
  trainable.set("pretrain.class_table", gaussian({corpus.class_count, cfg.embed_dim}, 0.1, init));
  Rng prompt_rng = Rng::keyed(cfg.seed, {Rng::purpose("prompt")});
  model.prompt = gaussian({1, cfg.embed_dim}, 1.0, prompt_rng);

  OptimizerState opt({OptimizerKind::Adam, cfg.lr});
  ParamSet ema = trainable;
  const Tensor prompt_rows = repeat_rows(model.prompt, cfg.batch);
  double running = 0.0;
  std::size_t running_n = 0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Rng rng = Rng::keyed(cfg.seed, {Rng::purpose("pretrain_step"), step});
    std::vector<std::size_t> idx(cfg.batch);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(corpus.size()));
    const Tensor z0 = model.autoencoder.encode(corpus.gather(idx));
    const LdmNoise noise = draw_ldm_noise(cfg.batch, model.config.data_dim, model.schedule, rng);
    Tensor onehot({cfg.batch, corpus.class_count});
    for (std::size_t r = 0; r < cfg.batch; ++r) onehot[r * corpus.class_count + corpus.items[idx[r]].label] = 1.0f;

    const GraphFn<float> f = [&](Tape<float>& tape, const ParamVars& vars) {
      Var class_rows = tape.matmul(tape.constant(onehot), vars.at("pretrain.class_table"));
      return ldm_loss(tape, vars, model.config, model.schedule, z0, noise, tape.constant(prompt_rows), class_rows);
    };
    Evaluation<float> ev;
    try {
      ev = evaluate_with_gradients(f, trainable);
    } catch (const NumericError& e) {
      throw NumericError("pretrain_diffusion diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(ev.loss)) throw NumericError("pretrain_diffusion diverged at step " + std::to_string(step));
    trainable = apply_gradient_step(trainable, ev.grads, opt);

    if (cfg.ema_decay > 0.0) {
      const auto d = static_cast<float>(
          std::min(cfg.ema_decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step))));
      for (auto& [name, e] : ema) {
        const auto& p = trainable.at(name);
        for (std::size_t i = 0; i < e.size(); ++i) e[i] = d * e[i] + (1.0f - d) * p[i];
      }
    } else {
      ema = trainable;
    }

    running += ev.loss;
    ++running_n;
    if (cfg.trace_every && ((step + 1) % cfg.trace_every == 0 || step + 1 == cfg.steps || step == 0)) {
      model.loss_trace.push_back(static_cast<float>(running / static_cast<double>(running_n)));
      running = 0.0;
      running_n = 0;
    }
  }

  model.class_table = ema.at("pretrain.class_table");
  ema.erase("pretrain.class_table");
  model.denoiser = std::move(ema);
  return model;
}

Tensor sample(const DiffusionModel& model, const Tensor& class_part, std::size_t n, Rng& rng) {
  if (n == 0) throw ConfigError("sample: n must be >= 1");
  const auto& cfg = model.config;
  if (class_part.size() != cfg.embed_dim)
    throw ShapeError("sample: class part " + shape_str(class_part.shape()) + " does not match embed_dim " +
                     std::to_string(cfg.embed_dim));
  const std::size_t d = cfg.data_dim;
  Tensor z({n, d}, rng.normal_vector(n * d));
  Tensor cond({n, 2 * cfg.embed_dim});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(model.prompt.values().begin(), model.prompt.values().end(), cond.data() + r * 2 * cfg.embed_dim);
    std::copy(class_part.values().begin(), class_part.values().end(), cond.data() + r * 2 * cfg.embed_dim + cfg.embed_dim);
  }
  const auto& sched = model.schedule;
  for (std::size_t t = sched.steps(); t >= 1; --t) {
    const std::vector<std::size_t> ts(n, t);
    Tape<float> tape;
    const ParamVars vars = bind_params(tape, model.denoiser, false);
    Var eps_hat = denoiser_forward(tape, vars, cfg, sched, z, ts, tape.constant(cond));
    const Tensor& e = tape.value(eps_hat);
    const double beta = sched.beta(t);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const double coef = beta / std::sqrt(1.0 - sched.alpha_bar(t));
    const double sigma = t > 1 ? std::sqrt(beta) : 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double xi = t > 1 ? rng.normal() : 0.0;
      z[i] = static_cast<float>(inv_sqrt_alpha * (z[i] - coef * e[i]) + sigma * xi);
    }
  }
  Tensor x = model.autoencoder.decode(z);
  for (auto& v : x.values()) v = std::clamp(v, 0.0f, 1.0f);
  return x;
}

double ldm_loss_value(const DiffusionModel& model, const Tensor& images, const Tensor& class_part, Rng& rng) {
  const Tensor z0 = model.autoencoder.encode(images);
  const std::size_t n = z0.rows();
  const LdmNoise noise = draw_ldm_noise(n, model.config.data_dim, model.schedule, rng);
  Tape<float> tape;
  const ParamVars vars = bind_params(tape, model.denoiser, false);
  Var loss = ldm_loss(tape, vars, model.config, model.schedule, z0, noise, tape.constant(repeat_rows(model.prompt, n)),
                      tape.constant(repeat_rows(class_part, n)));
  return tape.scalar(loss);
}

}  // namespace dddr
