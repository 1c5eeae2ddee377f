#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dddr/autodiff.hpp"
#include "dddr/checkpoint.hpp"
#include "dddr/datasets.hpp"
#include "dddr/rng.hpp"

namespace dddr {

// ---------------------------------------------------------------------------
// Noise schedule

/// betas[t-1] = beta_t, alphas_bar[t-1] = prod_{s<=t} (1 - beta_s), t in 1..T.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas_bar;

  std::size_t steps() const { return betas.size(); }
  double beta(std::size_t t) const { return betas.at(t - 1); }
  double alpha_bar(std::size_t t) const { return alphas_bar.at(t - 1); }

  static NoiseSchedule from_betas(std::vector<double> betas);
};

/// Linear interpolation of beta from beta_min to beta_max over T steps.
NoiseSchedule build_schedule(std::size_t steps, double beta_min, double beta_max);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
Tensor forward_diffuse(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// Autoencoder (E, D)

/// Identity by default; optionally a PCA-fitted linear pair
/// E(x) = B^T (x - mu), D(z) = B z + mu.
class Autoencoder {
 public:
  static Autoencoder identity(std::size_t data_dim);
  /// Fits the linear pair on rows of `x` (n, data_dim); records the training
  /// reconstruction MSE.
  static Autoencoder fit_linear(const Tensor& x, std::size_t latent_dim);
  static Autoencoder from_params(const ParamSet& params, std::size_t data_dim);

  bool is_identity() const { return basis_.empty(); }
  std::size_t data_dim() const { return data_dim_; }
  std::size_t latent_dim() const { return is_identity() ? data_dim_ : basis_.shape()[1]; }
  double fit_mse() const { return fit_mse_; }

  /// Rows (n, data_dim) -> (n, latent_dim).
  Tensor encode(const Tensor& x) const;
  /// Rows (n, latent_dim) -> (n, data_dim). Throws ShapeError on dim mismatch.
  Tensor decode(const Tensor& z) const;
  /// "ae.mean" / "ae.basis", empty for identity.
  ParamSet params() const;

 private:
  std::size_t data_dim_ = 0;
  Tensor mean_;   // (1, data_dim)
  Tensor basis_;  // (data_dim, latent_dim)
  double fit_mse_ = 0.0;
};

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserConfig {
  std::size_t data_dim = 256;  // latent dimension seen by the denoiser
  std::size_t embed_dim = 32;  // d_e: size of the prompt part and of the class part
  std::size_t time_dim = 16;   // sinusoidal time features
  std::size_t hidden = 512;
  std::size_t layers = 3;      // hidden layers
  double sigma_data = 0.5;     // output preconditioning scale; 0 -> the network output is eps directly
};

/// Parameters are named "den.*". The combined condition [prompt; class] is
/// projected by "den.cond.w" and added to the first hidden layer, as is the
/// time embedding.
ParamSet init_denoiser(const DenoiserConfig& cfg, Rng& rng);

/// Sinusoidal features of integer timesteps, rows (n, dim).
template <class T>
BasicTensor<T> time_embedding(std::span<const std::size_t> timesteps, std::size_t dim);

/// eps_theta(z_t, t, cond): z_t (n, data_dim), one timestep per row,
/// cond (n, 2*embed_dim) -> (n, data_dim).
///
/// With sigma_data > 0 the MLP output F is preconditioned: writing
/// y = z_t/sqrt(abar), s^2 = (1-abar)/abar and q = s^2 + sigma_data^2,
///   eps_theta = s/(q*sqrt(abar)) * z_t - sigma_data/sqrt(q) * F(z_t/sqrt(q*abar), t, cond).
/// A bare MLP has to learn a high-gain identity map at small t otherwise.
template <class T>
Var denoiser_forward(Tape<T>& tape, const ParamVars& p, const DenoiserConfig& cfg, const NoiseSchedule& sched,
                     const BasicTensor<T>& z_t, std::span<const std::size_t> timesteps, Var cond);

/// Noise draw for one loss evaluation.
struct LdmNoise {
  std::vector<std::size_t> timesteps;  // uniform in [1, T]
  Tensor eps;                          // (n, data_dim), N(0,1)
};
LdmNoise draw_ldm_noise(std::size_t n, std::size_t dim, const NoiseSchedule& sched, Rng& rng);

/// Mean over batch and coordinates of (eps - eps_theta(z_t, t, [prompt; class]))^2.
/// `prompt_rows` is a constant (n, d_e); `class_rows` is (n, d_e) and may
/// carry gradient.
template <class T>
Var ldm_loss(Tape<T>& tape, const ParamVars& den, const DenoiserConfig& cfg, const NoiseSchedule& sched,
             const BasicTensor<T>& z0, const LdmNoise& noise, Var prompt_rows, Var class_rows);

/// Repeat a (d) or (1,d) vector into (n, d).
template <class T>
BasicTensor<T> repeat_rows(const BasicTensor<T>& v, std::size_t n);

// ---------------------------------------------------------------------------
// Frozen generator

struct DiffusionModel {
  DenoiserConfig config;
  NoiseSchedule schedule;
  Autoencoder autoencoder = Autoencoder::identity(256);
  ParamSet denoiser;    // "den.*", frozen after pretraining
  Tensor prompt;        // (1, d_e), frozen
  Tensor class_table;   // (n_pretrain_classes, d_e), learned during pretraining
  std::vector<float> loss_trace;

  /// Checksum over denoiser params and the prompt part.
  std::uint64_t frozen_checksum() const;
  Checkpoint to_checkpoint() const;
  static DiffusionModel from_checkpoint(const Checkpoint& ckpt);
  /// Class part row of a pretraining class.
  Tensor pretrain_class_embedding(std::uint32_t label) const;
};

struct PretrainConfig {
  std::size_t steps = 6000;
  std::size_t batch = 128;
  double lr = 1e-3;
  double ema_decay = 0.999;  // 0 disables EMA
  std::size_t timesteps = 100;
  double beta_min = 1e-3;
  double beta_max = 0.2;
  std::size_t embed_dim = 32;
  std::size_t time_dim = 16;
  std::size_t hidden = 512;
  std::size_t layers = 3;
  double sigma_data = 0.5;
  std::size_t latent_dim = 0;  // 0 -> identity autoencoder
  std::uint64_t seed = 0;
  std::size_t trace_every = 50;
};

/// Trains the denoiser, a per-class embedding table, and draws the frozen
/// prompt part. Throws NumericError with the step index on divergence.
DiffusionModel pretrain_diffusion(const Corpus& corpus, const PretrainConfig& cfg);

/// Ancestral sampling with condition [prompt; class_part]; decoded and clamped
/// to [0,1]. Returns rows (n, data_dim).
Tensor sample(const DiffusionModel& model, const Tensor& class_part, std::size_t n, Rng& rng);

/// Eq.-1 loss of the frozen model on rows of images, conditioned on class_part.
double ldm_loss_value(const DiffusionModel& model, const Tensor& images, const Tensor& class_part, Rng& rng);

}  // namespace dddr
