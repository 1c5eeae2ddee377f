#pragma once

#include "dddr/diffusion.hpp"

namespace dddr::testing {

/// Three client classes, 12 images each.
inline const Corpus& tiny_client_corpus() {
  static const Corpus c = [] {
    CorpusSpec spec = desk_client_spec(5, 12);
    spec.classes.resize(3);
    return generate_shapeworld(spec);
  }();
  return c;
}

/// Small denoiser trained briefly on the matching pretraining classes.
inline const DiffusionModel& tiny_model() {
  static const DiffusionModel m = [] {
    CorpusSpec spec = desk_pretraining_spec(5, 12);
    spec.classes.resize(3);
    PretrainConfig cfg;
    cfg.steps = 500;
    cfg.batch = 32;
    cfg.hidden = 64;
    cfg.layers = 2;
    cfg.embed_dim = 4;
    cfg.time_dim = 4;
    cfg.timesteps = 10;
    cfg.lr = 1e-2;
    cfg.seed = 2;
    return pretrain_diffusion(generate_shapeworld(spec), cfg);
  }();
  return m;
}

}  // namespace dddr::testing
