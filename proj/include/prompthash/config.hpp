#pragma once

#include <cstdint>
#include <string>

#include "prompthash/data.hpp"
#include "prompthash/model.hpp"

// Experiment configuration: dataset shape, model dims, objective weights,
// optimizer settings, and the ablation variant. JSON round-trip plus a stable
// content hash for report provenance.

namespace prompthash {

struct ExperimentConfig {
  DatasetConfig dataset;

  std::size_t heads = 4;
  std::size_t taap_depth = 1;
  std::size_t n_state = 16;
  std::size_t k = 16;
  bool per_feature_mix = false;

  LossWeights weights;
  PaclConfig pacl;

  // two parameter groups: hash heads vs prompt/fusion modules
  double lr_heads = 1e-4;
  double lr_modules = 1e-3;
  std::size_t batch_size = 64;
  std::size_t steps = 2000;

  std::uint64_t seed = 0;
  Variant variant = Variant::Full;

  void validate() const;

  ModelDims model_dims(std::size_t vocab) const {
    return {vocab,      dataset.prompt_tokens, dataset.embed_dim, heads,
            taap_depth, n_state,               k,                 per_feature_mix};
  }

  // desk-scale defaults: small synthetic dataset, fast learning rates
  static ExperimentConfig toy();
  // published optimizer settings: batch 128, lr 1e-6 / 1e-5
  static ExperimentConfig paper();
};

std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& cfg, const std::string& path);

// FNV-1a over the canonical JSON rendering, as a fixed-width hex string.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace prompthash
