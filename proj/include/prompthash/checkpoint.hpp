#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "prompthash/config.hpp"
#include "prompthash/model.hpp"

// Checkpoints: config.json next to a raw float64 tensor file (params.bin)
// plus a params.json index for inspection. Round-trips are bit-exact.

namespace prompthash {

// (name, storage) pairs in deterministic bind order
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_parameters(ModelParams<T>& p) {
  Graph<T> g;
  p.bind(g);
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (const auto& leaf : g.leaves()) out.push_back({leaf.name, leaf.param});
  return out;
}

void save_tensor_file(const std::string& dir,
                      const std::vector<std::pair<std::string, const Tensor<double>*>>& tensors);
std::map<std::string, Tensor<double>> load_tensor_file(const std::string& dir);

void save_checkpoint(const std::string& dir, const ExperimentConfig& cfg,
                     ModelParams<double>& model);

struct LoadedCheckpoint {
  ExperimentConfig config;
  ModelParams<double> model;
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

// vocabulary size implied by a dataset config (closed template + class names)
std::size_t config_vocab_size(const DatasetConfig& dc);

}  // namespace prompthash
