#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>

#include "prompthash/graph.hpp"

// Adam with two learning-rate groups: hash heads vs prompt/fusion modules.
// State is keyed by parameter name, so rebinding on a fresh graph each step
// resumes the same moments.

namespace prompthash {

struct OptimConfig {
  double lr_heads = 1e-4;
  double lr_modules = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(OptimConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr_heads > 0.0) || !(cfg.lr_modules > 0.0)) {
      throw ConfigError("adam: learning rates must be positive");
    }
  }

  void step(Graph<T>& g) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (const auto& leaf : g.leaves()) {
      if (!g.grad_allocated(leaf.var)) continue;
      const Tensor<T>& grad = g.grad(leaf.var);
      Tensor<T>& p = *leaf.param;
      auto& [m, v] = moments(leaf.name, p);
      const double lr = leaf.group == ParamGroup::Heads ? cfg_.lr_heads : cfg_.lr_modules;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        const double gi = double(grad[i]);
        m[i] = T(cfg_.beta1 * double(m[i]) + (1.0 - cfg_.beta1) * gi);
        v[i] = T(cfg_.beta2 * double(v[i]) + (1.0 - cfg_.beta2) * gi * gi);
        const double mhat = double(m[i]) / bc1;
        const double vhat = double(v[i]) / bc2;
        p[i] = T(double(p[i]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::pair<Tensor<T>, Tensor<T>>& moments(const std::string& name, const Tensor<T>& like) {
    auto it = state_.find(name);
    if (it == state_.end()) {
      it = state_.emplace(name, std::make_pair(Tensor<T>(like.shape()), Tensor<T>(like.shape())))
               .first;
    }
    return it->second;
  }

  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> state_;
};

}  // namespace prompthash
