#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "prompthash/graph.hpp"
#include "prompthash/tensor.hpp"

// Central finite-difference validation of the tape. The builder runs in
// float64 and must bind the same stored tensors on every invocation; anything
// registered through Graph::param is checked, inputs included if the caller
// binds them as params.

namespace prompthash {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool finite = true;
  bool pass = false;
  std::string worst;  // "name[i]" of the worst element

  std::string to_string() const {
    return (pass ? "pass" : "FAIL") + std::string(" max_rel_err=") +
           std::to_string(max_rel_err) + (worst.empty() ? "" : " at " + worst) +
           (finite ? "" : " (non-finite gradient)");
  }
};

using GradCheckBuilder = std::function<Var<double>(Graph<double>&)>;

inline double gradcheck_rel_err(double fd, double an) {
  const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-4});
  return std::fabs(fd - an) / denom;
}

inline GradCheckReport check_gradients(const GradCheckBuilder& build, double tol = 1e-4,
                                       double step = 1e-5) {
  GradCheckReport rep;

  Graph<double> g;
  Var<double> loss = build(g);
  if (g.value(loss).numel() != 1) throw ContractError("gradcheck: loss must be scalar");
  g.backward(loss);

  struct LeafSnapshot {
    std::string name;
    Tensor<double>* stored;
    Tensor<double> analytic;
  };
  std::vector<LeafSnapshot> snaps;
  for (const auto& leaf : g.leaves()) {
    Tensor<double> an(leaf.param->shape());
    if (g.grad_allocated(leaf.var)) an = g.grad(leaf.var);
    snaps.push_back({leaf.name, leaf.param, std::move(an)});
  }

  auto eval_loss = [&]() -> double {
    Graph<double> g2;
    Var<double> l2 = build(g2);
    return g2.value(l2)[0];
  };

  for (const auto& snap : snaps) {
    Tensor<double>& p = *snap.stored;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double keep = p[i];
      p[i] = keep + step;
      const double lp = eval_loss();
      p[i] = keep - step;
      const double lm = eval_loss();
      p[i] = keep;
      const double fd = (lp - lm) / (2.0 * step);
      const double an = snap.analytic[i];
      if (!std::isfinite(an) || !std::isfinite(fd)) {
        rep.finite = false;
        rep.max_rel_err = std::numeric_limits<double>::infinity();
        rep.worst = snap.name + "[" + std::to_string(i) + "]";
        rep.pass = false;
        return rep;
      }
      const double re = gradcheck_rel_err(fd, an);
      if (re > rep.max_rel_err) {
        rep.max_rel_err = re;
        rep.worst = snap.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  rep.pass = rep.finite && rep.max_rel_err <= tol;
  return rep;
}

}  // namespace prompthash
