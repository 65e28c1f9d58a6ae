#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gnn3d/random.hpp"
#include "gnn3d/tensor.hpp"

namespace gnn3d::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

/// Builds a scalar from parameters named "in0", "in1", ... in the store.
using ScalarFn = std::function<Var(Tape&, std::vector<Var>&)>;

/// Largest relative error between tape gradients and central differences
/// for every input entry, |a - n| / max(|a|, |n|, 1).
inline double op_gradient_error(const std::vector<Tensor>& inputs, const ScalarFn& fn, double h = 1e-5) {
  ParamStore store;
  for (std::size_t i = 0; i < inputs.size(); ++i) store.add("in" + std::to_string(i), inputs[i]);
  auto eval = [&](bool grad) {
    Tape tape;
    std::vector<Var> vars;
    for (auto& e : store.entries()) vars.push_back(tape.parameter(e));
    Var out = fn(tape, vars);
    if (grad) tape.backward(out);
    return out.value()[0];
  };
  store.zero_grad();
  eval(true);
  double worst = 0.0;
  for (auto& e : store.entries()) {
    const std::vector<double> analytic = e.grad.storage();
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      const double orig = e.value[k];
      e.value[k] = orig + h;
      const double up = eval(false);
      e.value[k] = orig - h;
      const double down = eval(false);
      e.value[k] = orig;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(analytic[k] - numeric) / std::max({std::abs(analytic[k]), std::abs(numeric), 1.0}));
    }
  }
  return worst;
}

/// Fixed random weights w so that sum(x * w) exercises every output entry.
inline Var weighted_sum(Tape& tape, Var x, std::uint64_t seed) {
  Rng rng(seed);
  return reduce_sum(elementwise_mul(x, tape.constant(random_tensor(rng, x.value().shape()))));
}

}  // namespace gnn3d::testing
