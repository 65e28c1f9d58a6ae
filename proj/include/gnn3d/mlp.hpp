#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gnn3d/random.hpp"
#include "gnn3d/tensor.hpp"

namespace gnn3d {

enum class Activation { relu, none };

/// Layer widths including the input width: widths = {in, h1, ..., out}.
/// activation and batchnorm hold one entry per affine layer.
struct MlpSpec {
  std::vector<std::size_t> widths;
  std::vector<Activation> activation;
  std::vector<bool> batchnorm;
  /// Off when only differences of the output are ever used.
  bool output_bias = true;

  std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }
  bool has_bias(std::size_t l) const { return !batchnorm[l] && (output_bias || l + 1 < layers()); }

  void validate() const {
    if (widths.size() < 2) throw ParameterError("MLP needs at least one layer");
    for (auto w : widths)
      if (w == 0) throw ParameterError("MLP widths must be positive");
    if (activation.size() != layers() || batchnorm.size() != layers())
      throw ParameterError("MLP activation/batchnorm flags must match layer count");
  }

  /// Hidden layers use ReLU, the output layer is linear; no batch-norm.
  static MlpSpec relu_hidden(std::vector<std::size_t> widths) {
    MlpSpec s;
    s.widths = std::move(widths);
    const std::size_t n = s.widths.size() - 1;
    s.activation.assign(n, Activation::relu);
    s.activation.back() = Activation::none;
    s.batchnorm.assign(n, false);
    return s;
  }
};

/// Glorot-uniform weight, stored [fan_in x fan_out] so that y = x W.
inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w({fan_in, fan_out});
  for (auto& v : w.storage()) v = rng.uniform(-bound, bound);
  return w;
}

inline std::string mlp_param(const std::string& prefix, std::size_t layer, const char* what) {
  return prefix + ".l" + std::to_string(layer) + "." + what;
}

inline void init_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec, Rng& rng) {
  spec.validate();
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    store.add(mlp_param(prefix, l, "weight"), glorot_uniform(in, out, rng));
    if (spec.has_bias(l)) store.add(mlp_param(prefix, l, "bias"), Tensor({out}));
    if (spec.batchnorm[l]) {
      store.add(mlp_param(prefix, l, "bn_gamma"), Tensor({out}, 1.0));
      store.add(mlp_param(prefix, l, "bn_beta"), Tensor({out}));
      store.add(mlp_param(prefix, l, "bn_mean"), Tensor({out}), false);
      store.add(mlp_param(prefix, l, "bn_var"), Tensor({out}, 1.0), false);
    }
  }
}

/// Per layer: affine -> optional batch-norm -> activation. A layer with
/// batch-norm has no bias; beta takes its place.
inline Var mlp_forward(const MlpSpec& spec, ParamStore& store, const std::string& prefix, Var x, Mode mode) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != spec.input_width())
    throw DimensionError("mlp " + prefix + ": input " + shape_str(xv.shape()) + " but spec expects width " +
                         std::to_string(spec.input_width()));
  Tape& tape = *x.tape;
  Var h = x;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    h = matmul(h, tape.parameter(store, mlp_param(prefix, l, "weight")));
    if (spec.has_bias(l)) h = add_bias(h, tape.parameter(store, mlp_param(prefix, l, "bias")));
    if (spec.batchnorm[l])
      h = batchnorm(h, tape.parameter(store, mlp_param(prefix, l, "bn_gamma")),
                    tape.parameter(store, mlp_param(prefix, l, "bn_beta")),
                    store.get(mlp_param(prefix, l, "bn_mean")).value, store.get(mlp_param(prefix, l, "bn_var")).value,
                    mode);
    if (spec.activation[l] == Activation::relu) h = relu(h);
  }
  return h;
}

}  // namespace gnn3d
