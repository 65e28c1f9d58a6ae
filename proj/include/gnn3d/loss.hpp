#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gnn3d/boxes.hpp"
#include "gnn3d/tensor.hpp"

namespace gnn3d {

/// total = alpha * reg + beta * cls + gamma * loc. Defaults 0.1 / 10 / 0.0005.
struct LossWeights {
  double alpha = 0.1;
  double beta = 10.0;
  double gamma = 0.0005;

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("loss weights must be non-negative");
    if (alpha == 0 && beta == 0 && gamma == 0) throw ConfigError("loss weights must not all be zero");
  }
};

struct LossOptions {
  double huber_delta = 1.0;     // localization
  double smooth_l1_beta = 1.0;  // regression
};

/// Per-vertex supervision. label 0 is background; a positive vertex assigned
/// to anchor variant a has label 1 + a and a residual target.
struct VertexTargets {
  std::vector<std::size_t> label;
  std::vector<int> anchor;
  std::vector<BoxResidual> residual;

  std::size_t size() const { return label.size(); }
  bool positive(std::size_t i) const { return anchor[i] >= 0; }
  std::size_t positive_count() const {
    std::size_t n = 0;
    for (auto a : anchor) n += a >= 0;
    return n;
  }

  static VertexTargets background(std::size_t n) { return {std::vector<std::size_t>(n, 0), std::vector<int>(n, -1), std::vector<BoxResidual>(n)}; }
};

/// -(1/N) sum_i log p_i[y_i] with p clamped below at 1e-12. Rows of probs
/// must already be normalized.
inline Var classification_loss(Var probs, const std::vector<std::size_t>& labels) {
  const Tensor& p = probs.value();
  if (p.rank() != 2 || p.rows() != labels.size())
    throw DimensionError("classification_loss: " + shape_str(p.shape()) + " for " + std::to_string(labels.size()) +
                         " labels");
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) s += p.at(r, c);
    if (std::abs(s - 1.0) > 1e-6) throw NumericError("classification_loss: row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
  return scale(reduce_sum(log(clamp_min(pick(probs, labels), 1e-12))), -1.0 / static_cast<double>(labels.size()));
}

namespace detail {

/// (prediction - target) for the assigned anchor block of every positive vertex.
inline Var positive_residual_error(Var residuals, const VertexTargets& t) {
  const Tensor& r = residuals.value();
  if (r.rank() != 2 || r.rows() != t.size() || r.cols() % 7 != 0)
    throw DimensionError("residual output " + shape_str(r.shape()) + " does not fit targets");
  std::vector<std::size_t> rows, offsets;
  std::vector<double> target;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!t.positive(i)) continue;
    if (static_cast<std::size_t>(t.anchor[i] + 1) * 7 > r.cols()) throw DimensionError("anchor id out of range");
    rows.push_back(i);
    offsets.push_back(static_cast<std::size_t>(t.anchor[i]) * 7);
    for (double v : t.residual[i].to_array()) target.push_back(v);
  }
  const std::size_t n = rows.size();
  Var pred = gather_row_blocks(residuals, std::move(rows), std::move(offsets), 7);
  return sub(pred, residuals.tape->constant(Tensor({n, 7}, std::move(target))));
}

}  // namespace detail

/// Mean over positive vertices of the summed Huber penalty on the 7
/// residual components; 0 without positives.
inline Var localization_loss(Var residuals, const VertexTargets& targets, double huber_delta = 1.0) {
  const std::size_t n = targets.positive_count();
  if (n == 0) return residuals.tape->constant(Tensor::scalar(0.0));
  return scale(reduce_sum(huber_elem(detail::positive_residual_error(residuals, targets), huber_delta)),
               1.0 / static_cast<double>(n));
}

/// Mean over positive vertices of the summed smooth-L1 penalty
/// (0.5 x^2 / beta below beta, |x| - 0.5 beta above); 0 without positives.
inline Var regression_loss(Var residuals, const VertexTargets& targets, double beta = 1.0) {
  const std::size_t n = targets.positive_count();
  if (n == 0) return residuals.tape->constant(Tensor::scalar(0.0));
  return scale(reduce_sum(huber_elem(detail::positive_residual_error(residuals, targets), beta)),
               1.0 / (beta * static_cast<double>(n)));
}

inline Var total_loss(Var reg, Var cls, Var loc, const LossWeights& w) {
  return add(add(scale(reg, w.alpha), scale(cls, w.beta)), scale(loc, w.gamma));
}

inline double total_loss(double reg, double cls, double loc, const LossWeights& w) {
  return w.alpha * reg + w.beta * cls + w.gamma * loc;
}

}  // namespace gnn3d
