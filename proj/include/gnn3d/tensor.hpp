#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gnn3d/error.hpp"

namespace gnn3d {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (count(shape_) != data_.size())
      throw DimensionError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                           " values");
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading dimension for rank-2 tensors; 1 for vectors.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  void validate_shape() const {
    if (shape_.empty()) throw DimensionError("tensor needs at least one dimension");
    for (auto d : shape_)
      if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Named tensors: trainable parameters plus non-trainable buffers (batch-norm
/// running statistics). Insertion order is preserved for checkpointing.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
  };

  Entry& add(const std::string& name, Tensor value, bool trainable = true) {
    if (index_.count(name)) throw ParameterError("duplicate parameter " + name);
    index_[name] = entries_.size();
    Tensor grad(value.shape());
    entries_.push_back(Entry{name, std::move(value), std::move(grad), trainable});
    return entries_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParameterError("unknown parameter " + name);
    return entries_[it->second];
  }
  const Entry& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParameterError("unknown parameter " + name);
    return entries_[it->second];
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grad() {
    for (auto& e : entries_) std::fill(e.grad.storage().begin(), e.grad.storage().end(), 0.0);
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.value.size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace test_hooks {
/// Fault injection: parameter gradients are scaled by (1 + gradient_tamper).
inline double gradient_tamper = 0.0;
}  // namespace test_hooks

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
/// every node's inputs precede it and a reverse sweep is a valid topological
/// order.
class Tape {
 public:
  /// Receives the gradient of the node output; pushes into inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  Var parameter(ParamStore::Entry& entry) {
    nodes_.push_back(Node{entry.value, {}, {}, entry.trainable ? &entry : nullptr, entry.trainable});
    return {this, nodes_.size() - 1};
  }

  Var parameter(ParamStore& store, const std::string& name) { return parameter(store.get(name)); }

  /// Append an operation result. The output must be finite.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    if (!value.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer for an input, or nullptr when the input needs none.
  Tensor* accumulate(Var v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  /// Gradient of a node after backward(); zeros when the node was unreachable.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  /// Reverse sweep from a scalar loss. Parameter gradients are added into the
  /// owning ParamStore entries.
  void backward(Var loss) {
    if (nodes_[loss.id].value.size() != 1)
      throw DimensionError("backward needs a scalar loss, got " + shape_str(nodes_[loss.id].value.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) {
        auto& g = n.param->grad.storage();
        const auto& src = n.grad.storage();
        const double f = 1.0 + test_hooks::gradient_tamper;
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += f * src[k];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    ParamStore::Entry* param;
    bool requires_grad;
  };
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(a.shape()));
}

inline void add_into(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto& d = dst->storage();
  const auto& s = src.storage();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_mat(const Tensor& t) { return ConstMap(t.storage().data(), t.rows(), t.cols()); }
inline MutMap as_mat(Tensor& t) { return MutMap(t.storage().data(), t.rows(), t.cols()); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2("matmul", av);
  detail::require_rank2("matmul", bv);
  if (av.cols() != bv.rows())
    throw DimensionError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor out({av.rows(), bv.cols()});
  detail::as_mat(out).noalias() = detail::as_mat(av) * detail::as_mat(bv);
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.accumulate(a)) detail::as_mat(*ga).noalias() += detail::as_mat(g) * detail::as_mat(b.value()).transpose();
    if (Tensor* gb = t.accumulate(b)) detail::as_mat(*gb).noalias() += detail::as_mat(a.value()).transpose() * detail::as_mat(g);
  });
}

inline Var add(Var a, Var b) {
  detail::require_same("add", a.value(), b.value());
  Tensor out = a.value();
  detail::add_into(&out, b.value());
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    detail::add_into(t.accumulate(a), g);
    detail::add_into(t.accumulate(b), g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  auto& o = out.storage();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    detail::add_into(t.accumulate(a), g);
    if (Tensor* gb = t.accumulate(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

inline Var elementwise_mul(Var a, Var b) {
  detail::require_same("elementwise_mul", a.value(), b.value());
  Tensor out = a.value();
  auto& o = out.storage();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape->record("elementwise_mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.accumulate(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (Tensor* gb = t.accumulate(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

/// x[n x f] + bias[f] broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.size() != xv.cols())
    throw DimensionError("add_bias: " + shape_str(xv.shape()) + " + " + shape_str(bv.shape()));
  Tensor out = xv;
  const std::size_t f = xv.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % f];
  return x.tape->record("add_bias", std::move(out), {x, bias}, [x, bias, f](Tape& t, const Tensor& g) {
    detail::add_into(t.accumulate(x), g);
    if (Tensor* gb = t.accumulate(bias))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % f] += g[i];
  });
}

inline Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v *= factor;
  return x.tape->record("scale", std::move(out), {x}, [x, factor](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += factor * g[i];
  });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return x.tape->record("relu", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x.value()[i] > 0.0) (*gx)[i] += g[i];
  });
}

/// Concatenate along the last axis. Vectors join end to end; matrices with
/// equal row counts join column-wise.
inline Var concat(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != bv.rank() || av.rank() > 2 || av.rows() != bv.rows())
    throw DimensionError("concat: " + shape_str(av.shape()) + " with " + shape_str(bv.shape()));
  const std::size_t n = av.rows(), ca = av.cols(), cb = bv.cols();
  Shape shape = av.rank() == 1 ? Shape{ca + cb} : Shape{n, ca + cb};
  Tensor out(shape);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(&av.storage()[r * ca], ca, &out.storage()[r * (ca + cb)]);
    std::copy_n(&bv.storage()[r * cb], cb, &out.storage()[r * (ca + cb) + ca]);
  }
  return a.tape->record("concat", std::move(out), {a, b}, [a, b, n, ca, cb](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.accumulate(a))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < ca; ++c) (*ga)[r * ca + c] += g[r * (ca + cb) + c];
    if (Tensor* gb = t.accumulate(b))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < cb; ++c) (*gb)[r * cb + c] += g[r * (ca + cb) + ca + c];
  });
}

/// Sum of all entries as a scalar.
inline Var reduce_sum(Var x) {
  double s = 0.0;
  for (double v : x.value().storage()) s += v;
  return x.tape->record("reduce_sum", Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (auto& v : gx->storage()) v += g[0];
  });
}

inline Var mean(Var x) { return scale(reduce_sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Natural log; non-positive input is a domain error.
inline Var log(Var x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
    v = std::log(v);
  }
  return x.tape->record("log", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / x.value()[i];
  });
}

/// max(x, floor); gradient passes only where x > floor.
inline Var clamp_min(Var x, double floor) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = std::max(v, floor);
  return x.tape->record("clamp_min", std::move(out), {x}, [x, floor](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x.value()[i] > floor) (*gx)[i] += g[i];
  });
}

/// Elementwise Huber: 0.5 x^2 for |x| <= delta, delta (|x| - 0.5 delta) beyond.
inline Var huber_elem(Var x, double delta) {
  if (!(delta > 0.0)) throw ParameterError("huber threshold must be positive");
  Tensor out = x.value();
  for (auto& v : out.storage()) {
    const double a = std::abs(v);
    v = a <= delta ? 0.5 * v * v : delta * (a - 0.5 * delta);
  }
  return x.tape->record("huber_elem", std::move(out), {x}, [x, delta](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x.value()[i];
        (*gx)[i] += g[i] * (std::abs(v) <= delta ? v : (v > 0 ? delta : -delta));
      }
  });
}

namespace detail {

/// Stable softmax over `count` values spaced `stride` apart starting at `base`.
inline void softmax_strided(const double* in, double* out, std::size_t count, std::size_t stride) {
  double mx = in[0];
  for (std::size_t i = 1; i < count; ++i) mx = std::max(mx, in[i * stride]);
  double sum = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    out[i * stride] = std::exp(in[i * stride] - mx);
    sum += out[i * stride];
  }
  for (std::size_t i = 0; i < count; ++i) out[i * stride] /= sum;
}

inline void softmax_strided_backward(const double* y, const double* g, double* gx, std::size_t count,
                                     std::size_t stride) {
  double dot = 0.0;
  for (std::size_t i = 0; i < count; ++i) dot += y[i * stride] * g[i * stride];
  for (std::size_t i = 0; i < count; ++i) gx[i * stride] += y[i * stride] * (g[i * stride] - dot);
}

}  // namespace detail

/// Softmax along an axis (0 = down columns, 1 = along rows; vectors use axis 0).
inline Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (xv.rank() > 2 || axis >= xv.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " of " + shape_str(xv.shape()));
  const std::size_t rows = xv.rank() == 1 ? xv.size() : xv.rows();
  const std::size_t cols = xv.rank() == 1 ? 1 : xv.cols();
  const bool along_rows = xv.rank() == 2 && axis == 1;
  auto out = std::make_shared<Tensor>(xv.shape());
  const std::size_t lanes = along_rows ? rows : cols;
  const std::size_t count = along_rows ? cols : rows;
  const std::size_t stride = along_rows ? 1 : cols;
  const std::size_t lane_step = along_rows ? cols : 1;
  for (std::size_t l = 0; l < lanes; ++l)
    detail::softmax_strided(&xv.storage()[l * lane_step], &out->storage()[l * lane_step], count, stride);
  Tensor value = *out;
  return x.tape->record("softmax", std::move(value), {x}, [x, out, lanes, count, stride, lane_step](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t l = 0; l < lanes; ++l)
        detail::softmax_strided_backward(&out->storage()[l * lane_step], &g.storage()[l * lane_step],
                                         &gx->storage()[l * lane_step], count, stride);
  });
}

/// Rows of x selected by index (repeats allowed).
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  const Tensor& xv = x.value();
  detail::require_rank2("gather_rows", xv);
  const std::size_t f = xv.cols();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Tensor out({index.size(), f});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= xv.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(&xv.storage()[index[r] * f], f, &out.storage()[r * f]);
  }
  return x.tape->record("gather_rows", std::move(out), {x}, [x, idx = std::move(index), f](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < f; ++c) (*gx)[idx[r] * f + c] += g[r * f + c];
  });
}

/// For each output row r, the `width` columns of x row rows[r] starting at
/// column offsets[r].
inline Var gather_row_blocks(Var x, std::vector<std::size_t> rows, std::vector<std::size_t> offsets,
                             std::size_t width) {
  const Tensor& xv = x.value();
  detail::require_rank2("gather_row_blocks", xv);
  if (rows.size() != offsets.size() || rows.empty() || width == 0)
    throw DimensionError("gather_row_blocks: bad index");
  const std::size_t f = xv.cols();
  Tensor out({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= xv.rows() || offsets[r] + width > f) throw DimensionError("gather_row_blocks: out of range");
    std::copy_n(&xv.storage()[rows[r] * f + offsets[r]], width, &out.storage()[r * width]);
  }
  return x.tape->record("gather_row_blocks", std::move(out), {x},
                        [x, rs = std::move(rows), os = std::move(offsets), width, f](Tape& t, const Tensor& g) {
                          if (Tensor* gx = t.accumulate(x))
                            for (std::size_t r = 0; r < rs.size(); ++r)
                              for (std::size_t c = 0; c < width; ++c) (*gx)[rs[r] * f + os[r] + c] += g[r * width + c];
                        });
}

/// One entry per row: x[r, column[r]].
inline Var pick(Var x, std::vector<std::size_t> column) {
  const Tensor& xv = x.value();
  detail::require_rank2("pick", xv);
  if (column.size() != xv.rows()) throw DimensionError("pick: one column index per row required");
  const std::size_t f = xv.cols();
  Tensor out({column.size()});
  for (std::size_t r = 0; r < column.size(); ++r) {
    if (column[r] >= f) throw DimensionError("pick: column out of range");
    out[r] = xv[r * f + column[r]];
  }
  return x.tape->record("pick", std::move(out), {x}, [x, cs = std::move(column), f](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t r = 0; r < cs.size(); ++r) (*gx)[r * f + cs[r]] += g[r];
  });
}

/// Repeat a single column `count` times: [n x 1] -> [n x count].
inline Var tile_cols(Var x, std::size_t count) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != 1) throw DimensionError("tile_cols expects [n x 1]");
  const std::size_t n = xv.rows();
  Tensor out({n, count});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = xv[r];
  return x.tape->record("tile_cols", std::move(out), {x}, [x, n, count](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < count; ++c) (*gx)[r] += g[r * count + c];
  });
}

/// Segment boundaries over rows: segment s covers rows [offsets[s], offsets[s+1]).
using Offsets = std::vector<std::size_t>;

/// Per-segment column sums: [rows x f] -> [segments x f]. Empty segments give zero rows.
inline Var segment_sum(Var x, const Offsets& offsets) {
  const Tensor& xv = x.value();
  detail::require_rank2("segment_sum", xv);
  if (offsets.size() < 2 || offsets.back() != xv.rows()) throw DimensionError("segment_sum: offsets do not cover rows");
  const std::size_t segs = offsets.size() - 1, f = xv.cols();
  Tensor out({segs, f});
  for (std::size_t s = 0; s < segs; ++s)
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (std::size_t c = 0; c < f; ++c) out[s * f + c] += xv[r * f + c];
  return x.tape->record("segment_sum", std::move(out), {x}, [x, offsets, f](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
        for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
          for (std::size_t c = 0; c < f; ++c) (*gx)[r * f + c] += g[s * f + c];
  });
}

/// Per-segment, per-column maximum. Ties resolve to the first row. Empty
/// segments give zero rows.
inline Var segment_max(Var x, const Offsets& offsets) {
  const Tensor& xv = x.value();
  detail::require_rank2("segment_max", xv);
  if (offsets.size() < 2 || offsets.back() != xv.rows()) throw DimensionError("segment_max: offsets do not cover rows");
  const std::size_t segs = offsets.size() - 1, f = xv.cols();
  Tensor out({segs, f});
  std::vector<std::size_t> arg(segs * f, static_cast<std::size_t>(-1));
  for (std::size_t s = 0; s < segs; ++s)
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (std::size_t c = 0; c < f; ++c) {
        const double v = xv[r * f + c];
        if (r == offsets[s] || v > out[s * f + c]) {
          out[s * f + c] = v;
          arg[s * f + c] = r;
        }
      }
  return x.tape->record("segment_max", std::move(out), {x}, [x, arg = std::move(arg), f](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t i = 0; i < arg.size(); ++i)
        if (arg[i] != static_cast<std::size_t>(-1)) (*gx)[arg[i] * f + i % f] += g[i];
  });
}

/// Softmax down each column independently within each segment.
inline Var segment_softmax(Var x, const Offsets& offsets) {
  const Tensor& xv = x.value();
  detail::require_rank2("segment_softmax", xv);
  if (offsets.size() < 2 || offsets.back() != xv.rows())
    throw DimensionError("segment_softmax: offsets do not cover rows");
  const std::size_t f = xv.cols();
  auto out = std::make_shared<Tensor>(xv.shape());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t n = offsets[s + 1] - offsets[s];
    if (n == 0) continue;
    for (std::size_t c = 0; c < f; ++c)
      detail::softmax_strided(&xv.storage()[offsets[s] * f + c], &out->storage()[offsets[s] * f + c], n, f);
  }
  Tensor value = *out;
  return x.tape->record("segment_softmax", std::move(value), {x}, [x, out, offsets, f](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.accumulate(x))
      for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const std::size_t n = offsets[s + 1] - offsets[s];
        if (n == 0) continue;
        for (std::size_t c = 0; c < f; ++c)
          detail::softmax_strided_backward(&out->storage()[offsets[s] * f + c], &g.storage()[offsets[s] * f + c],
                                           &gx->storage()[offsets[s] * f + c], n, f);
      }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class Mode { train, eval };

struct BatchNormOptions {
  double epsilon = 1e-5;
  double momentum = 0.99;
};

/// Normalizes each column of x[n x f]. In train mode the batch statistics are
/// used and the running buffers updated as run = m * run + (1 - m) * batch;
/// in eval mode the running buffers are used.
inline Var batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, Mode mode,
                     BatchNormOptions opt = {}) {
  const Tensor& xv = x.value();
  detail::require_rank2("batchnorm", xv);
  const std::size_t n = xv.rows(), f = xv.cols();
  if (gamma.value().size() != f || beta.value().size() != f || running_mean.size() != f || running_var.size() != f)
    throw DimensionError("batchnorm: parameter width does not match " + shape_str(xv.shape()));

  std::vector<double> mu(f), inv_std(f);
  if (mode == Mode::train) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < f; ++c) mu[c] += xv[r * f + c];
    for (auto& m : mu) m /= static_cast<double>(n);
    std::vector<double> var(f);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < f; ++c) {
        const double d = xv[r * f + c] - mu[c];
        var[c] += d * d;
      }
    for (std::size_t c = 0; c < f; ++c) {
      var[c] /= static_cast<double>(n);
      inv_std[c] = 1.0 / std::sqrt(var[c] + opt.epsilon);
      running_mean[c] = opt.momentum * running_mean[c] + (1.0 - opt.momentum) * mu[c];
      running_var[c] = opt.momentum * running_var[c] + (1.0 - opt.momentum) * var[c];
    }
  } else {
    for (std::size_t c = 0; c < f; ++c) {
      mu[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + opt.epsilon);
    }
  }

  auto xhat = std::make_shared<Tensor>(xv.shape());
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < f; ++c) {
      const double h = (xv[r * f + c] - mu[c]) * inv_std[c];
      (*xhat)[r * f + c] = h;
      out[r * f + c] = gv[c] * h + bv[c];
    }

  return x.tape->record("batchnorm", std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std, mode, n, f](Tape& t, const Tensor& g) {
                          const Tensor& gv = gamma.value();
                          if (Tensor* gg = t.accumulate(gamma))
                            for (std::size_t i = 0; i < g.size(); ++i) (*gg)[i % f] += g[i] * (*xhat)[i];
                          if (Tensor* gb = t.accumulate(beta))
                            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % f] += g[i];
                          Tensor* gx = t.accumulate(x);
                          if (!gx) return;
                          if (mode == Mode::eval) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * gv[i % f] * inv_std[i % f];
                            return;
                          }
                          std::vector<double> sum_d(f), sum_dh(f);
                          for (std::size_t r = 0; r < n; ++r)
                            for (std::size_t c = 0; c < f; ++c) {
                              const double d = g[r * f + c] * gv[c];
                              sum_d[c] += d;
                              sum_dh[c] += d * (*xhat)[r * f + c];
                            }
                          const double inv_n = 1.0 / static_cast<double>(n);
                          for (std::size_t r = 0; r < n; ++r)
                            for (std::size_t c = 0; c < f; ++c) {
                              const double d = g[r * f + c] * gv[c];
                              (*gx)[r * f + c] +=
                                  inv_std[c] * (d - inv_n * sum_d[c] - (*xhat)[r * f + c] * inv_n * sum_dh[c]);
                            }
                        });
}

}  // namespace gnn3d
