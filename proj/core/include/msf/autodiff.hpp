#pragma once

// Define-by-run reverse-mode differentiation over dense tensors.
//
// A Tape records every operation of one forward pass. Values are computed
// eagerly; calling Tape::backward on a scalar walks the record in reverse
// and accumulates adjoints into the Parameters that were read on the way.
// A tape is confined to one thread and is discarded after backward.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "msf/sparse.hpp"
#include "msf/tensor.hpp"

namespace msf {

/// Named trainable tensor with a gradient accumulator of the same shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Owns the parameters of a model. Iteration order is insertion order; the
/// checkpoint format relies on it. Addresses are stable for the store's life.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(std::string name, Tensor value);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// The computation record. Nodes are appended in execution order, so the
/// record is topologically sorted by construction.
class Tape {
 public:
  /// Adjoint rule: receives the output gradient and accumulates into the
  /// gradients of the operation's inputs via Tape::grad.
  using AdjointFn = std::function<void(Tape&, const std::vector<double>& gout)>;

  Tape() = default;
  /// With tracking off, parameters enter as constants and no adjoint is kept.
  explicit Tape(bool track_gradients) : tracking_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter& p);

  /// Appends an operation with the given inputs. The output requires a
  /// gradient iff any input does; otherwise the adjoint is never invoked.
  Var record(Tensor value, std::span<const Var> inputs, AdjointFn adjoint);
  Var record(Tensor value, std::initializer_list<Var> inputs, AdjointFn adjoint) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(adjoint));
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient buffer of a node, allocated (zeroed) on first access.
  std::vector<double>& grad(std::uint32_t id);
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Reverse sweep from a scalar. Accumulates into Parameter::grad.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    AdjointFn adjoint;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
  bool tracking_ = true;
};

enum class UnaryOp { tanh, sigmoid, elu, exp, negate };
enum class BinaryOp { add, sub, mul };
enum class ReduceOp { sum, mean };

// Binary elementwise ops accept equal shapes, or a right operand whose last
// extent is 1 and whose other extents match (broadcast along the last axis).
Var elementwise(BinaryOp op, Var a, Var b);
Var elementwise(UnaryOp op, Var x);

inline Var add(Var a, Var b) { return elementwise(BinaryOp::add, a, b); }
inline Var sub(Var a, Var b) { return elementwise(BinaryOp::sub, a, b); }
inline Var mul(Var a, Var b) { return elementwise(BinaryOp::mul, a, b); }
inline Var tanh(Var x) { return elementwise(UnaryOp::tanh, x); }
inline Var sigmoid(Var x) { return elementwise(UnaryOp::sigmoid, x); }
inline Var elu(Var x) { return elementwise(UnaryOp::elu, x); }
inline Var exp(Var x) { return elementwise(UnaryOp::exp, x); }
inline Var negate(Var x) { return elementwise(UnaryOp::negate, x); }

Var scale(Var x, double factor);
/// 1 - x, used by gated recurrences.
Var one_minus(Var x);

Var matmul(Var a, Var b);
/// x [m×n] + bias [n] broadcast over rows.
Var add_bias(Var x, Var bias);

Var reduce(ReduceOp op, Var x, std::size_t axis);
inline Var sum(Var x, std::size_t axis) { return reduce(ReduceOp::sum, x, axis); }
inline Var mean(Var x, std::size_t axis) { return reduce(ReduceOp::mean, x, axis); }
/// Sum of every entry, as a scalar.
Var sum_all(Var x);

/// Row-wise softmax of a matrix, computed with a per-row max shift.
Var softmax_rows(Var x);

/// op(A) · x where op is identity or transpose. `x` may stack B row blocks of
/// the operator's input extent; the operator acts on each block. The matrix
/// must outlive the tape.
Var sparse_dense_matmul(const SparseMatrix& a, Var x, bool transpose);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
/// Stacks `times` copies of x vertically.
Var tile_rows(Var x, std::size_t times);

}  // namespace msf
