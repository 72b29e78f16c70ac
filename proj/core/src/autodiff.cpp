#include "msf/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "msf/errors.hpp"

namespace msf {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

const Tensor& val(Var v) { return v.tape->value(v); }

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw ContractError("operands belong to different computation records");
  }
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got " +
                         shape_string(t.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterStore

ParameterStore::ParameterStore(const ParameterStore& other)
    : params_(other.params_), index_(other.index_) {}

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this != &other) {
    params_ = other.params_;
    index_ = other.index_;
  }
  return *this;
}

Parameter& ParameterStore::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw ContractError("duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  Tensor grad(value.shape());
  params_.push_back(Parameter{std::move(name), std::move(value), std::move(grad)});
  return params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return params_[it->second];
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.storage().begin(), p.grad.storage().end(), 0.0);
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  nodes_.push_back(Node{p.value, {}, {}, tracking_ ? &p : nullptr, tracking_});
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  param_nodes_.emplace(&p, id);
  return Var{this, id};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, AdjointFn adjoint) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw ContractError("operand recorded on a different tape");
    needs = needs || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(adjoint) : AdjointFn{},
                        nullptr, needs});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::vector<double>& Tape::grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("loss recorded on a different tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(nodes_[loss.id].value.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  grad(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    // Adjoints only write into the gradients of earlier nodes, and the node
    // vector never grows during the sweep, so n.grad stays valid.
    if (n.adjoint) n.adjoint(*this, n.grad);
    if (n.param != nullptr) {
      auto& acc = n.param->grad.storage();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += n.grad[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

// Shape relation between a and b for binary ops: equal, or b broadcast along
// a's last axis (b's last extent is 1).
bool broadcast_last(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() == b.shape()) return false;
  bool ok = a.rank() == b.rank() && a.rank() >= 1 && b.shape().back() == 1;
  for (std::size_t i = 0; ok && i + 1 < a.rank(); ++i) ok = a.shape()[i] == b.shape()[i];
  if (!ok) {
    throw DimensionError(std::string(what) + ": incompatible shapes " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  return true;
}

}  // namespace

Var elementwise(BinaryOp op, Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  const bool bc = broadcast_last(x, y, "elementwise");
  const std::size_t inner = bc ? x.shape().back() : 1;
  Tensor out(x.shape());
  auto& o = out.storage();
  const auto& xs = x.storage();
  const auto& ys = y.storage();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double yv = ys[bc ? i / inner : i];
    switch (op) {
      case BinaryOp::add: o[i] = xs[i] + yv; break;
      case BinaryOp::sub: o[i] = xs[i] - yv; break;
      case BinaryOp::mul: o[i] = xs[i] * yv; break;
    }
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, op, bc, inner](Tape& t, const std::vector<double>& g) {
    const auto& xs = t.value(a).storage();
    const auto& ys = t.value(b).storage();
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += op == BinaryOp::mul ? g[i] * ys[bc ? i / inner : i] : g[i];
      }
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = op == BinaryOp::add ? g[i] : op == BinaryOp::sub ? -g[i] : g[i] * xs[i];
        gb[bc ? i / inner : i] += d;
      }
    }
  });
}

Var elementwise(UnaryOp op, Var x) {
  const Tensor& in = val(x);
  Tensor out(in.shape());
  auto& o = out.storage();
  const auto& v = in.storage();
  for (std::size_t i = 0; i < o.size(); ++i) {
    switch (op) {
      case UnaryOp::tanh: o[i] = std::tanh(v[i]); break;
      case UnaryOp::sigmoid:
        o[i] = v[i] >= 0 ? 1.0 / (1.0 + std::exp(-v[i])) : std::exp(v[i]) / (1.0 + std::exp(v[i]));
        break;
      case UnaryOp::elu: o[i] = v[i] > 0 ? v[i] : std::expm1(v[i]); break;
      case UnaryOp::exp: o[i] = std::exp(v[i]); break;
      case UnaryOp::negate: o[i] = -v[i]; break;
    }
  }
  Tape* tape = x.tape;
  const auto id = static_cast<std::uint32_t>(tape->size());
  return tape->record(std::move(out), {x}, [x, op, id](Tape& t, const std::vector<double>& g) {
    const auto& in = t.value(x).storage();
    const auto& y = t.value(Var{&t, id}).storage();
    auto& gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (op) {
        case UnaryOp::tanh: d = 1.0 - y[i] * y[i]; break;
        case UnaryOp::sigmoid: d = y[i] * (1.0 - y[i]); break;
        case UnaryOp::elu: d = in[i] > 0 ? 1.0 : y[i] + 1.0; break;
        case UnaryOp::exp: d = y[i]; break;
        case UnaryOp::negate: d = -1.0; break;
      }
      gx[i] += g[i] * d;
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out = val(x);
  for (double& v : out.storage()) v *= factor;
  return x.tape->record(std::move(out), {x}, [x, factor](Tape& t, const std::vector<double>& g) {
    auto& gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Var one_minus(Var x) {
  Tensor out = val(x);
  for (double& v : out.storage()) v = 1.0 - v;
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const std::vector<double>& g) {
    auto& gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  require_matrix(x, "matmul");
  require_matrix(y, "matmul");
  if (x.cols() != y.rows()) {
    throw DimensionError("matmul inner extents differ: " + shape_string(x.shape()) + " x " +
                         shape_string(y.shape()));
  }
  const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
  Tensor out({m, n});
  if (m > 0 && n > 0) {
    MutMap(out.storage().data(), m, n).noalias() =
        ConstMap(x.storage().data(), m, k) * ConstMap(y.storage().data(), k, n);
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const std::vector<double>& g) {
    if (m == 0 || n == 0 || k == 0) return;
    ConstMap gm(g.data(), m, n);
    if (t.requires_grad(a)) {
      MutMap(t.grad(a.id).data(), m, k).noalias() +=
          gm * ConstMap(t.value(b).storage().data(), k, n).transpose();
    }
    if (t.requires_grad(b)) {
      MutMap(t.grad(b.id).data(), k, n).noalias() +=
          ConstMap(t.value(a).storage().data(), m, k).transpose() * gm;
    }
  });
}

Var add_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& in = val(x);
  const Tensor& b = val(bias);
  require_matrix(in, "add_bias");
  if (b.size() != in.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(b.shape()) + " does not match " +
                         shape_string(in.shape()));
  }
  const std::size_t m = in.rows(), n = in.cols();
  Tensor out = in;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) += b[j];
  }
  return x.tape->record(std::move(out), {x, bias}, [x, bias, m, n](Tape& t, const std::vector<double>& g) {
    if (t.requires_grad(x)) {
      auto& gx = t.grad(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(bias)) {
      auto& gb = t.grad(bias.id);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    }
  });
}

Var sparse_dense_matmul(const SparseMatrix& a, Var x, bool transpose) {
  const Tensor& in = val(x);
  require_matrix(in, "sparse_dense_matmul");
  const std::size_t in_extent = transpose ? a.rows() : a.cols();
  const std::size_t out_extent = transpose ? a.cols() : a.rows();
  if (in_extent == 0 || in.rows() % in_extent != 0 || (in.rows() == 0)) {
    throw DimensionError("sparse_dense_matmul: operator " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + (transpose ? " (transposed)" : "") +
                         " cannot act on " + shape_string(in.shape()));
  }
  const std::size_t blocks = in.rows() / in_extent;
  const std::size_t d = in.cols();
  Tensor out({blocks * out_extent, d});
  a.apply(in.storage(), in.rows(), d, out.storage(), transpose, false);
  const SparseMatrix* op = &a;
  return x.tape->record(std::move(out), {x}, [x, op, transpose, blocks, out_extent, d](
                                                 Tape& t, const std::vector<double>& g) {
    op->apply(g, blocks * out_extent, d, t.grad(x.id), !transpose, true);
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var reduce(ReduceOp op, Var x, std::size_t axis) {
  const Tensor& in = val(x);
  if (axis >= in.rank()) {
    throw DimensionError("reduce: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(in.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in.shape()[i];
  for (std::size_t i = axis + 1; i < in.rank(); ++i) inner *= in.shape()[i];
  const std::size_t n = in.shape()[axis];
  std::vector<std::size_t> shape = in.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(shape);
  const double f = op == ReduceOp::mean ? 1.0 / static_cast<double>(n) : 1.0;
  const auto& v = in.storage();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * n + k) * inner + i];
    }
  }
  if (f != 1.0) {
    for (double& e : out.storage()) e *= f;
  }
  return x.tape->record(std::move(out), {x}, [x, outer, inner, n, f](Tape& t, const std::vector<double>& g) {
    auto& gx = t.grad(x.id);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < inner; ++i) gx[(o * n + k) * inner + i] += f * g[o * inner + i];
      }
    }
  });
}

Var sum_all(Var x) {
  double s = 0.0;
  for (double v : val(x).storage()) s += v;
  return x.tape->record(Tensor::scalar(s), {x}, [x](Tape& t, const std::vector<double>& g) {
    for (double& e : t.grad(x.id)) e += g[0];
  });
}

Var softmax_rows(Var x) {
  const Tensor& in = val(x);
  require_matrix(in, "softmax_rows");
  const std::size_t m = in.rows(), n = in.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out(i, j) = std::exp(in(i, j) - mx);
      s += out(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= s;
  }
  const auto id = static_cast<std::uint32_t>(x.tape->size());
  return x.tape->record(std::move(out), {x}, [x, id, m, n](Tape& t, const std::vector<double>& g) {
    const auto& y = t.value(Var{&t, id}).storage();
    auto& gx = t.grad(x.id);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const std::size_t m = val(parts[0]).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    const Tensor& v = val(p);
    require_matrix(v, "concat_cols");
    if (v.rows() != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = val(parts[k]);
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(v.storage().data() + i * widths[k], widths[k], out.storage().data() + i * total + off);
    }
    off += widths[k];
  }
  return parts[0].tape->record(
      std::move(out), parts, [parts, widths, m, total](Tape& t, const std::vector<double>& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (t.requires_grad(parts[k])) {
            auto& gp = t.grad(parts[k].id);
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + off + j];
            }
          }
          off += widths[k];
        }
      });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const std::size_t n = val(parts[0]).cols();
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    const Tensor& v = val(p);
    require_matrix(v, "concat_rows");
    if (v.cols() != n) throw DimensionError("concat_rows: column counts differ");
    sizes.push_back(v.size());
    rows += v.rows();
  }
  std::vector<double> data;
  data.reserve(rows * n);
  for (const Var& p : parts) {
    const auto& s = val(p).storage();
    data.insert(data.end(), s.begin(), s.end());
  }
  return parts[0].tape->record(Tensor({rows, n}, std::move(data)), parts,
                               [parts, sizes](Tape& t, const std::vector<double>& g) {
                                 std::size_t off = 0;
                                 for (std::size_t k = 0; k < parts.size(); ++k) {
                                   if (t.requires_grad(parts[k])) {
                                     auto& gp = t.grad(parts[k].id);
                                     for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += g[off + i];
                                   }
                                   off += sizes[k];
                                 }
                               });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& in = val(x);
  require_matrix(in, "slice_rows");
  if (begin + count > in.rows()) throw DimensionError("slice_rows out of range");
  const std::size_t n = in.cols();
  std::vector<double> data(in.storage().begin() + static_cast<std::ptrdiff_t>(begin * n),
                           in.storage().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  return x.tape->record(Tensor({count, n}, std::move(data)), {x},
                        [x, begin, n](Tape& t, const std::vector<double>& g) {
                          auto& gx = t.grad(x.id);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
                        });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& in = val(x);
  require_matrix(in, "slice_cols");
  if (begin + count > in.cols()) throw DimensionError("slice_cols out of range");
  const std::size_t m = in.rows(), n = in.cols();
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(in.storage().data() + i * n + begin, count, out.storage().data() + i * count);
  }
  return x.tape->record(std::move(out), {x}, [x, begin, count, m, n](Tape& t, const std::vector<double>& g) {
    auto& gx = t.grad(x.id);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += g[i * count + j];
    }
  });
}

Var tile_rows(Var x, std::size_t times) {
  const Tensor& in = val(x);
  require_matrix(in, "tile_rows");
  std::vector<double> data;
  data.reserve(in.size() * times);
  for (std::size_t k = 0; k < times; ++k) data.insert(data.end(), in.storage().begin(), in.storage().end());
  const std::size_t sz = in.size();
  return x.tape->record(Tensor({in.rows() * times, in.cols()}, std::move(data)), {x},
                        [x, times, sz](Tape& t, const std::vector<double>& g) {
                          auto& gx = t.grad(x.id);
                          for (std::size_t k = 0; k < times; ++k) {
                            for (std::size_t i = 0; i < sz; ++i) gx[i] += g[k * sz + i];
                          }
                        });
}

}  // namespace msf
