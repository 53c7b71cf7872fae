#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rescore/random.hpp"
#include "rescore/stats.hpp"
#include "rescore/tensor.hpp"

namespace rescore::ad {

// Reverse-mode autodiff over dense tensors. Forward values are computed
// eagerly; every operation records a node on the tape and backward() walks
// the nodes in reverse creation order, which is a valid reverse topological
// order because operations can only reference existing nodes.

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kAddScalar,
  kMulScalar,
  kMatmul,
  kTranspose,
  kAddRow,
  kSoftmaxRows,
  kLogSoftmaxRows,
  kLayerNorm,
  kGelu,
  kGatherRows,
  kPick,
  kSliceRows,
  kSliceCols,
  kConcat,
  kConcatCols,
  kReduceSum,
  kReduceMean,
  kSquaredError,
  kReshape,
};

class Tape;

/// Handle to a node on a Tape; cheap to copy.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  long long size() const { return value().size(); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

namespace detail {
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}
constexpr double kLayerNormEps = 1e-5;

inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}
inline double gelu_slope(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}
}  // namespace detail

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- node construction -------------------------------------------------

  Var leaf(Tensor value, bool requires_grad = false) {
    return push(Op::kLeaf, {}, std::move(value), requires_grad);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(double v) { return leaf(Tensor::scalar(v), false); }

  Var add(Var a, Var b) {
    same_shape("add", a, b);
    Tensor out = val(a);
    const Tensor& vb = val(b);
    for (long long i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(Op::kAdd, {a, b}, std::move(out));
  }

  Var sub(Var a, Var b) {
    same_shape("sub", a, b);
    Tensor out = val(a);
    const Tensor& vb = val(b);
    for (long long i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(Op::kSub, {a, b}, std::move(out));
  }

  Var mul(Var a, Var b) {
    same_shape("mul", a, b);
    Tensor out = val(a);
    const Tensor& vb = val(b);
    for (long long i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return push(Op::kMul, {a, b}, std::move(out));
  }

  Var neg(Var a) {
    Tensor out = val(a);
    for (long long i = 0; i < out.size(); ++i) out[i] = -out[i];
    return push(Op::kNeg, {a}, std::move(out));
  }

  Var add_scalar(Var a, double c) {
    Tensor out = val(a);
    for (long long i = 0; i < out.size(); ++i) out[i] += c;
    Var v = push(Op::kAddScalar, {a}, std::move(out));
    node(v).c = c;
    return v;
  }

  Var mul_scalar(Var a, double c) {
    Tensor out = val(a);
    for (long long i = 0; i < out.size(); ++i) out[i] *= c;
    Var v = push(Op::kMulScalar, {a}, std::move(out));
    node(v).c = c;
    return v;
  }

  /// 2-D matrix product.
  Var matmul(Var a, Var b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    detail::require(va.ndim() == 2 && vb.ndim() == 2,
                    "matmul: expected rank-2 operands, got " +
                        shape_str(va.shape()) + " and " + shape_str(vb.shape()));
    detail::require(va.cols() == vb.rows(),
                    "matmul: inner dimensions differ: " + shape_str(va.shape()) +
                        " vs " + shape_str(vb.shape()));
    Tensor out({va.rows(), vb.cols()});
    EMap(out.data(), out.rows(), out.cols()).noalias() =
        ECMap(va.data(), va.rows(), va.cols()) *
        ECMap(vb.data(), vb.rows(), vb.cols());
    return push(Op::kMatmul, {a, b}, std::move(out));
  }

  Var transpose(Var a) {
    const Tensor& va = val(a);
    detail::require(va.ndim() == 2, "transpose: expected rank-2, got " +
                                        shape_str(va.shape()));
    Tensor out({va.cols(), va.rows()});
    EMap(out.data(), out.rows(), out.cols()) =
        ECMap(va.data(), va.rows(), va.cols()).transpose();
    return push(Op::kTranspose, {a}, std::move(out));
  }

  /// Broadcast add: every row of m gets row added to it.
  Var add_row(Var m, Var row) {
    const Tensor& vm = val(m);
    const Tensor& vr = val(row);
    detail::require(vr.ndim() == 1 && vm.cols() == vr.cols(),
                    "add_row: row " + shape_str(vr.shape()) +
                        " does not broadcast over " + shape_str(vm.shape()));
    Tensor out = vm;
    for (int r = 0; r < vm.rows(); ++r)
      for (int c = 0; c < vm.cols(); ++c) out[idx2(out, r, c)] += vr[c];
    return push(Op::kAddRow, {m, row}, std::move(out));
  }

  Var softmax_rows(Var a) {
    Tensor out = rowwise_softmax(val(a), /*log=*/false);
    return push(Op::kSoftmaxRows, {a}, std::move(out));
  }

  Var log_softmax_rows(Var a) {
    Tensor out = rowwise_softmax(val(a), /*log=*/true);
    return push(Op::kLogSoftmaxRows, {a}, std::move(out));
  }

  /// Per-row layer normalization with learnable gain/bias.
  Var layer_norm(Var x, Var gain, Var bias) {
    const Tensor& vx = val(x);
    const Tensor& vg = val(gain);
    const Tensor& vb = val(bias);
    const int c = vx.cols();
    detail::require(vg.ndim() == 1 && vb.ndim() == 1 && vg.cols() == c &&
                        vb.cols() == c,
                    "layer_norm: gain/bias " + shape_str(vg.shape()) + "/" +
                        shape_str(vb.shape()) + " do not match " +
                        shape_str(vx.shape()));
    Tensor out = vx;
    for (int r = 0; r < vx.rows(); ++r) {
      double mean = 0.0, var = 0.0;
      for (int j = 0; j < c; ++j) mean += vx[idx2(vx, r, j)];
      mean /= c;
      for (int j = 0; j < c; ++j) {
        double d = vx[idx2(vx, r, j)] - mean;
        var += d * d;
      }
      var /= c;
      const double inv = 1.0 / std::sqrt(var + detail::kLayerNormEps);
      for (int j = 0; j < c; ++j) {
        double xhat = (vx[idx2(vx, r, j)] - mean) * inv;
        out[idx2(out, r, j)] = xhat * vg[j] + vb[j];
      }
    }
    return push(Op::kLayerNorm, {x, gain, bias}, std::move(out));
  }

  Var gelu(Var a) {
    Tensor out = val(a);
    for (long long i = 0; i < out.size(); ++i)
      out[i] = detail::gelu_value(out[i]);
    return push(Op::kGelu, {a}, std::move(out));
  }

  /// Row gather from a rank-2 source; also serves as embedding lookup.
  Var gather_rows(Var src, std::vector<int> rows) {
    const Tensor& vs = val(src);
    detail::require(vs.ndim() == 2, "gather_rows: expected rank-2 source, got " +
                                        shape_str(vs.shape()));
    for (int r : rows)
      detail::require(r >= 0 && r < vs.rows(),
                      "gather_rows: row " + std::to_string(r) +
                          " out of range for " + shape_str(vs.shape()));
    Tensor out({static_cast<int>(rows.size()), vs.cols()});
    for (size_t i = 0; i < rows.size(); ++i)
      std::copy_n(vs.data() + static_cast<long long>(rows[i]) * vs.cols(),
                  vs.cols(), out.data() + static_cast<long long>(i) * vs.cols());
    Var v = push(Op::kGatherRows, {src}, std::move(out));
    node(v).idx = std::move(rows);
    return v;
  }

  Var embedding(Var table, const std::vector<int>& ids) {
    return gather_rows(table, ids);
  }

  /// out[i] = m[i, cols[i]]; rank-1 result.
  Var pick(Var m, std::vector<int> cols) {
    const Tensor& vm = val(m);
    detail::require(vm.ndim() == 2, "pick: expected rank-2, got " +
                                        shape_str(vm.shape()));
    detail::require(static_cast<int>(cols.size()) == vm.rows(),
                    "pick: need one column per row of " + shape_str(vm.shape()));
    Tensor out({vm.rows()});
    for (int i = 0; i < vm.rows(); ++i) {
      detail::require(cols[i] >= 0 && cols[i] < vm.cols(),
                      "pick: column " + std::to_string(cols[i]) +
                          " out of range for " + shape_str(vm.shape()));
      out[i] = vm.at(i, cols[i]);
    }
    Var v = push(Op::kPick, {m}, std::move(out));
    node(v).idx = std::move(cols);
    return v;
  }

  Var slice_rows(Var a, int begin, int count) {
    const Tensor& va = val(a);
    detail::require(va.ndim() == 2, "slice_rows: expected rank-2, got " +
                                        shape_str(va.shape()));
    detail::require(begin >= 0 && count >= 0 && begin + count <= va.rows(),
                    "slice_rows: range [" + std::to_string(begin) + ", " +
                        std::to_string(begin + count) + ") out of bounds for " +
                        shape_str(va.shape()));
    Tensor out({count, va.cols()});
    std::copy_n(va.data() + static_cast<long long>(begin) * va.cols(),
                static_cast<long long>(count) * va.cols(), out.data());
    Var v = push(Op::kSliceRows, {a}, std::move(out));
    node(v).idx = {begin, count};
    return v;
  }

  Var slice_cols(Var a, int begin, int count) {
    const Tensor& va = val(a);
    detail::require(va.ndim() == 2, "slice_cols: expected rank-2, got " +
                                        shape_str(va.shape()));
    detail::require(begin >= 0 && count >= 0 && begin + count <= va.cols(),
                    "slice_cols: range [" + std::to_string(begin) + ", " +
                        std::to_string(begin + count) + ") out of bounds for " +
                        shape_str(va.shape()));
    Tensor out({va.rows(), count});
    for (int r = 0; r < va.rows(); ++r)
      std::copy_n(va.data() + static_cast<long long>(r) * va.cols() + begin,
                  count, out.data() + static_cast<long long>(r) * count);
    Var v = push(Op::kSliceCols, {a}, std::move(out));
    node(v).idx = {begin, count};
    return v;
  }

  /// Concatenation along axis 0. Rank-1 parts concatenate flat (stacking
  /// scalars builds a score vector); rank-2 parts stack rows.
  Var concat(const std::vector<Var>& parts) {
    detail::require(!parts.empty(), "concat: no parts");
    const int nd = val(parts[0]).ndim();
    detail::require(nd == 1 || nd == 2, "concat: expected rank-1 or rank-2");
    long long total = 0;
    for (Var p : parts) {
      detail::require(val(p).ndim() == nd, "concat: mixed ranks");
      if (nd == 2)
        detail::require(val(p).cols() == val(parts[0]).cols(),
                        "concat: column mismatch: " +
                            shape_str(val(p).shape()) + " vs " +
                            shape_str(val(parts[0]).shape()));
      total += (nd == 1) ? val(p).size() : val(p).rows();
    }
    Tensor out(nd == 1 ? Shape{static_cast<int>(total)}
                       : Shape{static_cast<int>(total), val(parts[0]).cols()});
    double* dst = out.data();
    for (Var p : parts) {
      std::copy_n(val(p).data(), val(p).size(), dst);
      dst += val(p).size();
    }
    return push(Op::kConcat, parts, std::move(out));
  }

  Var concat_cols(const std::vector<Var>& parts) {
    detail::require(!parts.empty(), "concat_cols: no parts");
    const int rows = val(parts[0]).rows();
    int total_cols = 0;
    for (Var p : parts) {
      detail::require(val(p).ndim() == 2 && val(p).rows() == rows,
                      "concat_cols: row mismatch: " +
                          shape_str(val(p).shape()) + " vs " +
                          shape_str(val(parts[0]).shape()));
      total_cols += val(p).cols();
    }
    Tensor out({rows, total_cols});
    int at = 0;
    for (Var p : parts) {
      const Tensor& vp = val(p);
      for (int r = 0; r < rows; ++r)
        std::copy_n(vp.data() + static_cast<long long>(r) * vp.cols(),
                    vp.cols(),
                    out.data() + static_cast<long long>(r) * total_cols + at);
      at += vp.cols();
    }
    return push(Op::kConcatCols, parts, std::move(out));
  }

  Var reduce_sum(Var a) {
    double s = 0.0;
    for (long long i = 0; i < val(a).size(); ++i) s += val(a)[i];
    return push(Op::kReduceSum, {a}, Tensor::scalar(s));
  }

  Var reduce_mean(Var a) {
    detail::require(val(a).size() > 0, "reduce_mean: empty tensor");
    double s = 0.0;
    for (long long i = 0; i < val(a).size(); ++i) s += val(a)[i];
    return push(Op::kReduceMean, {a},
                Tensor::scalar(s / static_cast<double>(val(a).size())));
  }

  /// Sum of elementwise squared differences; scalar result.
  Var squared_error(Var a, Var b) {
    same_shape("squared_error", a, b);
    double s = 0.0;
    for (long long i = 0; i < val(a).size(); ++i) {
      double d = val(a)[i] - val(b)[i];
      s += d * d;
    }
    return push(Op::kSquaredError, {a, b}, Tensor::scalar(s));
  }

  Var reshape(Var a, Shape shape) {
    detail::require(shape_numel(shape) == val(a).size(),
                    "reshape: cannot view " + shape_str(val(a).shape()) +
                        " as " + shape_str(shape));
    Tensor out(std::move(shape), val(a).vec());
    return push(Op::kReshape, {a}, std::move(out));
  }

  // ---- gradients ---------------------------------------------------------

  /// Backprop from a scalar loss. Leaf gradients accumulate across calls;
  /// zero_grad() resets them.
  void backward(Var loss) {
    detail::require(loss.tape() == this, "backward: var from another tape");
    detail::require(val(loss).size() == 1,
                    "backward: loss must be scalar, got " +
                        shape_str(val(loss).shape()));
    stats::backward_calls().fetch_add(1, std::memory_order_relaxed);
    for (auto& n : nodes_)
      if (n.op != Op::kLeaf && n.requires_grad) n.grad.zero();
    if (!nodes_[loss.id()].requires_grad) return;  // nothing reachable
    nodes_[loss.id()].grad[0] += 1.0;
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.op == Op::kLeaf) continue;
      step_backward(n);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad.zero();
  }

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  const Tensor& grad(Var v) const {
    detail::require(nodes_[v.id()].requires_grad,
                    "grad: node does not track gradients");
    return nodes_[v.id()].grad;
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> parents;
    Tensor value;
    Tensor grad;  // allocated only when requires_grad
    bool requires_grad = false;
    double c = 0.0;
    std::vector<int> idx;
  };

  std::vector<Node> nodes_;

  static long long idx2(const Tensor& t, int r, int c) {
    return static_cast<long long>(r) * t.cols() + c;
  }

  const Tensor& val(Var v) const { return nodes_[v.id()].value; }
  Node& node(Var v) { return nodes_[v.id()]; }

  void same_shape(const char* op, Var a, Var b) const {
    detail::require(val(a).same_shape(val(b)),
                    std::string(op) + ": shape mismatch: " +
                        shape_str(val(a).shape()) + " vs " +
                        shape_str(val(b).shape()));
  }

  Var push(Op op, const std::vector<Var>& parents, Tensor value,
           bool leaf_requires_grad = false) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = leaf_requires_grad;
    for (Var p : parents) {
      detail::require(p.tape() == this, "op: var from another tape");
      n.parents.push_back(p.id());
      n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
    }
    if (n.requires_grad) n.grad = Tensor(n.value.shape());
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  static Tensor rowwise_softmax(const Tensor& x, bool log) {
    detail::require(x.ndim() == 1 || x.ndim() == 2,
                    "softmax: expected rank-1 or rank-2, got " +
                        shape_str(x.shape()));
    Tensor out = x;
    const int rows = x.rows(), cols = x.cols();
    detail::require(cols > 0, "softmax: empty rows");
    for (int r = 0; r < rows; ++r) {
      const double* in = x.data() + static_cast<long long>(r) * cols;
      double* o = out.data() + static_cast<long long>(r) * cols;
      double mx = in[0];
      for (int j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
      double sum = 0.0;
      for (int j = 0; j < cols; ++j) sum += std::exp(in[j] - mx);
      if (log) {
        const double lse = mx + std::log(sum);
        for (int j = 0; j < cols; ++j) o[j] = in[j] - lse;
      } else {
        for (int j = 0; j < cols; ++j) o[j] = std::exp(in[j] - mx) / sum;
      }
    }
    return out;
  }

  Tensor* pgrad(int id) {
    return nodes_[id].requires_grad ? &nodes_[id].grad : nullptr;
  }

  void step_backward(Node& n) {
    const Tensor& g = n.grad;
    const Tensor& y = n.value;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        if (Tensor* da = pgrad(n.parents[0]))
          for (long long i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        if (Tensor* db = pgrad(n.parents[1]))
          for (long long i = 0; i < g.size(); ++i) (*db)[i] += g[i];
        break;
      }
      case Op::kSub: {
        if (Tensor* da = pgrad(n.parents[0]))
          for (long long i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        if (Tensor* db = pgrad(n.parents[1]))
          for (long long i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
        break;
      }
      case Op::kMul: {
        const Tensor& va = nodes_[n.parents[0]].value;
        const Tensor& vb = nodes_[n.parents[1]].value;
        if (Tensor* da = pgrad(n.parents[0]))
          for (long long i = 0; i < g.size(); ++i) (*da)[i] += g[i] * vb[i];
        if (Tensor* db = pgrad(n.parents[1]))
          for (long long i = 0; i < g.size(); ++i) (*db)[i] += g[i] * va[i];
        break;
      }
      case Op::kNeg: {
        if (Tensor* da = pgrad(n.parents[0]))
          for (long long i = 0; i < g.size(); ++i) (*da)[i] -= g[i];
        break;
      }
      case Op::kAddScalar: {
        if (Tensor* da = pgrad(n.parents[0]))
          for (long long i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        break;
      }
      case Op::kMulScalar: {
        if (Tensor* da = pgrad(n.parents[0]))
          for (long long i = 0; i < g.size(); ++i) (*da)[i] += n.c * g[i];
        break;
      }
      case Op::kMatmul: {
        const Tensor& va = nodes_[n.parents[0]].value;
        const Tensor& vb = nodes_[n.parents[1]].value;
        ECMap mg(g.data(), g.rows(), g.cols());
        if (Tensor* da = pgrad(n.parents[0]))
          EMap(da->data(), da->rows(), da->cols()).noalias() +=
              mg * ECMap(vb.data(), vb.rows(), vb.cols()).transpose();
        if (Tensor* db = pgrad(n.parents[1]))
          EMap(db->data(), db->rows(), db->cols()).noalias() +=
              ECMap(va.data(), va.rows(), va.cols()).transpose() * mg;
        break;
      }
      case Op::kTranspose: {
        if (Tensor* da = pgrad(n.parents[0]))
          EMap(da->data(), da->rows(), da->cols()).noalias() +=
              ECMap(g.data(), g.rows(), g.cols()).transpose();
        break;
      }
      case Op::kAddRow: {
        if (Tensor* dm = pgrad(n.parents[0]))
          for (long long i = 0; i < g.size(); ++i) (*dm)[i] += g[i];
        if (Tensor* dr = pgrad(n.parents[1]))
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) (*dr)[c] += g[idx2(g, r, c)];
        break;
      }
      case Op::kSoftmaxRows: {
        Tensor* da = pgrad(n.parents[0]);
        if (!da) break;
        const int rows = y.rows(), cols = y.cols();
        for (int r = 0; r < rows; ++r) {
          const double* yr = y.data() + static_cast<long long>(r) * cols;
          const double* gr = g.data() + static_cast<long long>(r) * cols;
          double* dr = da->data() + static_cast<long long>(r) * cols;
          double dot = 0.0;
          for (int j = 0; j < cols; ++j) dot += yr[j] * gr[j];
          for (int j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
        break;
      }
      case Op::kLogSoftmaxRows: {
        Tensor* da = pgrad(n.parents[0]);
        if (!da) break;
        const int rows = y.rows(), cols = y.cols();
        for (int r = 0; r < rows; ++r) {
          const double* yr = y.data() + static_cast<long long>(r) * cols;
          const double* gr = g.data() + static_cast<long long>(r) * cols;
          double* dr = da->data() + static_cast<long long>(r) * cols;
          double gsum = 0.0;
          for (int j = 0; j < cols; ++j) gsum += gr[j];
          for (int j = 0; j < cols; ++j) dr[j] += gr[j] - std::exp(yr[j]) * gsum;
        }
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& vx = nodes_[n.parents[0]].value;
        const Tensor& vg = nodes_[n.parents[1]].value;
        Tensor* dx = pgrad(n.parents[0]);
        Tensor* dgain = pgrad(n.parents[1]);
        Tensor* dbias = pgrad(n.parents[2]);
        const int rows = vx.rows(), cols = vx.cols();
        for (int r = 0; r < rows; ++r) {
          const double* xr = vx.data() + static_cast<long long>(r) * cols;
          const double* gr = g.data() + static_cast<long long>(r) * cols;
          double mean = 0.0, var = 0.0;
          for (int j = 0; j < cols; ++j) mean += xr[j];
          mean /= cols;
          for (int j = 0; j < cols; ++j) {
            double d = xr[j] - mean;
            var += d * d;
          }
          var /= cols;
          const double inv = 1.0 / std::sqrt(var + detail::kLayerNormEps);
          double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
          for (int j = 0; j < cols; ++j) {
            double xhat = (xr[j] - mean) * inv;
            double dxhat = gr[j] * vg[j];
            m1 += dxhat;
            m2 += dxhat * xhat;
          }
          m1 /= cols;
          m2 /= cols;
          for (int j = 0; j < cols; ++j) {
            double xhat = (xr[j] - mean) * inv;
            if (dx)
              (*dx)[idx2(vx, r, j)] += (gr[j] * vg[j] - m1 - xhat * m2) * inv;
            if (dgain) (*dgain)[j] += gr[j] * xhat;
            if (dbias) (*dbias)[j] += gr[j];
          }
        }
        break;
      }
      case Op::kGelu: {
        Tensor* da = pgrad(n.parents[0]);
        if (!da) break;
        const Tensor& vx = nodes_[n.parents[0]].value;
        for (long long i = 0; i < g.size(); ++i)
          (*da)[i] += g[i] * detail::gelu_slope(vx[i]);
        break;
      }
      case Op::kGatherRows: {
        Tensor* da = pgrad(n.parents[0]);
        if (!da) break;
        const int cols = y.cols();
        for (size_t i = 0; i < n.idx.size(); ++i) {
          double* dst = da->data() + static_cast<long long>(n.idx[i]) * cols;
          const double* src = g.data() + static_cast<long long>(i) * cols;
          for (int j = 0; j < cols; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::kPick: {
        Tensor* da = pgrad(n.parents[0]);
        if (!da) break;
        for (size_t i = 0; i < n.idx.size(); ++i)
          da->at(static_cast<int>(i), n.idx[i]) += g[static_cast<long long>(i)];
        break;
      }
      case Op::kSliceRows: {
        Tensor* da = pgrad(n.parents[0]);
        if (!da) break;
        const long long off = static_cast<long long>(n.idx[0]) * da->cols();
        for (long long i = 0; i < g.size(); ++i) (*da)[off + i] += g[i];
        break;
      }
      case Op::kSliceCols: {
        Tensor* da = pgrad(n.parents[0]);
        if (!da) break;
        const int begin = n.idx[0], count = n.idx[1];
        for (int r = 0; r < g.rows(); ++r)
          for (int c = 0; c < count; ++c)
            (*da)[static_cast<long long>(r) * da->cols() + begin + c] +=
                g[static_cast<long long>(r) * count + c];
        break;
      }
      case Op::kConcat: {
        long long off = 0;
        for (int pid : n.parents) {
          const Tensor& vp = nodes_[pid].value;
          if (Tensor* dp = pgrad(pid))
            for (long long i = 0; i < vp.size(); ++i) (*dp)[i] += g[off + i];
          off += vp.size();
        }
        break;
      }
      case Op::kConcatCols: {
        int at = 0;
        for (int pid : n.parents) {
          const Tensor& vp = nodes_[pid].value;
          if (Tensor* dp = pgrad(pid))
            for (int r = 0; r < vp.rows(); ++r)
              for (int c = 0; c < vp.cols(); ++c)
                (*dp)[static_cast<long long>(r) * vp.cols() + c] +=
                    g[static_cast<long long>(r) * y.cols() + at + c];
          at += vp.cols();
        }
        break;
      }
      case Op::kReduceSum: {
        if (Tensor* da = pgrad(n.parents[0]))
          for (long long i = 0; i < da->size(); ++i) (*da)[i] += g[0];
        break;
      }
      case Op::kReduceMean: {
        if (Tensor* da = pgrad(n.parents[0])) {
          const double s = g[0] / static_cast<double>(da->size());
          for (long long i = 0; i < da->size(); ++i) (*da)[i] += s;
        }
        break;
      }
      case Op::kSquaredError: {
        const Tensor& va = nodes_[n.parents[0]].value;
        const Tensor& vb = nodes_[n.parents[1]].value;
        Tensor* da = pgrad(n.parents[0]);
        Tensor* db = pgrad(n.parents[1]);
        for (long long i = 0; i < va.size(); ++i) {
          const double d = 2.0 * (va[i] - vb[i]) * g[0];
          if (da) (*da)[i] += d;
          if (db) (*db)[i] -= d;
        }
        break;
      }
      case Op::kReshape: {
        if (Tensor* da = pgrad(n.parents[0]))
          for (long long i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        break;
      }
    }
  }
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline const Tensor& Var::grad() const { return tape_->grad(*this); }

inline double scalar_value(Var v) {
  detail::require(v.size() == 1, "scalar_value: tensor of shape " +
                                     shape_str(v.shape()) + " is not scalar");
  return v.value()[0];
}

// ---- gradient checking ----------------------------------------------------

struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;
  int param_index = -1;       // parameter tensor of the worst entry
  long long entry_index = -1; // flat element index of the worst entry
  std::string message;
};

/// Compares analytic gradients of a scalar-valued function against central
/// finite differences. `f` must be deterministic. When `max_entries_per_param`
/// is positive, only that many randomly chosen entries of each parameter are
/// perturbed (full sweeps through a transformer are quadratic-cost).
inline GradCheckResult grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& f,
    const std::vector<Tensor*>& params, double h,
    int max_entries_per_param = -1, std::uint64_t sample_seed = 0) {
  detail::require(h > 0.0, "grad_check: h must be positive");
  GradCheckResult res;

  auto eval = [&](double* out) -> bool {
    Tape t;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (Tensor* p : params) leaves.push_back(t.leaf(*p, false));
    Var loss = f(t, leaves);
    detail::require(loss.size() == 1, "grad_check: f must return a scalar");
    *out = scalar_value(loss);
    return std::isfinite(*out);
  };

  // Analytic pass.
  std::vector<Tensor> analytic;
  {
    Tape t;
    std::vector<Var> leaves;
    for (Tensor* p : params) leaves.push_back(t.leaf(*p, true));
    Var loss = f(t, leaves);
    detail::require(loss.size() == 1, "grad_check: f must return a scalar");
    if (!std::isfinite(scalar_value(loss))) {
      res.ok = false;
      res.message = "non-finite loss at base point";
      return res;
    }
    t.backward(loss);
    for (Var l : leaves) analytic.push_back(l.grad());
  }

  Rng rng(sample_seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    std::vector<long long> entries;
    if (max_entries_per_param > 0 &&
        p.size() > static_cast<long long>(max_entries_per_param)) {
      for (int k = 0; k < max_entries_per_param; ++k)
        entries.push_back(static_cast<long long>(
            rng.below(static_cast<std::uint64_t>(p.size()))));
    } else {
      entries.resize(p.size());
      std::iota(entries.begin(), entries.end(), 0ll);
    }
    for (long long e : entries) {
      const double orig = p[e];
      double up = 0.0, dn = 0.0;
      p[e] = orig + h;
      bool ok_up = eval(&up);
      p[e] = orig - h;
      bool ok_dn = eval(&dn);
      p[e] = orig;
      if (!ok_up || !ok_dn) {
        res.ok = false;
        res.param_index = static_cast<int>(pi);
        res.entry_index = e;
        res.message = "non-finite loss while perturbing parameter " +
                      std::to_string(pi) + " entry " + std::to_string(e);
        return res;
      }
      const double numeric = (up - dn) / (2.0 * h);
      const double a = analytic[pi][e];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.param_index = static_cast<int>(pi);
        res.entry_index = e;
      }
    }
  }
  return res;
}

}  // namespace rescore::ad
