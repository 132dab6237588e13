#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "ialgca/tensor.hpp"

namespace ialgca {

// Primitive set: exactly what the attention blocks, losses and the tiny
// backbone/transformer need, each with an analytic adjoint.
enum class Op {
  Leaf,
  Matmul,
  Add,
  Sub,
  Mul,
  ScaleChannels,       // X[T,C,H,W] * S[T,C]
  MulBcastLast,        // A[...,D]  * b[D]
  AddBcastLast,        // A[...,D]  + b[D]
  AddChannelBias,      // X[N,C,H,W] + b[C]
  Relu,
  Sigmoid,
  Sqrt,
  Exp,
  Log,
  SoftmaxLast,
  MeanAxis,
  WeightedSpatialSum,  // X[T,C,H,W], W[C,H,W] -> [T,C]
  Conv2d,
  LayerNormLast,
  ScalarMul,
  ConcatAxis,
  Reshape,
  MaxLast,
  GatherLast,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Matmul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::ScaleChannels: return "scale_channels";
    case Op::MulBcastLast: return "mul_bcast_last";
    case Op::AddBcastLast: return "add_bcast_last";
    case Op::AddChannelBias: return "add_channel_bias";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Sqrt: return "sqrt";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::SoftmaxLast: return "softmax_last";
    case Op::MeanAxis: return "mean_axis";
    case Op::WeightedSpatialSum: return "weighted_spatial_sum";
    case Op::Conv2d: return "conv2d";
    case Op::LayerNormLast: return "layer_norm_last";
    case Op::ScalarMul: return "scalar_mul";
    case Op::ConcatAxis: return "concat_axis";
    case Op::Reshape: return "reshape";
    case Op::MaxLast: return "max_last";
    case Op::GatherLast: return "gather_last";
  }
  return "?";
}

struct Attrs {
  int axis = -1;
  int stride = 1;
  int pad = 0;
  double scalar = 0.0;
  double eps = 1e-5;
  bool trans_a = false;
  bool trans_b = false;
  std::vector<int> shape;    // Reshape target
  std::vector<int> indices;  // GatherLast row indices
};

// Append-only computation record. Single-owner; one forward pass per tape.
template <class S>
class Tape {
 public:
  struct Node {
    Op op;
    std::vector<int> in;
    Attrs attrs;
    Tensor<S> val;
    std::vector<int> aux;  // MaxLast argmax per row
    typename Tensor<S>::Storage saved;  // LayerNormLast inv-std per row
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor<S>& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  int leaf(Tensor<S> t) {
    if (!t.all_finite()) throw NumericError("leaf holds non-finite values");
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(t);
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  // apply_primitive: runs the forward rule, records the node, checks the
  // output stays finite.
  int apply(Op op, std::vector<int> in, Attrs attrs = {}) {
    Node n;
    n.op = op;
    n.in = std::move(in);
    n.attrs = std::move(attrs);
    forward(n);
    if (!n.val.all_finite())
      throw NumericError(cat(op_name(op), " produced non-finite values"));
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  // Reverse sweep from a scalar loss. Returns one gradient slot per node;
  // untouched non-leaf slots stay empty, leaves always get a gradient
  // (zeros when unreachable).
  std::vector<Tensor<S>> backward(int loss) const {
    const Node& ln = nodes_[static_cast<size_t>(loss)];
    if (ln.val.numel() != 1)
      throw ContractError(
          cat("backward: loss must be scalar, got shape ", shape_str(ln.val.shape)));
    std::vector<Tensor<S>> grads(nodes_.size());
    grads[static_cast<size_t>(loss)] = Tensor<S>::full(ln.val.shape, S(1));
    for (int i = loss; i >= 0; --i) {
      if (grads[static_cast<size_t>(i)].data.size() == 0) continue;
      adjoint(nodes_[static_cast<size_t>(i)], grads[static_cast<size_t>(i)], grads);
    }
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op == Op::Leaf && grads[i].data.size() == 0)
        grads[i] = Tensor<S>::zeros(nodes_[i].val.shape);
    }
    return grads;
  }

 private:
  // deque keeps node references stable while ops append
  std::deque<Node> nodes_;

  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using CMatMap = Eigen::Map<const Mat>;

  const Tensor<S>& in_val(const Node& n, int slot) const {
    return nodes_[static_cast<size_t>(n.in[static_cast<size_t>(slot)])].val;
  }

  static void ensure_grad(std::vector<Tensor<S>>& grads, int id, const Tensor<S>& like) {
    auto& g = grads[static_cast<size_t>(id)];
    if (g.data.size() == 0) g = Tensor<S>::zeros(like.shape);
  }

  [[noreturn]] static void shape_fail(Op op, const Tensor<S>& a, const Tensor<S>& b) {
    throw ShapeError(
        cat(op_name(op), ": incompatible shapes ", shape_str(a.shape), " and ",
            shape_str(b.shape)));
  }

  static void require(bool cond, Op op, const std::string& what) {
    if (!cond) throw ShapeError(cat(op_name(op), ": ", what));
  }

  // ---- forward rules ----

  void forward(Node& n) const {
    switch (n.op) {
      case Op::Leaf:
        throw ContractError("apply: use leaf() to record inputs");
      case Op::Matmul: {
        const Tensor<S>& a = in_val(n, 0);
        const Tensor<S>& b = in_val(n, 1);
        require(a.rank() == 2 && b.rank() == 2, n.op, "operands must be rank 2");
        int m = n.attrs.trans_a ? a.dim(1) : a.dim(0);
        int ka = n.attrs.trans_a ? a.dim(0) : a.dim(1);
        int kb = n.attrs.trans_b ? b.dim(1) : b.dim(0);
        int nn = n.attrs.trans_b ? b.dim(0) : b.dim(1);
        if (ka != kb) shape_fail(n.op, a, b);
        n.val = Tensor<S>::zeros({m, nn});
        CMatMap am(a.data.data(), a.dim(0), a.dim(1));
        CMatMap bm(b.data.data(), b.dim(0), b.dim(1));
        MatMap ym(n.val.data.data(), m, nn);
        if (!n.attrs.trans_a && !n.attrs.trans_b) ym.noalias() = am * bm;
        else if (n.attrs.trans_a && !n.attrs.trans_b) ym.noalias() = am.transpose() * bm;
        else if (!n.attrs.trans_a && n.attrs.trans_b) ym.noalias() = am * bm.transpose();
        else ym.noalias() = am.transpose() * bm.transpose();
        break;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        const Tensor<S>& a = in_val(n, 0);
        const Tensor<S>& b = in_val(n, 1);
        if (!a.same_shape(b)) shape_fail(n.op, a, b);
        n.val.shape = a.shape;
        if (n.op == Op::Add) n.val.data = a.data + b.data;
        else if (n.op == Op::Sub) n.val.data = a.data - b.data;
        else n.val.data = a.data * b.data;
        break;
      }
      case Op::ScaleChannels: {
        const Tensor<S>& x = in_val(n, 0);
        const Tensor<S>& s = in_val(n, 1);
        require(x.rank() == 4 && s.rank() == 2, n.op, "expects X rank 4 and S rank 2");
        if (x.dim(0) != s.dim(0) || x.dim(1) != s.dim(1)) shape_fail(n.op, x, s);
        n.val = Tensor<S>::zeros(x.shape);
        int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
        for (int64_t tc = 0; tc < static_cast<int64_t>(x.dim(0)) * x.dim(1); ++tc)
          n.val.data.segment(tc * plane, plane) = x.data.segment(tc * plane, plane) * s.data[tc];
        break;
      }
      case Op::MulBcastLast:
      case Op::AddBcastLast: {
        const Tensor<S>& a = in_val(n, 0);
        const Tensor<S>& b = in_val(n, 1);
        require(a.rank() >= 1 && b.rank() == 1, n.op, "expects A rank>=1 and b rank 1");
        int d = b.dim(0);
        if (a.rank() < 1 || a.shape.back() != d) shape_fail(n.op, a, b);
        int64_t rows = a.numel() / d;
        n.val = Tensor<S>::zeros(a.shape);
        for (int64_t r = 0; r < rows; ++r) {
          if (n.op == Op::MulBcastLast)
            n.val.data.segment(r * d, d) = a.data.segment(r * d, d) * b.data;
          else
            n.val.data.segment(r * d, d) = a.data.segment(r * d, d) + b.data;
        }
        break;
      }
      case Op::AddChannelBias: {
        const Tensor<S>& x = in_val(n, 0);
        const Tensor<S>& b = in_val(n, 1);
        require(x.rank() == 4 && b.rank() == 1, n.op, "expects X rank 4 and b rank 1");
        if (x.dim(1) != b.dim(0)) shape_fail(n.op, x, b);
        n.val = Tensor<S>::zeros(x.shape);
        int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
        for (int nn = 0; nn < x.dim(0); ++nn)
          for (int c = 0; c < x.dim(1); ++c) {
            int64_t off = (static_cast<int64_t>(nn) * x.dim(1) + c) * plane;
            n.val.data.segment(off, plane) = x.data.segment(off, plane) + b.data[c];
          }
        break;
      }
      case Op::Relu: {
        const Tensor<S>& x = in_val(n, 0);
        n.val.shape = x.shape;
        n.val.data = x.data.max(S(0));
        break;
      }
      case Op::Sigmoid: {
        const Tensor<S>& x = in_val(n, 0);
        n.val.shape = x.shape;
        n.val.data = S(0.5) * ((x.data * S(0.5)).tanh() + S(1));
        break;
      }
      case Op::Sqrt: {
        const Tensor<S>& x = in_val(n, 0);
        n.val.shape = x.shape;
        n.val.data = x.data.sqrt();
        break;
      }
      case Op::Exp: {
        const Tensor<S>& x = in_val(n, 0);
        n.val.shape = x.shape;
        n.val.data = x.data.exp();
        break;
      }
      case Op::Log: {
        const Tensor<S>& x = in_val(n, 0);
        n.val.shape = x.shape;
        n.val.data = x.data.log();
        break;
      }
      case Op::SoftmaxLast: {
        const Tensor<S>& x = in_val(n, 0);
        require(x.rank() >= 1 && x.shape.back() >= 1, n.op, "needs a non-empty last axis");
        int k = x.shape.back();
        int64_t rows = x.numel() / k;
        n.val = Tensor<S>::zeros(x.shape);
        for (int64_t r = 0; r < rows; ++r) {
          auto row = x.data.segment(r * k, k);
          S m = row.maxCoeff();
          n.val.data.segment(r * k, k) = (row - m).exp();
          n.val.data.segment(r * k, k) /= n.val.data.segment(r * k, k).sum();
        }
        break;
      }
      case Op::MeanAxis: {
        const Tensor<S>& x = in_val(n, 0);
        int axis = n.attrs.axis;
        require(axis >= 0 && axis < x.rank(), n.op, cat("axis ", axis, " out of range for ",
                                                        shape_str(x.shape)));
        auto [outer, len, inner] = axis_split(x.shape, axis);
        std::vector<int> oshape = x.shape;
        oshape.erase(oshape.begin() + axis);
        n.val = Tensor<S>::zeros(oshape);
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t l = 0; l < len; ++l)
            n.val.data.segment(o * inner, inner) +=
                x.data.segment((o * len + l) * inner, inner);
        n.val.data /= static_cast<S>(len);
        break;
      }
      case Op::WeightedSpatialSum: {
        const Tensor<S>& x = in_val(n, 0);
        const Tensor<S>& w = in_val(n, 1);
        require(x.rank() == 4 && w.rank() == 3, n.op, "expects X rank 4 and W rank 3");
        if (x.dim(1) != w.dim(0) || x.dim(2) != w.dim(1) || x.dim(3) != w.dim(2))
          shape_fail(n.op, x, w);
        int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
        n.val = Tensor<S>::zeros({x.dim(0), x.dim(1)});
        for (int t = 0; t < x.dim(0); ++t)
          for (int c = 0; c < x.dim(1); ++c)
            n.val.at(t, c) =
                (x.data.segment((static_cast<int64_t>(t) * x.dim(1) + c) * plane, plane) *
                 w.data.segment(static_cast<int64_t>(c) * plane, plane))
                    .sum();
        break;
      }
      case Op::Conv2d:
        conv2d_forward(n);
        break;
      case Op::LayerNormLast: {
        const Tensor<S>& x = in_val(n, 0);
        require(x.rank() >= 1 && x.shape.back() >= 1, n.op, "needs a non-empty last axis");
        int d = x.shape.back();
        int64_t rows = x.numel() / d;
        n.val = Tensor<S>::zeros(x.shape);
        n.saved.resize(rows);
        for (int64_t r = 0; r < rows; ++r) {
          auto row = x.data.segment(r * d, d);
          S mu = row.mean();
          S var = (row - mu).square().mean();
          S inv = S(1) / std::sqrt(var + static_cast<S>(n.attrs.eps));
          n.saved[r] = inv;
          n.val.data.segment(r * d, d) = (row - mu) * inv;
        }
        break;
      }
      case Op::ScalarMul: {
        const Tensor<S>& x = in_val(n, 0);
        n.val.shape = x.shape;
        n.val.data = x.data * static_cast<S>(n.attrs.scalar);
        break;
      }
      case Op::ConcatAxis: {
        require(!n.in.empty(), n.op, "needs at least one input");
        const Tensor<S>& first = in_val(n, 0);
        int axis = n.attrs.axis;
        require(axis >= 0 && axis < first.rank(), n.op,
                cat("axis ", axis, " out of range for ", shape_str(first.shape)));
        int total = 0;
        for (size_t i = 0; i < n.in.size(); ++i) {
          const Tensor<S>& t = in_val(n, static_cast<int>(i));
          if (t.rank() != first.rank()) shape_fail(n.op, first, t);
          for (int dd = 0; dd < t.rank(); ++dd)
            if (dd != axis && t.dim(dd) != first.dim(dd)) shape_fail(n.op, first, t);
          total += t.dim(axis);
        }
        std::vector<int> oshape = first.shape;
        oshape[static_cast<size_t>(axis)] = total;
        n.val = Tensor<S>::zeros(oshape);
        auto [outer, len_all, inner] = axis_split(oshape, axis);
        (void)len_all;
        for (int64_t o = 0; o < outer; ++o) {
          int64_t pos = 0;
          for (size_t i = 0; i < n.in.size(); ++i) {
            const Tensor<S>& t = in_val(n, static_cast<int>(i));
            int64_t li = t.dim(axis);
            n.val.data.segment((o * total + pos) * inner, li * inner) =
                t.data.segment(o * li * inner, li * inner);
            pos += li;
          }
        }
        break;
      }
      case Op::Reshape: {
        const Tensor<S>& x = in_val(n, 0);
        if (Tensor<S>::numel_of(n.attrs.shape) != x.numel())
          throw ShapeError(cat("reshape: cannot view ", shape_str(x.shape), " as ",
                               shape_str(n.attrs.shape)));
        n.val.shape = n.attrs.shape;
        n.val.data = x.data;
        break;
      }
      case Op::MaxLast: {
        const Tensor<S>& x = in_val(n, 0);
        require(x.rank() >= 1 && x.shape.back() >= 1, n.op, "needs a non-empty last axis");
        int k = x.shape.back();
        int64_t rows = x.numel() / k;
        std::vector<int> oshape(x.shape.begin(), x.shape.end() - 1);
        n.val = Tensor<S>::zeros(oshape);
        n.aux.resize(static_cast<size_t>(rows));
        for (int64_t r = 0; r < rows; ++r) {
          int best = 0;
          S bv = x.data[r * k];
          for (int j = 1; j < k; ++j)
            if (x.data[r * k + j] > bv) { bv = x.data[r * k + j]; best = j; }
          n.val.data[r] = bv;
          n.aux[static_cast<size_t>(r)] = best;
        }
        break;
      }
      case Op::GatherLast: {
        const Tensor<S>& x = in_val(n, 0);
        require(x.rank() >= 2, n.op, "expects rank >= 2");
        int k = x.shape.back();
        int64_t rows = x.numel() / k;
        if (static_cast<int64_t>(n.attrs.indices.size()) != rows)
          throw ContractError(cat("gather_last: ", n.attrs.indices.size(),
                                  " indices for ", rows, " rows"));
        std::vector<int> oshape(x.shape.begin(), x.shape.end() - 1);
        n.val = Tensor<S>::zeros(oshape);
        for (int64_t r = 0; r < rows; ++r) {
          int j = n.attrs.indices[static_cast<size_t>(r)];
          if (j < 0 || j >= k)
            throw ContractError(cat("gather_last: index ", j, " out of range [0,", k, ")"));
          n.val.data[r] = x.data[r * k + j];
        }
        break;
      }
    }
  }

  // ---- adjoint rules ----

  void adjoint(const Node& n, const Tensor<S>& g, std::vector<Tensor<S>>& grads) const {
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Matmul: {
        const Tensor<S>& a = in_val(n, 0);
        const Tensor<S>& b = in_val(n, 1);
        ensure_grad(grads, n.in[0], a);
        ensure_grad(grads, n.in[1], b);
        int m = n.val.dim(0), nn = n.val.dim(1);
        CMatMap am(a.data.data(), a.dim(0), a.dim(1));
        CMatMap bm(b.data.data(), b.dim(0), b.dim(1));
        CMatMap gm(g.data.data(), m, nn);
        MatMap gam(grads[static_cast<size_t>(n.in[0])].data.data(), a.dim(0), a.dim(1));
        MatMap gbm(grads[static_cast<size_t>(n.in[1])].data.data(), b.dim(0), b.dim(1));
        bool ta = n.attrs.trans_a, tb = n.attrs.trans_b;
        // y = A' B' with A' = op(A), B' = op(B); dA' = g B'^T, dB' = A'^T g
        if (!ta) {
          if (!tb) gam.noalias() += gm * bm.transpose();
          else gam.noalias() += gm * bm;
        } else {
          if (!tb) gam.noalias() += bm * gm.transpose();
          else gam.noalias() += bm.transpose() * gm.transpose();
        }
        if (!tb) {
          if (!ta) gbm.noalias() += am.transpose() * gm;
          else gbm.noalias() += am * gm;
        } else {
          if (!ta) gbm.noalias() += gm.transpose() * am;
          else gbm.noalias() += gm.transpose() * am.transpose();
        }
        break;
      }
      case Op::Add:
      case Op::Sub: {
        ensure_grad(grads, n.in[0], in_val(n, 0));
        ensure_grad(grads, n.in[1], in_val(n, 1));
        grads[static_cast<size_t>(n.in[0])].data += g.data;
        if (n.op == Op::Add) grads[static_cast<size_t>(n.in[1])].data += g.data;
        else grads[static_cast<size_t>(n.in[1])].data -= g.data;
        break;
      }
      case Op::Mul: {
        const Tensor<S>& a = in_val(n, 0);
        const Tensor<S>& b = in_val(n, 1);
        ensure_grad(grads, n.in[0], a);
        ensure_grad(grads, n.in[1], b);
        grads[static_cast<size_t>(n.in[0])].data += g.data * b.data;
        grads[static_cast<size_t>(n.in[1])].data += g.data * a.data;
        break;
      }
      case Op::ScaleChannels: {
        const Tensor<S>& x = in_val(n, 0);
        const Tensor<S>& s = in_val(n, 1);
        ensure_grad(grads, n.in[0], x);
        ensure_grad(grads, n.in[1], s);
        auto& gx = grads[static_cast<size_t>(n.in[0])];
        auto& gs = grads[static_cast<size_t>(n.in[1])];
        int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
        for (int64_t tc = 0; tc < static_cast<int64_t>(x.dim(0)) * x.dim(1); ++tc) {
          gx.data.segment(tc * plane, plane) += g.data.segment(tc * plane, plane) * s.data[tc];
          gs.data[tc] +=
              (g.data.segment(tc * plane, plane) * x.data.segment(tc * plane, plane)).sum();
        }
        break;
      }
      case Op::MulBcastLast: {
        const Tensor<S>& a = in_val(n, 0);
        const Tensor<S>& b = in_val(n, 1);
        ensure_grad(grads, n.in[0], a);
        ensure_grad(grads, n.in[1], b);
        int d = b.dim(0);
        int64_t rows = a.numel() / d;
        auto& ga = grads[static_cast<size_t>(n.in[0])];
        auto& gb = grads[static_cast<size_t>(n.in[1])];
        for (int64_t r = 0; r < rows; ++r) {
          ga.data.segment(r * d, d) += g.data.segment(r * d, d) * b.data;
          gb.data += g.data.segment(r * d, d) * a.data.segment(r * d, d);
        }
        break;
      }
      case Op::AddBcastLast: {
        const Tensor<S>& a = in_val(n, 0);
        const Tensor<S>& b = in_val(n, 1);
        ensure_grad(grads, n.in[0], a);
        ensure_grad(grads, n.in[1], b);
        int d = b.dim(0);
        int64_t rows = a.numel() / d;
        grads[static_cast<size_t>(n.in[0])].data += g.data;
        auto& gb = grads[static_cast<size_t>(n.in[1])];
        for (int64_t r = 0; r < rows; ++r) gb.data += g.data.segment(r * d, d);
        break;
      }
      case Op::AddChannelBias: {
        const Tensor<S>& x = in_val(n, 0);
        const Tensor<S>& b = in_val(n, 1);
        ensure_grad(grads, n.in[0], x);
        ensure_grad(grads, n.in[1], b);
        grads[static_cast<size_t>(n.in[0])].data += g.data;
        auto& gb = grads[static_cast<size_t>(n.in[1])];
        int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
        for (int nn = 0; nn < x.dim(0); ++nn)
          for (int c = 0; c < x.dim(1); ++c)
            gb.data[c] +=
                g.data.segment((static_cast<int64_t>(nn) * x.dim(1) + c) * plane, plane).sum();
        break;
      }
      case Op::Relu: {
        const Tensor<S>& x = in_val(n, 0);
        ensure_grad(grads, n.in[0], x);
        grads[static_cast<size_t>(n.in[0])].data +=
            g.data * (x.data > S(0)).template cast<S>();
        break;
      }
      case Op::Sigmoid: {
        ensure_grad(grads, n.in[0], in_val(n, 0));
        grads[static_cast<size_t>(n.in[0])].data +=
            g.data * n.val.data * (S(1) - n.val.data);
        break;
      }
      case Op::Sqrt: {
        const Tensor<S>& x = in_val(n, 0);
        ensure_grad(grads, n.in[0], x);
        // input clamped at 1e-12 so the adjoint stays finite near zero
        grads[static_cast<size_t>(n.in[0])].data +=
            g.data * S(0.5) / x.data.max(S(1e-12)).sqrt();
        break;
      }
      case Op::Exp: {
        ensure_grad(grads, n.in[0], in_val(n, 0));
        grads[static_cast<size_t>(n.in[0])].data += g.data * n.val.data;
        break;
      }
      case Op::Log: {
        const Tensor<S>& x = in_val(n, 0);
        ensure_grad(grads, n.in[0], x);
        grads[static_cast<size_t>(n.in[0])].data += g.data / x.data;
        break;
      }
      case Op::SoftmaxLast: {
        const Tensor<S>& x = in_val(n, 0);
        ensure_grad(grads, n.in[0], x);
        auto& gx = grads[static_cast<size_t>(n.in[0])];
        int k = x.shape.back();
        int64_t rows = x.numel() / k;
        for (int64_t r = 0; r < rows; ++r) {
          auto y = n.val.data.segment(r * k, k);
          auto gr = g.data.segment(r * k, k);
          S dot = (y * gr).sum();
          gx.data.segment(r * k, k) += y * (gr - dot);
        }
        break;
      }
      case Op::MeanAxis: {
        const Tensor<S>& x = in_val(n, 0);
        ensure_grad(grads, n.in[0], x);
        auto& gx = grads[static_cast<size_t>(n.in[0])];
        auto [outer, len, inner] = axis_split(x.shape, n.attrs.axis);
        S scale = S(1) / static_cast<S>(len);
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t l = 0; l < len; ++l)
            gx.data.segment((o * len + l) * inner, inner) +=
                g.data.segment(o * inner, inner) * scale;
        break;
      }
      case Op::WeightedSpatialSum: {
        const Tensor<S>& x = in_val(n, 0);
        const Tensor<S>& w = in_val(n, 1);
        ensure_grad(grads, n.in[0], x);
        ensure_grad(grads, n.in[1], w);
        auto& gx = grads[static_cast<size_t>(n.in[0])];
        auto& gw = grads[static_cast<size_t>(n.in[1])];
        int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
        for (int t = 0; t < x.dim(0); ++t)
          for (int c = 0; c < x.dim(1); ++c) {
            int64_t xoff = (static_cast<int64_t>(t) * x.dim(1) + c) * plane;
            int64_t woff = static_cast<int64_t>(c) * plane;
            S gv = g.data[static_cast<int64_t>(t) * x.dim(1) + c];
            gx.data.segment(xoff, plane) += gv * w.data.segment(woff, plane);
            gw.data.segment(woff, plane) += gv * x.data.segment(xoff, plane);
          }
        break;
      }
      case Op::Conv2d:
        conv2d_adjoint(n, g, grads);
        break;
      case Op::LayerNormLast: {
        const Tensor<S>& x = in_val(n, 0);
        ensure_grad(grads, n.in[0], x);
        auto& gx = grads[static_cast<size_t>(n.in[0])];
        int d = x.shape.back();
        int64_t rows = x.numel() / d;
        for (int64_t r = 0; r < rows; ++r) {
          auto y = n.val.data.segment(r * d, d);
          auto gr = g.data.segment(r * d, d);
          S inv = n.saved[r];
          S mg = gr.mean();
          S mgy = (gr * y).mean();
          gx.data.segment(r * d, d) += inv * (gr - mg - y * mgy);
        }
        break;
      }
      case Op::ScalarMul: {
        ensure_grad(grads, n.in[0], in_val(n, 0));
        grads[static_cast<size_t>(n.in[0])].data +=
            g.data * static_cast<S>(n.attrs.scalar);
        break;
      }
      case Op::ConcatAxis: {
        int axis = n.attrs.axis;
        int total = n.val.dim(axis);
        auto [outer, len_all, inner] = axis_split(n.val.shape, axis);
        (void)len_all;
        for (int64_t o = 0; o < outer; ++o) {
          int64_t pos = 0;
          for (size_t i = 0; i < n.in.size(); ++i) {
            const Tensor<S>& t = in_val(n, static_cast<int>(i));
            ensure_grad(grads, n.in[i], t);
            int64_t li = t.dim(axis);
            grads[static_cast<size_t>(n.in[i])].data.segment(o * li * inner, li * inner) +=
                g.data.segment((o * total + pos) * inner, li * inner);
            pos += li;
          }
        }
        break;
      }
      case Op::Reshape: {
        const Tensor<S>& x = in_val(n, 0);
        ensure_grad(grads, n.in[0], x);
        grads[static_cast<size_t>(n.in[0])].data += g.data;
        break;
      }
      case Op::MaxLast: {
        const Tensor<S>& x = in_val(n, 0);
        ensure_grad(grads, n.in[0], x);
        auto& gx = grads[static_cast<size_t>(n.in[0])];
        int k = x.shape.back();
        int64_t rows = x.numel() / k;
        for (int64_t r = 0; r < rows; ++r)
          gx.data[r * k + n.aux[static_cast<size_t>(r)]] += g.data[r];
        break;
      }
      case Op::GatherLast: {
        const Tensor<S>& x = in_val(n, 0);
        ensure_grad(grads, n.in[0], x);
        auto& gx = grads[static_cast<size_t>(n.in[0])];
        int k = x.shape.back();
        int64_t rows = x.numel() / k;
        for (int64_t r = 0; r < rows; ++r)
          gx.data[r * k + n.attrs.indices[static_cast<size_t>(r)]] += g.data[r];
        break;
      }
    }
  }

  // shape -> (prod before axis, shape[axis], prod after axis)
  static std::tuple<int64_t, int64_t, int64_t> axis_split(const std::vector<int>& shape,
                                                          int axis) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
      inner *= shape[i];
    return {outer, shape[static_cast<size_t>(axis)], inner};
  }

  void conv2d_forward(Node& n) const {
    const Tensor<S>& x = in_val(n, 0);
    const Tensor<S>& k = in_val(n, 1);
    require(x.rank() == 4 && k.rank() == 4, n.op, "expects X rank 4 and K rank 4");
    if (x.dim(1) != k.dim(1)) shape_fail(n.op, x, k);
    int N = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    int co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    int s = n.attrs.stride, p = n.attrs.pad;
    require(s >= 1 && p >= 0, n.op, "stride must be >=1 and pad >=0");
    require(h + 2 * p >= kh && w + 2 * p >= kw, n.op,
            cat("kernel ", kh, "x", kw, " larger than padded input"));
    int ho = (h + 2 * p - kh) / s + 1;
    int wo = (w + 2 * p - kw) / s + 1;
    n.val = Tensor<S>::zeros({N, co, ho, wo});
    // im2col per sample, then one GEMM: K [co, ci*kh*kw] x cols [ci*kh*kw, ho*wo]
    int64_t krows = static_cast<int64_t>(ci) * kh * kw;
    int64_t cols_n = static_cast<int64_t>(ho) * wo;
    Mat cols(krows, cols_n);
    CMatMap kmat(k.data.data(), co, krows);
    for (int b = 0; b < N; ++b) {
      im2col(x.data.data() + static_cast<int64_t>(b) * ci * h * w, ci, h, w, kh, kw, s, p,
             ho, wo, cols.data());
      MatMap ymat(n.val.data.data() + static_cast<int64_t>(b) * co * cols_n, co, cols_n);
      ymat.noalias() = kmat * cols;
    }
  }

  static void im2col(const S* x, int ci, int h, int w, int kh, int kw, int s, int p,
                     int ho, int wo, S* cols) {
    int64_t row_len = static_cast<int64_t>(ho) * wo;
    for (int ic = 0; ic < ci; ++ic)
      for (int dy = 0; dy < kh; ++dy)
        for (int dx = 0; dx < kw; ++dx) {
          S* __restrict out =
              cols + ((static_cast<int64_t>(ic) * kh + dy) * kw + dx) * row_len;
          const S* xp = x + static_cast<int64_t>(ic) * h * w;
          int ow_lo = std::max(0, (p - dx + s - 1) / s);
          int ow_hi = std::min(wo - 1, (w - 1 + p - dx) / s);
          for (int oh = 0; oh < ho; ++oh) {
            int ih = oh * s - p + dy;
            S* __restrict orow = out + static_cast<int64_t>(oh) * wo;
            if (ih < 0 || ih >= h) {
              for (int ow = 0; ow < wo; ++ow) orow[ow] = S(0);
              continue;
            }
            const S* __restrict xrow = xp + static_cast<int64_t>(ih) * w - p + dx;
            for (int ow = 0; ow < ow_lo; ++ow) orow[ow] = S(0);
            if (s == 1)
              for (int ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] = xrow[ow];
            else
              for (int ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] = xrow[ow * s];
            for (int ow = ow_hi + 1; ow < wo; ++ow) orow[ow] = S(0);
          }
        }
  }

  static void col2im_add(const S* cols, int ci, int h, int w, int kh, int kw, int s, int p,
                         int ho, int wo, S* gx) {
    int64_t row_len = static_cast<int64_t>(ho) * wo;
    for (int ic = 0; ic < ci; ++ic)
      for (int dy = 0; dy < kh; ++dy)
        for (int dx = 0; dx < kw; ++dx) {
          const S* in = cols + ((static_cast<int64_t>(ic) * kh + dy) * kw + dx) * row_len;
          S* gxp = gx + static_cast<int64_t>(ic) * h * w;
          int ow_lo = std::max(0, (p - dx + s - 1) / s);
          int ow_hi = std::min(wo - 1, (w - 1 + p - dx) / s);
          for (int oh = 0; oh < ho; ++oh) {
            int ih = oh * s - p + dy;
            if (ih < 0 || ih >= h) continue;
            const S* __restrict irow = in + static_cast<int64_t>(oh) * wo;
            S* __restrict gxrow = gxp + static_cast<int64_t>(ih) * w - p + dx;
            if (s == 1)
              for (int ow = ow_lo; ow <= ow_hi; ++ow) gxrow[ow] += irow[ow];
            else
              for (int ow = ow_lo; ow <= ow_hi; ++ow) gxrow[ow * s] += irow[ow];
          }
        }
  }

  void conv2d_adjoint(const Node& n, const Tensor<S>& g,
                      std::vector<Tensor<S>>& grads) const {
    const Tensor<S>& x = in_val(n, 0);
    const Tensor<S>& k = in_val(n, 1);
    ensure_grad(grads, n.in[0], x);
    ensure_grad(grads, n.in[1], k);
    int N = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    int co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    int s = n.attrs.stride, p = n.attrs.pad;
    int ho = n.val.dim(2), wo = n.val.dim(3);
    const S* xd = x.data.data();
    const S* kd = k.data.data();
    const S* gd = g.data.data();
    S* gxd = grads[static_cast<size_t>(n.in[0])].data.data();
    S* gkd = grads[static_cast<size_t>(n.in[1])].data.data();
    int64_t krows = static_cast<int64_t>(ci) * kh * kw;
    int64_t cols_n = static_cast<int64_t>(ho) * wo;
    Mat cols(krows, cols_n);
    Mat gcols(krows, cols_n);
    CMatMap kmat(kd, co, krows);
    MatMap gkmat(gkd, co, krows);
    for (int b = 0; b < N; ++b) {
      im2col(xd + static_cast<int64_t>(b) * ci * h * w, ci, h, w, kh, kw, s, p, ho, wo,
             cols.data());
      CMatMap gmat(gd + static_cast<int64_t>(b) * co * cols_n, co, cols_n);
      gkmat.noalias() += gmat * cols.transpose();
      gcols.noalias() = kmat.transpose() * gmat;
      col2im_add(gcols.data(), ci, h, w, kh, kw, s, p, ho, wo,
                 gxd + static_cast<int64_t>(b) * ci * h * w);
    }
  }
};

// Lightweight handle to a recorded tensor; all graph-building free functions
// below operate on these.
template <class S>
struct Val {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Tensor<S>& t() const { return tape->val(id); }
  const std::vector<int>& shape() const { return t().shape; }
};

namespace detail {
template <class S>
Tape<S>* same_tape(Val<S> a, Val<S> b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return a.tape;
}
}  // namespace detail

template <class S>
Val<S> constant(Tape<S>& tape, Tensor<S> t) {
  return {&tape, tape.leaf(std::move(t))};
}

template <class S>
Val<S> matmul(Val<S> a, Val<S> b, bool trans_a = false, bool trans_b = false) {
  Attrs at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return {a.tape, detail::same_tape(a, b)->apply(Op::Matmul, {a.id, b.id}, at)};
}
template <class S> Val<S> add(Val<S> a, Val<S> b) {
  return {a.tape, detail::same_tape(a, b)->apply(Op::Add, {a.id, b.id})};
}
template <class S> Val<S> sub(Val<S> a, Val<S> b) {
  return {a.tape, detail::same_tape(a, b)->apply(Op::Sub, {a.id, b.id})};
}
template <class S> Val<S> mul(Val<S> a, Val<S> b) {
  return {a.tape, detail::same_tape(a, b)->apply(Op::Mul, {a.id, b.id})};
}
template <class S> Val<S> scale_channels(Val<S> x, Val<S> s) {
  return {x.tape, detail::same_tape(x, s)->apply(Op::ScaleChannels, {x.id, s.id})};
}
template <class S> Val<S> mul_bcast_last(Val<S> a, Val<S> b) {
  return {a.tape, detail::same_tape(a, b)->apply(Op::MulBcastLast, {a.id, b.id})};
}
template <class S> Val<S> add_bcast_last(Val<S> a, Val<S> b) {
  return {a.tape, detail::same_tape(a, b)->apply(Op::AddBcastLast, {a.id, b.id})};
}
template <class S> Val<S> add_channel_bias(Val<S> x, Val<S> b) {
  return {x.tape, detail::same_tape(x, b)->apply(Op::AddChannelBias, {x.id, b.id})};
}
template <class S> Val<S> relu(Val<S> x) { return {x.tape, x.tape->apply(Op::Relu, {x.id})}; }
template <class S> Val<S> sigmoid(Val<S> x) {
  return {x.tape, x.tape->apply(Op::Sigmoid, {x.id})};
}
template <class S> Val<S> sqrt(Val<S> x) { return {x.tape, x.tape->apply(Op::Sqrt, {x.id})}; }
template <class S> Val<S> exp(Val<S> x) { return {x.tape, x.tape->apply(Op::Exp, {x.id})}; }
template <class S> Val<S> log(Val<S> x) { return {x.tape, x.tape->apply(Op::Log, {x.id})}; }
template <class S> Val<S> softmax_last(Val<S> x) {
  return {x.tape, x.tape->apply(Op::SoftmaxLast, {x.id})};
}
template <class S> Val<S> mean_axis(Val<S> x, int axis) {
  Attrs at;
  at.axis = axis;
  return {x.tape, x.tape->apply(Op::MeanAxis, {x.id}, at)};
}
template <class S> Val<S> weighted_spatial_sum(Val<S> x, Val<S> w) {
  return {x.tape, detail::same_tape(x, w)->apply(Op::WeightedSpatialSum, {x.id, w.id})};
}
template <class S> Val<S> conv2d(Val<S> x, Val<S> k, int stride, int pad) {
  Attrs at;
  at.stride = stride;
  at.pad = pad;
  return {x.tape, detail::same_tape(x, k)->apply(Op::Conv2d, {x.id, k.id}, at)};
}
template <class S> Val<S> layer_norm_last(Val<S> x, double eps = 1e-5) {
  Attrs at;
  at.eps = eps;
  return {x.tape, x.tape->apply(Op::LayerNormLast, {x.id}, at)};
}
template <class S> Val<S> scalar_mul(Val<S> x, double c) {
  Attrs at;
  at.scalar = c;
  return {x.tape, x.tape->apply(Op::ScalarMul, {x.id}, at)};
}
template <class S> Val<S> concat_axis(const std::vector<Val<S>>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat_axis: empty input list");
  Attrs at;
  at.axis = axis;
  std::vector<int> ids;
  for (auto v : xs) {
    detail::same_tape(xs[0], v);
    ids.push_back(v.id);
  }
  return {xs[0].tape, xs[0].tape->apply(Op::ConcatAxis, std::move(ids), at)};
}
template <class S> Val<S> reshape(Val<S> x, std::vector<int> shape) {
  Attrs at;
  at.shape = std::move(shape);
  return {x.tape, x.tape->apply(Op::Reshape, {x.id}, at)};
}
template <class S> Val<S> max_last(Val<S> x) {
  return {x.tape, x.tape->apply(Op::MaxLast, {x.id})};
}
template <class S> Val<S> gather_last(Val<S> x, std::vector<int> indices) {
  Attrs at;
  at.indices = std::move(indices);
  return {x.tape, x.tape->apply(Op::GatherLast, {x.id}, at)};
}

// Sum of all entries as a rank-0 tensor.
template <class S>
Val<S> sum_all(Val<S> x) {
  int64_t n = x.t().numel();
  Val<S> flat = reshape(x, {static_cast<int>(n)});
  return scalar_mul(mean_axis(flat, 0), static_cast<double>(n));
}

template <class S>
Val<S> mean_all(Val<S> x) {
  int64_t n = x.t().numel();
  return mean_axis(reshape(x, {static_cast<int>(n)}), 0);
}

}  // namespace ialgca
