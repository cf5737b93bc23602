#pragma once

// Static expression graph over dense tensors with reverse-mode differentiation.
//
// A Graph is built once through the builder methods, then evaluated against a
// set of named input bindings. Evaluation caches every node's forward value so
// backward() can walk the nodes in reverse creation order (which is always a
// valid reverse topological order, since nodes can only reference earlier ones).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hiercode/error.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode::ad {

enum class Op {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Scale,
  MatMul,
  Transpose,
  Reshape,
  Gather,
  Concat,
  Relu,
  LayerNorm,
  Softmax,
  LogSumExp,
  SumLast,
  Sum,
  Mean,
  SquaredNorm,
  Log,
  Exp,
  Attention,
  StopGradient,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::Gather: return "gather";
    case Op::Concat: return "concat";
    case Op::Relu: return "relu";
    case Op::LayerNorm: return "layer_norm";
    case Op::Softmax: return "softmax";
    case Op::LogSumExp: return "logsumexp";
    case Op::SumLast: return "sum_last";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SquaredNorm: return "squared_norm";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Attention: return "attention";
    case Op::StopGradient: return "stop_gradient";
  }
  return "?";
}

struct Var {
  std::size_t id = 0;
};

struct Node {
  Op op = Op::Constant;
  std::vector<std::size_t> inputs;
  std::string name;  // binding name for inputs, optional label otherwise
  bool requires_grad = false;
  Tensor constant;
  double scalar = 0.0;  // scale factor, temperature, or layer-norm epsilon
  std::vector<std::size_t> index;
  Shape shape;
  std::size_t axis = 0;
  std::size_t heads = 1;
  std::vector<unsigned char> mask;
};

using Bindings = std::map<std::string, Tensor>;
using Gradients = std::map<std::string, Tensor>;

class Graph {
 public:
  Var input(const std::string& name, bool requires_grad = true) {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == Op::Input && nodes_[i].name == name) return {i};
    Node n;
    n.op = Op::Input;
    n.name = name;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }
  Var constant(Tensor t) {
    Node n;
    n.op = Op::Constant;
    n.constant = std::move(t);
    return push(std::move(n));
  }

  // Elementwise binary ops. `b` may omit the leading axis of `a`, in which
  // case it is broadcast along that axis.
  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }

  Var scale(Var a, double c) {
    Node n = unary(Op::Scale, a);
    n.scalar = c;
    return push(std::move(n));
  }
  Var matmul(Var a, Var b) { return binary(Op::MatMul, a, b); }
  Var transpose(Var a) { return push(unary(Op::Transpose, a)); }
  Var reshape(Var a, Shape s) {
    Node n = unary(Op::Reshape, a);
    n.shape = std::move(s);
    return push(std::move(n));
  }
  Var gather(Var a, std::vector<std::size_t> rows) {
    Node n = unary(Op::Gather, a);
    n.index = std::move(rows);
    return push(std::move(n));
  }
  Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) fail<ShapeError>("concat of zero tensors");
    Node n;
    n.op = Op::Concat;
    for (Var p : parts) n.inputs.push_back(checked(p));
    n.axis = axis;
    return push(std::move(n));
  }
  Var relu(Var a) { return push(unary(Op::Relu, a)); }
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {checked(x), checked(gamma), checked(beta)};
    n.scalar = eps;
    return push(std::move(n));
  }
  // softmax(x / temperature) over the last axis.
  Var softmax(Var x, double temperature = 1.0) {
    if (!(temperature > 0.0)) fail<ConfigError>("softmax temperature must be positive");
    Node n = unary(Op::Softmax, x);
    n.scalar = temperature;
    return push(std::move(n));
  }
  // log sum_j exp(x_j / temperature) over the last axis. A non-empty mask has
  // one flag per element of x; entries with flag 0 are left out of the sum.
  Var logsumexp(Var x, double temperature = 1.0, std::vector<unsigned char> mask = {}) {
    if (!(temperature > 0.0)) fail<ConfigError>("logsumexp temperature must be positive");
    Node n = unary(Op::LogSumExp, x);
    n.scalar = temperature;
    n.mask = std::move(mask);
    return push(std::move(n));
  }
  Var sum_last(Var a) { return push(unary(Op::SumLast, a)); }
  Var sum(Var a) { return push(unary(Op::Sum, a)); }
  Var mean(Var a) { return push(unary(Op::Mean, a)); }
  Var squared_norm(Var a) { return push(unary(Op::SquaredNorm, a)); }
  Var log(Var a) { return push(unary(Op::Log, a)); }
  Var exp(Var a) { return push(unary(Op::Exp, a)); }

  // Multi-head scaled dot-product attention over [batch, seq, dim] inputs.
  // mask is seq*seq flags; mask[i*seq+j] != 0 lets position i attend to j.
  Var attention(Var q, Var k, Var v, std::size_t heads, std::vector<unsigned char> mask) {
    if (heads == 0) fail<ConfigError>("attention needs at least one head");
    Node n;
    n.op = Op::Attention;
    n.inputs = {checked(q), checked(k), checked(v)};
    n.heads = heads;
    n.mask = std::move(mask);
    return push(std::move(n));
  }
  Var stop_gradient(Var a) { return push(unary(Op::StopGradient, a)); }

  Var label(Var v, std::string text) {
    checked(v);
    if (nodes_[v.id].op != Op::Input) nodes_[v.id].name = std::move(text);
    return v;
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  std::string describe(std::size_t id) const {
    const Node& n = nodes_.at(id);
    std::string s = "node #" + std::to_string(id) + " (" + std::string(op_name(n.op));
    if (!n.name.empty()) s += " '" + n.name + "'";
    return s + ")";
  }

 private:
  std::size_t checked(Var v) const {
    if (v.id >= nodes_.size()) fail<Error>("variable refers to node ", v.id, " outside graph");
    return v.id;
  }
  Node unary(Op op, Var a) const {
    Node n;
    n.op = op;
    n.inputs = {checked(a)};
    return n;
  }
  Var binary(Op op, Var a, Var b) {
    Node n;
    n.op = op;
    n.inputs = {checked(a), checked(b)};
    return push(std::move(n));
  }
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

// Forward cache of one evaluation. `aux` holds per-node intermediates needed by
// backward (softmax probabilities, normalized activations).
struct Evaluation {
  std::vector<Tensor> values;
  std::vector<std::vector<double>> aux;
  std::vector<unsigned char> live;
  Var root;

  const Tensor& value(Var v) const { return values.at(v.id); }
  const Tensor& output() const { return values.at(root.id); }
};

namespace detail {

inline bool broadcasts(const Shape& a, const Shape& b) {
  if (a == b) return true;
  return a.size() == b.size() + 1 && std::equal(b.begin(), b.end(), a.begin() + 1);
}

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape, 0.0); }

// Accumulate g (shaped like the op output, i.e. like `a`) into a gradient
// buffer shaped like `target`, summing over the broadcast axis when needed.
inline void accumulate_reduced(Tensor& target, const Tensor& g, double sign) {
  const std::size_t n = target.size();
  if (n == 0) return;
  double* t = target.data.data();
  for (std::size_t base = 0; base < g.size(); base += n) {
    const double* gr = g.data.data() + base;
    for (std::size_t i = 0; i < n; ++i) t[i] += sign * gr[i];
  }
}

// out = f(a, b) elementwise, with b repeated along a's leading axis.
template <typename F>
void broadcast_apply(const Tensor& a, const Tensor& b, Tensor& out, F f) {
  const std::size_t nb = b.size();
  if (nb == 0) return;
  for (std::size_t base = 0; base < a.size(); base += nb) {
    const double* ar = a.data.data() + base;
    double* o = out.data.data() + base;
    for (std::size_t j = 0; j < nb; ++j) o[j] = f(ar[j], b.data[j]);
  }
}

// o[rows, cols] += a[rows, inner] * b[inner, cols]
inline void matmul_acc(const double* a, const double* b, double* o, std::size_t rows, std::size_t inner,
                       std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    double* oi = o + i * cols;
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = a[i * inner + k];
      if (aik == 0.0) continue;
      const double* br = b + k * cols;
      for (std::size_t j = 0; j < cols; ++j) oi[j] += aik * br[j];
    }
  }
}

// ga[rows, inner] += g[rows, cols] * b[inner, cols]^T
inline void matmul_grad_a(const Tensor& g, const Tensor& b, Tensor& ga) {
  const std::size_t rows = g.dim(0), inner = b.dim(0), cols = b.dim(1);
  std::vector<double> bt(cols * inner);
  for (std::size_t k = 0; k < inner; ++k)
    for (std::size_t j = 0; j < cols; ++j) bt[j * inner + k] = b.data[k * cols + j];
  std::vector<double> acc(inner);
  for (std::size_t i = 0; i < rows; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const double* gi = g.data.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      const double gij = gi[j];
      if (gij == 0.0) continue;
      const double* btr = bt.data() + j * inner;
      for (std::size_t k = 0; k < inner; ++k) acc[k] += gij * btr[k];
    }
    double* out = ga.data.data() + i * inner;
    for (std::size_t k = 0; k < inner; ++k) out[k] += acc[k];
  }
}

struct AttentionDims {
  std::size_t batch, seq, dim, heads, head_dim;
};

}  // namespace detail

// `held`, when given, replaces the value of every stop_gradient node by the
// value cached in that earlier evaluation of the same graph.
inline Evaluation eval(const Graph& g, const Bindings& inputs, Var root, const Evaluation* held = nullptr) {
  if (root.id >= g.size()) fail<Error>("root node ", root.id, " outside graph");
  Evaluation ev;
  ev.root = root;
  ev.values.resize(root.id + 1);
  ev.aux.resize(root.id + 1);
  ev.live.assign(root.id + 1, 0);
  ev.live[root.id] = 1;
  for (std::size_t i = root.id + 1; i-- > 0;)
    if (ev.live[i])
      for (std::size_t in : g.node(i).inputs) ev.live[in] = 1;

  auto shape_fail = [&](std::size_t id, const std::string& what, const Shape& a, const Shape& b) {
    fail<ShapeError>(g.describe(id), ": ", what, " ", shape_str(a), " vs ", shape_str(b));
  };

  for (std::size_t id = 0; id <= root.id; ++id) {
    if (!ev.live[id]) continue;
    const Node& n = g.node(id);
    auto in = [&](std::size_t k) -> const Tensor& { return ev.values[n.inputs[k]]; };
    Tensor out;
    switch (n.op) {
      case Op::Input: {
        auto it = inputs.find(n.name);
        if (it == inputs.end()) fail<Error>(g.describe(id), ": input '", n.name, "' is not bound");
        out = it->second;
        break;
      }
      case Op::Constant: out = n.constant; break;
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (!detail::broadcasts(a.shape, b.shape)) shape_fail(id, "incompatible elementwise shapes", a.shape, b.shape);
        out = Tensor(a.shape);
        if (n.op == Op::Add) detail::broadcast_apply(a, b, out, [](double x, double y) { return x + y; });
        else if (n.op == Op::Sub) detail::broadcast_apply(a, b, out, [](double x, double y) { return x - y; });
        else detail::broadcast_apply(a, b, out, [](double x, double y) { return x * y; });
        break;
      }
      case Op::Scale: {
        out = in(0);
        for (double& x : out.data) x *= n.scalar;
        break;
      }
      case Op::MatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
          shape_fail(id, "matmul inner dimensions differ", a.shape, b.shape);
        const std::size_t rows = a.dim(0), inner = a.dim(1), cols = b.dim(1);
        out = Tensor(Shape{rows, cols});
        detail::matmul_acc(a.data.data(), b.data.data(), out.data.data(), rows, inner, cols);
        break;
      }
      case Op::Transpose: {
        const Tensor& a = in(0);
        if (a.rank() != 2) shape_fail(id, "transpose needs a matrix", a.shape, Shape{});
        out = Tensor(Shape{a.dim(1), a.dim(0)});
        for (std::size_t i = 0; i < a.dim(0); ++i)
          for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
        break;
      }
      case Op::Reshape: {
        const Tensor& a = in(0);
        if (shape_size(n.shape) != a.size()) shape_fail(id, "reshape changes element count", a.shape, n.shape);
        out = Tensor(n.shape, a.data);
        break;
      }
      case Op::Gather: {
        const Tensor& a = in(0);
        if (a.rank() == 0) shape_fail(id, "gather needs a leading axis", a.shape, Shape{});
        Shape s = a.shape;
        s[0] = n.index.size();
        out = Tensor(s);
        const std::size_t w = a.row_size();
        for (std::size_t r = 0; r < n.index.size(); ++r) {
          if (n.index[r] >= a.dim(0))
            fail<ShapeError>(g.describe(id), ": row ", n.index[r], " out of range for shape ", shape_str(a.shape));
          std::copy_n(a.data.begin() + n.index[r] * w, w, out.data.begin() + r * w);
        }
        break;
      }
      case Op::Concat: {
        const Tensor& first = in(0);
        if (n.axis >= first.rank()) shape_fail(id, "concat axis out of range", first.shape, Shape{n.axis});
        Shape s = first.shape;
        s[n.axis] = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& t = in(k);
          Shape a = t.shape, b = first.shape;
          if (a.size() != b.size()) shape_fail(id, "concat rank mismatch", first.shape, t.shape);
          a[n.axis] = b[n.axis] = 0;
          if (a != b) shape_fail(id, "concat shape mismatch", first.shape, t.shape);
          s[n.axis] += t.dim(n.axis);
        }
        out = Tensor(s);
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < n.axis; ++i) outer *= s[i];
        for (std::size_t i = n.axis + 1; i < s.size(); ++i) inner *= s[i];
        const std::size_t out_block = s[n.axis] * inner;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& t = in(k);
          const std::size_t block = t.dim(n.axis) * inner;
          for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(t.data.begin() + o * block, block, out.data.begin() + o * out_block + offset);
          offset += block;
        }
        break;
      }
      case Op::Relu: {
        out = in(0);
        for (double& x : out.data) x = x > 0.0 ? x : 0.0;
        break;
      }
      case Op::LayerNorm: {
        const Tensor& x = in(0);
        const Tensor& gamma = in(1);
        const Tensor& beta = in(2);
        if (x.rank() == 0) shape_fail(id, "layer_norm needs a feature axis", x.shape, Shape{});
        const std::size_t d = x.shape.back();
        if (gamma.shape != Shape{d}) shape_fail(id, "layer_norm gain shape", x.shape, gamma.shape);
        if (beta.shape != Shape{d}) shape_fail(id, "layer_norm bias shape", x.shape, beta.shape);
        const std::size_t rows = x.size() / d;
        out = Tensor(x.shape);
        auto& cache = ev.aux[id];
        cache.assign(x.size() + rows, 0.0);  // normalized values, then 1/sigma per row
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = x.data.data() + r * d;
          double mu = 0.0;
          for (std::size_t j = 0; j < d; ++j) mu += xr[j];
          mu /= static_cast<double>(d);
          double var = 0.0;
          for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
          var /= static_cast<double>(d);
          const double inv = 1.0 / std::sqrt(var + n.scalar);
          cache[x.size() + r] = inv;
          for (std::size_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu) * inv;
            cache[r * d + j] = xh;
            out.data[r * d + j] = xh * gamma.data[j] + beta.data[j];
          }
        }
        break;
      }
      case Op::Softmax: {
        const Tensor& x = in(0);
        const std::size_t d = x.rank() ? x.shape.back() : 1;
        out = Tensor(x.shape);
        for (std::size_t r = 0; r < x.size() / d; ++r) {
          const double* xr = x.data.data() + r * d;
          double* o = out.data.data() + r * d;
          const double inv_t = 1.0 / n.scalar;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, xr[j] * inv_t);
          double z = 0.0;
          for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(xr[j] * inv_t - mx));
          for (std::size_t j = 0; j < d; ++j) o[j] /= z;
        }
        break;
      }
      case Op::LogSumExp: {
        const Tensor& x = in(0);
        if (x.rank() == 0) shape_fail(id, "logsumexp needs an axis", x.shape, Shape{});
        if (!n.mask.empty() && n.mask.size() != x.size())
          shape_fail(id, "logsumexp mask size", x.shape, Shape{n.mask.size()});
        const std::size_t d = x.shape.back();
        out = Tensor(Shape(x.shape.begin(), x.shape.end() - 1));
        auto& probs = ev.aux[id];
        probs.assign(x.size(), 0.0);
        for (std::size_t r = 0; r < x.size() / d; ++r) {
          const double* xr = x.data.data() + r * d;
          double* pr = probs.data() + r * d;
          // Scaled by the reciprocal so a single-term sum reproduces scale(x, 1/T) bitwise.
          const double inv_t = 1.0 / n.scalar;
          double mx = -std::numeric_limits<double>::infinity();
          double z = 0.0;
          if (n.mask.empty()) {
            for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, xr[j] * inv_t);
            for (std::size_t j = 0; j < d; ++j) z += (pr[j] = std::exp(xr[j] * inv_t - mx));
          } else {
            const unsigned char* on = n.mask.data() + r * d;
            for (std::size_t j = 0; j < d; ++j)
              if (on[j]) mx = std::max(mx, xr[j] * inv_t);
            for (std::size_t j = 0; j < d; ++j)
              if (on[j]) z += (pr[j] = std::exp(xr[j] * inv_t - mx));
          }
          const double inv_z = 1.0 / z;
          for (std::size_t j = 0; j < d; ++j) pr[j] *= inv_z;
          out.data[r] = mx + std::log(z);
        }
        break;
      }
      case Op::SumLast: {
        const Tensor& x = in(0);
        if (x.rank() == 0) shape_fail(id, "sum_last needs an axis", x.shape, Shape{});
        const std::size_t d = x.shape.back();
        out = Tensor(Shape(x.shape.begin(), x.shape.end() - 1));
        for (std::size_t r = 0; r < out.size(); ++r) {
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += x.data[r * d + j];
          out.data[r] = s;
        }
        break;
      }
      case Op::Sum:
      case Op::Mean:
      case Op::SquaredNorm: {
        const Tensor& x = in(0);
        double s = 0.0;
        for (double v : x.data) s += n.op == Op::SquaredNorm ? v * v : v;
        if (n.op == Op::Mean) s /= static_cast<double>(x.size());
        out = Tensor::scalar(s);
        break;
      }
      case Op::Log: {
        out = in(0);
        for (double& v : out.data) v = std::log(v);
        break;
      }
      case Op::Exp: {
        out = in(0);
        for (double& v : out.data) v = std::exp(v);
        break;
      }
      case Op::Attention: {
        const Tensor& q = in(0);
        const Tensor& k = in(1);
        const Tensor& v = in(2);
        if (q.rank() != 3) shape_fail(id, "attention expects [batch,seq,dim]", q.shape, Shape{});
        if (k.shape != q.shape) shape_fail(id, "attention key shape", q.shape, k.shape);
        if (v.shape != q.shape) shape_fail(id, "attention value shape", q.shape, v.shape);
        const detail::AttentionDims ad{q.dim(0), q.dim(1), q.dim(2), n.heads, q.dim(2) / n.heads};
        if (ad.dim % ad.heads != 0) shape_fail(id, "attention heads must divide dim", q.shape, Shape{n.heads});
        if (n.mask.size() != ad.seq * ad.seq) shape_fail(id, "attention mask size", q.shape, Shape{n.mask.size()});
        const double sc = 1.0 / std::sqrt(static_cast<double>(ad.head_dim));
        out = Tensor(q.shape);
        auto& probs = ev.aux[id];
        probs.assign(ad.batch * ad.heads * ad.seq * ad.seq, 0.0);
        std::vector<double> logits(ad.seq);
        for (std::size_t b = 0; b < ad.batch; ++b) {
          for (std::size_t h = 0; h < ad.heads; ++h) {
            for (std::size_t i = 0; i < ad.seq; ++i) {
              const double* qi = q.data.data() + (b * ad.seq + i) * ad.dim + h * ad.head_dim;
              double* p = probs.data() + ((b * ad.heads + h) * ad.seq + i) * ad.seq;
              double mx = -std::numeric_limits<double>::infinity();
              for (std::size_t j = 0; j < ad.seq; ++j) {
                if (!n.mask[i * ad.seq + j]) continue;
                const double* kj = k.data.data() + (b * ad.seq + j) * ad.dim + h * ad.head_dim;
                double s = 0.0;
                for (std::size_t c = 0; c < ad.head_dim; ++c) s += qi[c] * kj[c];
                logits[j] = s * sc;
                mx = std::max(mx, logits[j]);
              }
              double z = 0.0;
              for (std::size_t j = 0; j < ad.seq; ++j)
                if (n.mask[i * ad.seq + j]) z += (p[j] = std::exp(logits[j] - mx));
              double* o = out.data.data() + (b * ad.seq + i) * ad.dim + h * ad.head_dim;
              for (std::size_t j = 0; j < ad.seq; ++j) {
                if (!n.mask[i * ad.seq + j]) continue;
                p[j] /= z;
                const double* vj = v.data.data() + (b * ad.seq + j) * ad.dim + h * ad.head_dim;
                for (std::size_t c = 0; c < ad.head_dim; ++c) o[c] += p[j] * vj[c];
              }
            }
          }
        }
        break;
      }
      case Op::StopGradient: out = held ? held->values.at(id) : in(0); break;
    }
    if (!out.all_finite()) fail<NonFiniteError>(g.describe(id), " produced a non-finite value");
    ev.values[id] = std::move(out);
  }
  return ev;
}

// Reverse pass from the evaluation root. Returns the gradient of every input
// leaf declared with requires_grad that the root depends on through a
// differentiable path; stop_gradient blocks the path.
inline Gradients backward(const Graph& g, const Evaluation& ev) {
  const std::size_t root = ev.root.id;
  if (ev.values.size() <= root || !ev.live[root]) fail<Error>("backward called without a forward cache");
  if (!ev.values[root].is_scalar())
    fail<ShapeError>("backward root ", g.describe(root), " is not scalar: ", shape_str(ev.values[root].shape));

  std::vector<unsigned char> needs(root + 1, 0);
  for (std::size_t id = 0; id <= root; ++id) {
    if (!ev.live[id]) continue;
    const Node& n = g.node(id);
    if (n.op == Op::Input) needs[id] = n.requires_grad;
    else if (n.op == Op::StopGradient || n.op == Op::Constant) needs[id] = 0;
    else
      for (std::size_t in : n.inputs) needs[id] |= needs[in];
  }

  std::vector<Tensor> grads(root + 1);
  std::vector<unsigned char> has(root + 1, 0);
  auto buf = [&](std::size_t id) -> Tensor& {
    if (!has[id]) {
      grads[id] = detail::zeros_like(ev.values[id]);
      has[id] = 1;
    }
    return grads[id];
  };
  buf(root).data[0] = 1.0;

  for (std::size_t id = root + 1; id-- > 0;) {
    if (!needs[id] || !has[id]) continue;
    const Node& n = g.node(id);
    const Tensor& G = grads[id];
    const Tensor& Y = ev.values[id];
    auto val = [&](std::size_t k) -> const Tensor& { return ev.values[n.inputs[k]]; };
    auto want = [&](std::size_t k) { return needs[n.inputs[k]] != 0; };

    switch (n.op) {
      case Op::Input:
      case Op::Constant:
      case Op::StopGradient: break;
      case Op::Add:
      case Op::Sub: {
        if (want(0)) detail::accumulate_reduced(buf(n.inputs[0]), G, 1.0);
        if (want(1)) detail::accumulate_reduced(buf(n.inputs[1]), G, n.op == Op::Add ? 1.0 : -1.0);
        break;
      }
      case Op::Mul: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        const std::size_t nb = b.size();
        if (want(0)) {
          Tensor& ga = buf(n.inputs[0]);
          for (std::size_t base = 0; nb && base < a.size(); base += nb)
            for (std::size_t j = 0; j < nb; ++j) ga.data[base + j] += G.data[base + j] * b.data[j];
        }
        if (want(1)) {
          Tensor& gb = buf(n.inputs[1]);
          for (std::size_t base = 0; nb && base < a.size(); base += nb)
            for (std::size_t j = 0; j < nb; ++j) gb.data[j] += G.data[base + j] * a.data[base + j];
        }
        break;
      }
      case Op::Scale: {
        Tensor& ga = buf(n.inputs[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga.data[i] += n.scalar * G.data[i];
        break;
      }
      case Op::MatMul: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        const std::size_t rows = a.dim(0), inner = a.dim(1), cols = b.dim(1);
        if (want(0)) detail::matmul_grad_a(G, b, buf(n.inputs[0]));
        if (want(1)) {
          Tensor& gb = buf(n.inputs[1]);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t k = 0; k < inner; ++k) {
              const double aik = a.data[i * inner + k];
              if (aik == 0.0) continue;
              const double* gr = G.data.data() + i * cols;
              double* o = gb.data.data() + k * cols;
              for (std::size_t j = 0; j < cols; ++j) o[j] += aik * gr[j];
            }
        }
        break;
      }
      case Op::Transpose: {
        Tensor& ga = buf(n.inputs[0]);
        for (std::size_t i = 0; i < Y.dim(0); ++i)
          for (std::size_t j = 0; j < Y.dim(1); ++j) ga(j, i) += G(i, j);
        break;
      }
      case Op::Reshape: {
        Tensor& ga = buf(n.inputs[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga.data[i] += G.data[i];
        break;
      }
      case Op::Gather: {
        Tensor& ga = buf(n.inputs[0]);
        const std::size_t w = ga.row_size();
        for (std::size_t r = 0; r < n.index.size(); ++r)
          for (std::size_t j = 0; j < w; ++j) ga.data[n.index[r] * w + j] += G.data[r * w + j];
        break;
      }
      case Op::Concat: {
        const Shape& s = Y.shape;
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < n.axis; ++i) outer *= s[i];
        for (std::size_t i = n.axis + 1; i < s.size(); ++i) inner *= s[i];
        const std::size_t out_block = s[n.axis] * inner;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t block = val(k).dim(n.axis) * inner;
          if (want(k)) {
            Tensor& gk = buf(n.inputs[k]);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < block; ++j) gk.data[o * block + j] += G.data[o * out_block + offset + j];
          }
          offset += block;
        }
        break;
      }
      case Op::Relu: {
        const Tensor& x = val(0);
        Tensor& ga = buf(n.inputs[0]);
        for (std::size_t i = 0; i < x.size(); ++i)
          if (x.data[i] > 0.0) ga.data[i] += G.data[i];
        break;
      }
      case Op::LayerNorm: {
        const Tensor& x = val(0);
        const Tensor& gamma = val(1);
        const std::size_t d = x.shape.back();
        const std::size_t rows = x.size() / d;
        const auto& cache = ev.aux[id];
        if (want(1) || want(2)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              if (want(1)) buf(n.inputs[1]).data[j] += G.data[r * d + j] * cache[r * d + j];
              if (want(2)) buf(n.inputs[2]).data[j] += G.data[r * d + j];
            }
        }
        if (want(0)) {
          Tensor& gx = buf(n.inputs[0]);
          std::vector<double> gxh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              gxh[j] = G.data[r * d + j] * gamma.data[j];
              m1 += gxh[j];
              m2 += gxh[j] * cache[r * d + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            const double inv = cache[x.size() + r];
            for (std::size_t j = 0; j < d; ++j)
              gx.data[r * d + j] += inv * (gxh[j] - m1 - cache[r * d + j] * m2);
          }
        }
        break;
      }
      case Op::Softmax: {
        Tensor& gx = buf(n.inputs[0]);
        const std::size_t d = Y.rank() ? Y.shape.back() : 1;
        for (std::size_t r = 0; r < Y.size() / d; ++r) {
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += G.data[r * d + j] * Y.data[r * d + j];
          for (std::size_t j = 0; j < d; ++j)
            gx.data[r * d + j] += Y.data[r * d + j] * (G.data[r * d + j] - s) / n.scalar;
        }
        break;
      }
      case Op::LogSumExp: {
        Tensor& gx = buf(n.inputs[0]);
        const auto& probs = ev.aux[id];
        const std::size_t d = val(0).shape.back();
        const double inv_t = 1.0 / n.scalar;
        for (std::size_t r = 0; r < G.size(); ++r) {
          const double gr = G.data[r] * inv_t;
          for (std::size_t j = 0; j < d; ++j) gx.data[r * d + j] += gr * probs[r * d + j];
        }
        break;
      }
      case Op::SumLast: {
        Tensor& gx = buf(n.inputs[0]);
        const std::size_t d = val(0).shape.back();
        for (std::size_t r = 0; r < G.size(); ++r)
          for (std::size_t j = 0; j < d; ++j) gx.data[r * d + j] += G.data[r];
        break;
      }
      case Op::Sum:
      case Op::Mean:
      case Op::SquaredNorm: {
        const Tensor& x = val(0);
        Tensor& gx = buf(n.inputs[0]);
        const double g0 = G.data[0];
        const double mscale = n.op == Op::Mean ? 1.0 / static_cast<double>(x.size()) : 1.0;
        for (std::size_t i = 0; i < x.size(); ++i)
          gx.data[i] += n.op == Op::SquaredNorm ? 2.0 * x.data[i] * g0 : g0 * mscale;
        break;
      }
      case Op::Log: {
        const Tensor& x = val(0);
        Tensor& gx = buf(n.inputs[0]);
        for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] += G.data[i] / x.data[i];
        break;
      }
      case Op::Exp: {
        Tensor& gx = buf(n.inputs[0]);
        for (std::size_t i = 0; i < Y.size(); ++i) gx.data[i] += G.data[i] * Y.data[i];
        break;
      }
      case Op::Attention: {
        const Tensor& q = val(0);
        const Tensor& k = val(1);
        const Tensor& v = val(2);
        const detail::AttentionDims ad{q.dim(0), q.dim(1), q.dim(2), n.heads, q.dim(2) / n.heads};
        const double sc = 1.0 / std::sqrt(static_cast<double>(ad.head_dim));
        const auto& probs = ev.aux[id];
        Tensor* gq = want(0) ? &buf(n.inputs[0]) : nullptr;
        Tensor* gk = want(1) ? &buf(n.inputs[1]) : nullptr;
        Tensor* gv = want(2) ? &buf(n.inputs[2]) : nullptr;
        std::vector<double> dp(ad.seq);
        auto at = [&](std::size_t b, std::size_t t, std::size_t h) { return (b * ad.seq + t) * ad.dim + h * ad.head_dim; };
        for (std::size_t b = 0; b < ad.batch; ++b) {
          for (std::size_t h = 0; h < ad.heads; ++h) {
            for (std::size_t i = 0; i < ad.seq; ++i) {
              const double* p = probs.data() + ((b * ad.heads + h) * ad.seq + i) * ad.seq;
              const double* go = G.data.data() + at(b, i, h);
              double rowdot = 0.0;
              for (std::size_t j = 0; j < ad.seq; ++j) {
                if (!n.mask[i * ad.seq + j]) continue;
                const double* vj = v.data.data() + at(b, j, h);
                double s = 0.0;
                for (std::size_t c = 0; c < ad.head_dim; ++c) s += go[c] * vj[c];
                dp[j] = s;
                rowdot += s * p[j];
                if (gv) {
                  double* gvj = gv->data.data() + at(b, j, h);
                  for (std::size_t c = 0; c < ad.head_dim; ++c) gvj[c] += p[j] * go[c];
                }
              }
              const double* qi = q.data.data() + at(b, i, h);
              for (std::size_t j = 0; j < ad.seq; ++j) {
                if (!n.mask[i * ad.seq + j]) continue;
                const double ds = p[j] * (dp[j] - rowdot) * sc;
                const double* kj = k.data.data() + at(b, j, h);
                if (gq) {
                  double* gqi = gq->data.data() + at(b, i, h);
                  for (std::size_t c = 0; c < ad.head_dim; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk->data.data() + at(b, j, h);
                  for (std::size_t c = 0; c < ad.head_dim; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
        break;
      }
    }
  }

  Gradients out;
  for (std::size_t id = 0; id <= root; ++id) {
    const Node& n = g.node(id);
    if (n.op == Op::Input && n.requires_grad && ev.live[id])
      out[n.name] = has[id] ? grads[id] : detail::zeros_like(ev.values[id]);
  }
  return out;
}

// Central-difference check of the analytic gradient for one bound leaf.
// Returns max over coordinates of |a - n| / max(1, |a|, |n|). With
// hold_stopped, the probes keep every stop_gradient node at its unperturbed
// value, so the numeric side differentiates the same function backward does.
inline double grad_check(const Graph& g, const Bindings& inputs, Var root, const std::string& leaf, double eps = 1e-5,
                         bool hold_stopped = false) {
  if (!(eps > 0.0 && eps <= 1e-3)) fail<ConfigError>("grad_check eps must lie in (0, 1e-3], got ", eps);
  const Evaluation base = eval(g, inputs, root);
  const Gradients analytic = backward(g, base);
  auto it = analytic.find(leaf);
  if (it == analytic.end()) fail<Error>("grad_check: '", leaf, "' is not a differentiable input of the root");
  Bindings probe = inputs;
  Tensor& x = probe.at(leaf);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x.data[i];
    const Evaluation* held = hold_stopped ? &base : nullptr;
    x.data[i] = keep + eps;
    const double up = eval(g, probe, root, held).output().item();
    x.data[i] = keep - eps;
    const double down = eval(g, probe, root, held).output().item();
    x.data[i] = keep;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = it->second.data[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
  }
  return worst;
}

// Causal mask for a sequence of length n: position i sees positions j <= i.
inline std::vector<unsigned char> causal_mask(std::size_t n) {
  std::vector<unsigned char> m(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m[i * n + j] = 1;
  return m;
}

}  // namespace hiercode::ad
