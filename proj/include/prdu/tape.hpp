#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "prdu/tensor.hpp"

namespace prdu {

// Primitive set. Covers embedding lookup, GRU cells, pooling, single-query
// attention, classifier heads and the loss terms built on top of them.
enum class Op : int {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Sigmoid,
  Tanh,
  Exp,
  Log,
  Scale,
  Transpose,
  ConcatLast,
  MeanAxis,
  SumAll,
  StackRows,
  SelectRow,
  SelectIndex,
  LogSoftmax,
  EmbedRows,
};

struct OpAttrs {
  double scalar = 1.0;        // Scale factor
  int axis = -1;              // MeanAxis axis, SelectRow row, SelectIndex index
  std::vector<int> indices;   // EmbedRows token ids
};

inline Op op_from_name(const std::string& name) {
  if (name == "matmul") return Op::MatMul;
  if (name == "add") return Op::Add;
  if (name == "sub") return Op::Sub;
  if (name == "elementwise-multiply" || name == "mul") return Op::Mul;
  if (name == "sigmoid") return Op::Sigmoid;
  if (name == "tanh") return Op::Tanh;
  if (name == "exp") return Op::Exp;
  if (name == "log") return Op::Log;
  if (name == "scale") return Op::Scale;
  if (name == "transpose") return Op::Transpose;
  if (name == "concat-last-axis") return Op::ConcatLast;
  if (name == "mean-over-axis") return Op::MeanAxis;
  if (name == "sum") return Op::SumAll;
  if (name == "stack-rows") return Op::StackRows;
  if (name == "select-row") return Op::SelectRow;
  if (name == "select-index") return Op::SelectIndex;
  if (name == "log-softmax") return Op::LogSoftmax;
  if (name == "embed-rows") return Op::EmbedRows;
  throw std::invalid_argument("unknown primitive kind: " + name);
}

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline Tensor forward_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() == 2 && b.rank() == 2) {
    require(a.extent(1) == b.extent(0), "matmul: inner extents differ " +
                                            a.shape_string() + " vs " + b.shape_string());
    const int m = a.extent(0), n = a.extent(1), p = b.extent(1);
    Tensor out({m, p});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();
    for (int i = 0; i < m; ++i) {
      for (int k = 0; k < n; ++k) {
        const double aik = pa[i * n + k];
        const double* brow = pb + k * p;
        double* crow = pc + i * p;
        for (int j = 0; j < p; ++j) crow[j] += aik * brow[j];
      }
    }
    return out;
  }
  if (a.rank() == 2 && b.rank() == 1) {
    require(a.extent(1) == b.extent(0), "matmul: matrix-vector extents differ");
    const int m = a.extent(0), n = a.extent(1);
    Tensor out({m});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      const double* arow = pa + i * n;
      for (int k = 0; k < n; ++k) acc += arow[k] * pb[k];
      pc[i] = acc;
    }
    return out;
  }
  if (a.rank() == 1 && b.rank() == 2) {
    require(a.extent(0) == b.extent(0), "matmul: vector-matrix extents differ");
    const int n = a.extent(0), p = b.extent(1);
    Tensor out({p});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();
    for (int k = 0; k < n; ++k) {
      const double ak = pa[k];
      const double* brow = pb + k * p;
      for (int j = 0; j < p; ++j) pc[j] += ak * brow[j];
    }
    return out;
  }
  throw std::invalid_argument("matmul: unsupported ranks " + a.shape_string() + ", " +
                              b.shape_string());
}

template <typename F>
Tensor forward_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const int n = x.size();
  for (int i = 0; i < n; ++i) po[i] = f(px[i]);
  return out;
}

inline Tensor forward_log_softmax(const Tensor& x) {
  require(x.rank() == 1, "log-softmax: expects a vector");
  const int n = x.extent(0);
  const double* px = x.data();
  double m = px[0];
  for (int i = 1; i < n; ++i) m = std::max(m, px[i]);
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += std::exp(px[i] - m);
  const double lse = std::log(total);
  Tensor out({n});
  double* po = out.data();
  for (int i = 0; i < n; ++i) po[i] = px[i] - m - lse;
  return out;
}

}  // namespace detail

class Tape;

// Result of Tape::backward: cotangents indexed by node id. Nodes the loss
// does not depend on read back as exact zeros.
class GradientMap {
 public:
  GradientMap(std::uint64_t gen, std::vector<Tensor> grads, std::vector<std::vector<int>> shapes)
      : gen_(gen), grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  Tensor grad(const Tensor& t) const {
    detail::require(t.node() >= 0 && t.tape_generation() == gen_,
                    "gradient lookup: tensor is not recorded on this tape");
    const auto id = static_cast<std::size_t>(t.node());
    if (id < grads_.size() && grads_[id].defined()) return grads_[id];
    return Tensor(shapes_.at(id));
  }

 private:
  std::uint64_t gen_;
  std::vector<Tensor> grads_;
  std::vector<std::vector<int>> shapes_;
};

// Ordered record of primitive applications. Node ids index into the record;
// every input of a node precedes it. clear() invalidates all ids issued so
// far (enforced via a global generation counter).
class Tape {
 public:
  Tape() : gen_(next_generation()) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t generation() const { return gen_; }
  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    gen_ = next_generation();
  }

  // Registers a leaf so gradients can be queried for it later.
  void watch(Tensor& t) {
    Node node;
    node.op = Op::Leaf;
    node.value = t;
    const int id = static_cast<int>(nodes_.size());
    t.bind_node(id, gen_);
    node.value.bind_node(id, gen_);
    nodes_.push_back(std::move(node));
  }

  Tensor apply(Op op, std::span<const Tensor> inputs, OpAttrs attrs = {}) {
    Tensor out = eval(op, inputs, attrs);
    Node node;
    node.op = op;
    node.attrs = std::move(attrs);
    node.inputs.reserve(inputs.size());
    node.saved.reserve(inputs.size());
    for (const Tensor& in : inputs) {
      if (in.node() >= 0 && in.tape_generation() != gen_)
        throw std::invalid_argument("apply: input recorded under a different tape");
      node.inputs.push_back(in.node() >= 0 ? in.node() : -1);
      node.saved.push_back(in);
    }
    const int id = static_cast<int>(nodes_.size());
    out.bind_node(id, gen_);
    node.value = out;
    nodes_.push_back(std::move(node));
    return out;
  }

  // Forward evaluation shared by the recording and the no-tape paths.
  static Tensor eval(Op op, std::span<const Tensor> inputs, const OpAttrs& attrs) {
    using detail::require;
    switch (op) {
      case Op::Leaf:
        throw std::invalid_argument("apply: leaf is not applicable");
      case Op::MatMul:
        require(inputs.size() == 2, "matmul: expects 2 inputs");
        return detail::forward_matmul(inputs[0], inputs[1]);
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        require(inputs.size() == 2, "binary op: expects 2 inputs");
        const Tensor& a = inputs[0];
        const Tensor& b = inputs[1];
        require(a.same_shape(b), "binary op: shape mismatch " + a.shape_string() +
                                     " vs " + b.shape_string());
        Tensor out(a.shape());
        const double* pa = a.data();
        const double* pb = b.data();
        double* po = out.data();
        const int n = a.size();
        if (op == Op::Add)
          for (int i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        else if (op == Op::Sub)
          for (int i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
        else
          for (int i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
        return out;
      }
      case Op::Sigmoid:
        require(inputs.size() == 1, "sigmoid: expects 1 input");
        return detail::forward_unary(inputs[0], [](double v) {
          return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                          : std::exp(v) / (1.0 + std::exp(v));
        });
      case Op::Tanh:
        require(inputs.size() == 1, "tanh: expects 1 input");
        return detail::forward_unary(inputs[0], [](double v) { return std::tanh(v); });
      case Op::Exp:
        require(inputs.size() == 1, "exp: expects 1 input");
        return detail::forward_unary(inputs[0], [](double v) { return std::exp(v); });
      case Op::Log:
        require(inputs.size() == 1, "log: expects 1 input");
        return detail::forward_unary(inputs[0], [](double v) { return std::log(v); });
      case Op::Scale:
        require(inputs.size() == 1, "scale: expects 1 input");
        return detail::forward_unary(inputs[0],
                                     [&](double v) { return attrs.scalar * v; });
      case Op::Transpose: {
        require(inputs.size() == 1 && inputs[0].rank() == 2, "transpose: expects a matrix");
        const Tensor& a = inputs[0];
        const int m = a.extent(0), n = a.extent(1);
        Tensor out({n, m});
        const double* pa = a.data();
        double* po = out.data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
        return out;
      }
      case Op::ConcatLast: {
        require(!inputs.empty(), "concat-last-axis: expects inputs");
        int total = 0;
        for (const Tensor& t : inputs) {
          require(t.rank() <= 1, "concat-last-axis: expects scalars or vectors");
          total += t.size();
        }
        Tensor out({total});
        double* po = out.data();
        for (const Tensor& t : inputs) {
          const double* pt = t.data();
          for (int i = 0; i < t.size(); ++i) *po++ = pt[i];
        }
        return out;
      }
      case Op::MeanAxis: {
        require(inputs.size() == 1, "mean-over-axis: expects 1 input");
        const Tensor& a = inputs[0];
        if (a.rank() == 1) {
          require(attrs.axis == 0, "mean-over-axis: vector axis must be 0");
          double acc = 0.0;
          const double* pa = a.data();
          for (int i = 0; i < a.size(); ++i) acc += pa[i];
          return Tensor::scalar(acc / a.size());
        }
        require(a.rank() == 2 && (attrs.axis == 0 || attrs.axis == 1),
                "mean-over-axis: expects matrix axis 0 or 1");
        const int m = a.extent(0), n = a.extent(1);
        const double* pa = a.data();
        if (attrs.axis == 0) {
          Tensor out({n});
          double* po = out.data();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) po[j] += pa[i * n + j];
          for (int j = 0; j < n; ++j) po[j] /= m;
          return out;
        }
        Tensor out({m});
        double* po = out.data();
        for (int i = 0; i < m; ++i) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += pa[i * n + j];
          po[i] = acc / n;
        }
        return out;
      }
      case Op::SumAll: {
        require(inputs.size() == 1, "sum: expects 1 input");
        double acc = 0.0;
        const double* pa = inputs[0].data();
        for (int i = 0; i < inputs[0].size(); ++i) acc += pa[i];
        return Tensor::scalar(acc);
      }
      case Op::StackRows: {
        require(!inputs.empty(), "stack-rows: expects inputs");
        const int d = inputs[0].size();
        for (const Tensor& t : inputs)
          require(t.rank() == 1 && t.size() == d, "stack-rows: rows must be equal-length vectors");
        Tensor out({static_cast<int>(inputs.size()), d});
        double* po = out.data();
        for (const Tensor& t : inputs) {
          const double* pt = t.data();
          for (int i = 0; i < d; ++i) *po++ = pt[i];
        }
        return out;
      }
      case Op::SelectRow: {
        require(inputs.size() == 1 && inputs[0].rank() == 2, "select-row: expects a matrix");
        const Tensor& a = inputs[0];
        require(attrs.axis >= 0 && attrs.axis < a.extent(0), "select-row: row out of range");
        const int n = a.extent(1);
        Tensor out({n});
        const double* pa = a.data() + static_cast<std::size_t>(attrs.axis) * n;
        double* po = out.data();
        for (int j = 0; j < n; ++j) po[j] = pa[j];
        return out;
      }
      case Op::SelectIndex: {
        require(inputs.size() == 1 && inputs[0].rank() == 1, "select-index: expects a vector");
        require(attrs.axis >= 0 && attrs.axis < inputs[0].extent(0),
                "select-index: index out of range");
        return Tensor::scalar(inputs[0].at(attrs.axis));
      }
      case Op::LogSoftmax:
        require(inputs.size() == 1, "log-softmax: expects 1 input");
        return detail::forward_log_softmax(inputs[0]);
      case Op::EmbedRows: {
        require(inputs.size() == 1 && inputs[0].rank() == 2, "embed-rows: expects a table");
        const Tensor& table = inputs[0];
        const int v = table.extent(0), d = table.extent(1);
        require(!attrs.indices.empty(), "embed-rows: expects token indices");
        Tensor out({static_cast<int>(attrs.indices.size()), d});
        double* po = out.data();
        const double* pt = table.data();
        for (int id : attrs.indices) {
          require(id >= 0 && id < v, "embed-rows: token id out of range: " + std::to_string(id));
          const double* row = pt + static_cast<std::size_t>(id) * d;
          for (int j = 0; j < d; ++j) *po++ = row[j];
        }
        return out;
      }
    }
    throw std::invalid_argument("apply: unhandled primitive");
  }

  // Reverse sweep from a scalar loss. Accumulation order is fixed by the
  // record order, so repeated runs are bit-identical.
  GradientMap backward(const Tensor& loss) const {
    detail::require(loss.node() >= 0 && loss.tape_generation() == gen_,
                    "backward: loss is not recorded on this tape");
    detail::require(loss.is_scalar(), "backward: loss must be a scalar");

    std::vector<Tensor> cot(nodes_.size());
    cot[static_cast<std::size_t>(loss.node())] = Tensor::scalar(1.0);

    for (int id = loss.node(); id >= 0; --id) {
      const Node& node = nodes_[static_cast<std::size_t>(id)];
      Tensor& g = cot[static_cast<std::size_t>(id)];
      if (!g.defined() || node.op == Op::Leaf) continue;
      propagate(node, g, cot);
      // All consumers have higher ids, so this cotangent is fully consumed.
      g = Tensor();
    }

    std::vector<Tensor> grads(nodes_.size());
    std::vector<std::vector<int>> shapes(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      shapes[i] = nodes_[i].value.shape();
      if (nodes_[i].op == Op::Leaf && cot[i].defined()) grads[i] = cot[i];
    }
    return GradientMap(gen_, std::move(grads), std::move(shapes));
  }

 private:
  struct Node {
    Op op = Op::Leaf;
    OpAttrs attrs;
    std::vector<int> inputs;
    std::vector<Tensor> saved;
    Tensor value;
  };

  static std::uint64_t next_generation() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }

  static void accumulate(std::vector<Tensor>& cot, int node_id, const Tensor& shape_ref,
                         const double* contrib) {
    if (node_id < 0) return;  // constant input, no gradient wanted
    Tensor& slot = cot[static_cast<std::size_t>(node_id)];
    if (!slot.defined()) slot = Tensor::zeros_like(shape_ref);
    double* p = slot.data();
    const int n = slot.size();
    for (int i = 0; i < n; ++i) p[i] += contrib[i];
  }

  void propagate(const Node& node, const Tensor& g, std::vector<Tensor>& cot) const {
    const auto push = [&](std::size_t slot, const Tensor& contrib) {
      accumulate(cot, node.inputs[slot], node.saved[slot], contrib.data());
    };
    switch (node.op) {
      case Op::Leaf:
        return;
      case Op::MatMul: {
        const Tensor& a = node.saved[0];
        const Tensor& b = node.saved[1];
        if (a.rank() == 2 && b.rank() == 2) {
          const int m = a.extent(0), n = a.extent(1), p = b.extent(1);
          if (node.inputs[0] >= 0) {
            // da = g . b^T, computed as row dots so both operands stream.
            Tensor da({m, n});
            const double* pg = g.data();
            const double* pb = b.data();
            double* pd = da.data();
            for (int i = 0; i < m; ++i) {
              const double* grow = pg + i * p;
              for (int k = 0; k < n; ++k) {
                const double* brow = pb + k * p;
                double acc = 0.0;
                for (int j = 0; j < p; ++j) acc += grow[j] * brow[j];
                pd[i * n + k] = acc;
              }
            }
            push(0, da);
          }
          if (node.inputs[1] >= 0) {
            Tensor db({n, p});
            const double* pg = g.data();
            const double* pa = a.data();
            double* pd = db.data();
            for (int i = 0; i < m; ++i)
              for (int k = 0; k < n; ++k) {
                const double aik = pa[i * n + k];
                const double* grow = pg + i * p;
                double* drow = pd + k * p;
                for (int j = 0; j < p; ++j) drow[j] += aik * grow[j];
              }
            push(1, db);
          }
        } else if (a.rank() == 2 && b.rank() == 1) {
          const int m = a.extent(0), n = a.extent(1);
          if (node.inputs[0] >= 0) {
            Tensor da({m, n});
            const double* pg = g.data();
            const double* pb = b.data();
            double* pd = da.data();
            for (int i = 0; i < m; ++i) {
              const double gi = pg[i];
              double* drow = pd + i * n;
              for (int k = 0; k < n; ++k) drow[k] += gi * pb[k];
            }
            push(0, da);
          }
          if (node.inputs[1] >= 0) {
            Tensor db({n});
            const double* pg = g.data();
            const double* pa = a.data();
            double* pd = db.data();
            for (int i = 0; i < m; ++i) {
              const double gi = pg[i];
              const double* arow = pa + i * n;
              for (int k = 0; k < n; ++k) pd[k] += gi * arow[k];
            }
            push(1, db);
          }
        } else {  // 1-D x 2-D
          const int n = a.extent(0), p = b.extent(1);
          if (node.inputs[0] >= 0) {
            Tensor da({n});
            const double* pg = g.data();
            const double* pb = b.data();
            double* pd = da.data();
            for (int k = 0; k < n; ++k) {
              const double* brow = pb + k * p;
              double acc = 0.0;
              for (int j = 0; j < p; ++j) acc += brow[j] * pg[j];
              pd[k] = acc;
            }
            push(0, da);
          }
          if (node.inputs[1] >= 0) {
            Tensor db({n, p});
            const double* pg = g.data();
            const double* pa = a.data();
            double* pd = db.data();
            for (int k = 0; k < n; ++k) {
              const double ak = pa[k];
              double* drow = pd + k * p;
              for (int j = 0; j < p; ++j) drow[j] += ak * pg[j];
            }
            push(1, db);
          }
        }
        return;
      }
      case Op::Add:
        push(0, g);
        push(1, g);
        return;
      case Op::Sub: {
        push(0, g);
        if (node.inputs[1] >= 0) {
          Tensor neg(g.shape());
          const double* pg = g.data();
          double* pn = neg.data();
          for (int i = 0; i < g.size(); ++i) pn[i] = -pg[i];
          push(1, neg);
        }
        return;
      }
      case Op::Mul: {
        if (node.inputs[0] >= 0) {
          Tensor da(g.shape());
          const double* pg = g.data();
          const double* pb = node.saved[1].data();
          double* pd = da.data();
          for (int i = 0; i < g.size(); ++i) pd[i] = pg[i] * pb[i];
          push(0, da);
        }
        if (node.inputs[1] >= 0) {
          Tensor db(g.shape());
          const double* pg = g.data();
          const double* pa = node.saved[0].data();
          double* pd = db.data();
          for (int i = 0; i < g.size(); ++i) pd[i] = pg[i] * pa[i];
          push(1, db);
        }
        return;
      }
      case Op::Sigmoid: {
        if (node.inputs[0] < 0) return;
        Tensor dx(g.shape());
        const double* pg = g.data();
        const double* py = node.value.data();
        double* pd = dx.data();
        for (int i = 0; i < g.size(); ++i) pd[i] = pg[i] * py[i] * (1.0 - py[i]);
        push(0, dx);
        return;
      }
      case Op::Tanh: {
        if (node.inputs[0] < 0) return;
        Tensor dx(g.shape());
        const double* pg = g.data();
        const double* py = node.value.data();
        double* pd = dx.data();
        for (int i = 0; i < g.size(); ++i) pd[i] = pg[i] * (1.0 - py[i] * py[i]);
        push(0, dx);
        return;
      }
      case Op::Exp: {
        if (node.inputs[0] < 0) return;
        Tensor dx(g.shape());
        const double* pg = g.data();
        const double* py = node.value.data();
        double* pd = dx.data();
        for (int i = 0; i < g.size(); ++i) pd[i] = pg[i] * py[i];
        push(0, dx);
        return;
      }
      case Op::Log: {
        if (node.inputs[0] < 0) return;
        Tensor dx(g.shape());
        const double* pg = g.data();
        const double* px = node.saved[0].data();
        double* pd = dx.data();
        for (int i = 0; i < g.size(); ++i) pd[i] = pg[i] / px[i];
        push(0, dx);
        return;
      }
      case Op::Scale: {
        if (node.inputs[0] < 0) return;
        Tensor dx(g.shape());
        const double* pg = g.data();
        double* pd = dx.data();
        for (int i = 0; i < g.size(); ++i) pd[i] = node.attrs.scalar * pg[i];
        push(0, dx);
        return;
      }
      case Op::Transpose: {
        if (node.inputs[0] < 0) return;
        const int m = node.saved[0].extent(0), n = node.saved[0].extent(1);
        Tensor dx({m, n});
        const double* pg = g.data();  // g is n x m
        double* pd = dx.data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) pd[i * n + j] = pg[j * m + i];
        push(0, dx);
        return;
      }
      case Op::ConcatLast: {
        const double* pg = g.data();
        for (std::size_t s = 0; s < node.saved.size(); ++s) {
          const int len = node.saved[s].size();
          if (node.inputs[s] >= 0) {
            Tensor part(node.saved[s].shape());
            double* pd = part.data();
            for (int i = 0; i < len; ++i) pd[i] = pg[i];
            push(s, part);
          }
          pg += len;
        }
        return;
      }
      case Op::MeanAxis: {
        if (node.inputs[0] < 0) return;
        const Tensor& a = node.saved[0];
        Tensor dx(a.shape());
        double* pd = dx.data();
        const double* pg = g.data();
        if (a.rank() == 1) {
          const double v = g.value() / a.size();
          for (int i = 0; i < a.size(); ++i) pd[i] = v;
        } else if (node.attrs.axis == 0) {
          const int m = a.extent(0), n = a.extent(1);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) pd[i * n + j] = pg[j] / m;
        } else {
          const int m = a.extent(0), n = a.extent(1);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) pd[i * n + j] = pg[i] / n;
        }
        push(0, dx);
        return;
      }
      case Op::SumAll: {
        if (node.inputs[0] < 0) return;
        Tensor dx(node.saved[0].shape());
        const double v = g.value();
        double* pd = dx.data();
        for (int i = 0; i < dx.size(); ++i) pd[i] = v;
        push(0, dx);
        return;
      }
      case Op::StackRows: {
        const int d = node.saved[0].size();
        const double* pg = g.data();
        for (std::size_t s = 0; s < node.saved.size(); ++s) {
          if (node.inputs[s] >= 0) {
            Tensor part({d});
            double* pd = part.data();
            for (int i = 0; i < d; ++i) pd[i] = pg[s * d + i];
            push(s, part);
          }
        }
        return;
      }
      case Op::SelectRow: {
        if (node.inputs[0] < 0) return;
        const Tensor& a = node.saved[0];
        Tensor dx(a.shape());
        const int n = a.extent(1);
        double* pd = dx.data() + static_cast<std::size_t>(node.attrs.axis) * n;
        const double* pg = g.data();
        for (int j = 0; j < n; ++j) pd[j] = pg[j];
        push(0, dx);
        return;
      }
      case Op::SelectIndex: {
        if (node.inputs[0] < 0) return;
        Tensor dx(node.saved[0].shape());
        dx.data()[node.attrs.axis] = g.value();
        push(0, dx);
        return;
      }
      case Op::LogSoftmax: {
        if (node.inputs[0] < 0) return;
        const int n = g.size();
        const double* pg = g.data();
        const double* py = node.value.data();
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += pg[i];
        Tensor dx({n});
        double* pd = dx.data();
        for (int i = 0; i < n; ++i) pd[i] = pg[i] - std::exp(py[i]) * total;
        push(0, dx);
        return;
      }
      case Op::EmbedRows: {
        if (node.inputs[0] < 0) return;
        const Tensor& table = node.saved[0];
        const int d = table.extent(1);
        Tensor dx(table.shape());
        double* pd = dx.data();
        const double* pg = g.data();
        for (std::size_t t = 0; t < node.attrs.indices.size(); ++t) {
          double* row = pd + static_cast<std::size_t>(node.attrs.indices[t]) * d;
          const double* grow = pg + t * d;
          for (int j = 0; j < d; ++j) row[j] += grow[j];
        }
        push(0, dx);
        return;
      }
    }
  }

  std::vector<Node> nodes_;
  std::uint64_t gen_;
};

// Convenience wrappers. A null tape evaluates without recording, which is
// the inference path.
inline Tensor apply(Tape* tape, Op op, std::span<const Tensor> inputs, OpAttrs attrs = {}) {
  if (tape) return tape->apply(op, inputs, std::move(attrs));
  return Tape::eval(op, inputs, attrs);
}

inline Tensor apply_named(Tape* tape, const std::string& kind, std::span<const Tensor> inputs,
                          OpAttrs attrs = {}) {
  return apply(tape, op_from_name(kind), inputs, std::move(attrs));
}

inline Tensor matmul(Tape* t, const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply(t, Op::MatMul, in);
}
inline Tensor add(Tape* t, const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply(t, Op::Add, in);
}
inline Tensor sub(Tape* t, const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply(t, Op::Sub, in);
}
inline Tensor mul(Tape* t, const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply(t, Op::Mul, in);
}
inline Tensor sigmoid(Tape* t, const Tensor& x) {
  const Tensor in[] = {x};
  return apply(t, Op::Sigmoid, in);
}
inline Tensor tanh_op(Tape* t, const Tensor& x) {
  const Tensor in[] = {x};
  return apply(t, Op::Tanh, in);
}
inline Tensor exp_op(Tape* t, const Tensor& x) {
  const Tensor in[] = {x};
  return apply(t, Op::Exp, in);
}
inline Tensor log_op(Tape* t, const Tensor& x) {
  const Tensor in[] = {x};
  return apply(t, Op::Log, in);
}
inline Tensor scale(Tape* t, const Tensor& x, double c) {
  const Tensor in[] = {x};
  return apply(t, Op::Scale, in, OpAttrs{.scalar = c});
}
inline Tensor transpose(Tape* t, const Tensor& x) {
  const Tensor in[] = {x};
  return apply(t, Op::Transpose, in);
}
inline Tensor concat(Tape* t, std::span<const Tensor> parts) {
  return apply(t, Op::ConcatLast, parts);
}
inline Tensor mean_over_axis(Tape* t, const Tensor& x, int axis) {
  const Tensor in[] = {x};
  return apply(t, Op::MeanAxis, in, OpAttrs{.axis = axis});
}
inline Tensor sum_all(Tape* t, const Tensor& x) {
  const Tensor in[] = {x};
  return apply(t, Op::SumAll, in);
}
inline Tensor stack_rows(Tape* t, std::span<const Tensor> rows) {
  return apply(t, Op::StackRows, rows);
}
inline Tensor select_row(Tape* t, const Tensor& x, int row) {
  const Tensor in[] = {x};
  return apply(t, Op::SelectRow, in, OpAttrs{.axis = row});
}
inline Tensor select_index(Tape* t, const Tensor& x, int index) {
  const Tensor in[] = {x};
  return apply(t, Op::SelectIndex, in, OpAttrs{.axis = index});
}
inline Tensor log_softmax(Tape* t, const Tensor& x) {
  const Tensor in[] = {x};
  return apply(t, Op::LogSoftmax, in);
}
inline Tensor embed_rows(Tape* t, const Tensor& table, std::vector<int> ids) {
  const Tensor in[] = {table};
  return apply(t, Op::EmbedRows, in, OpAttrs{.indices = std::move(ids)});
}

}  // namespace prdu
