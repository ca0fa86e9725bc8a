#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dlab/ndarray.hpp"

namespace dlab {

// A named trainable tensor. Gradients are accumulated here by backward() and
// consumed (then zeroed) by the optimizer.
struct Param {
  std::string name;
  NdArray value;
  NdArray grad;

  Param() = default;
  Param(std::string n, NdArray v)
      : name(std::move(n)), value(std::move(v)), grad(NdArray::zeros(value.shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kRelu,
  kTanh,
  kExp,
  kLog,
  kSquare,
  kSum,
  kMean,
  kBroadcast,
  kConcat,
  kScale,
};

class Tape;

// Lightweight handle into a Tape. Nodes are evaluated eagerly at
// construction, so the graph always carries a valid forward value.
class Value {
 public:
  Value() = default;
  Value(Tape* t, int32_t i) : tape_(t), idx_(i) {}

  const NdArray& payload() const;
  const NdArray& grad() const;
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int32_t index() const { return idx_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int32_t idx_ = -1;
};

class Tape {
 public:
  struct Node {
    NdArray val;
    NdArray grad;  // empty until backward touches it
    Op op = Op::kLeaf;
    bool requires_grad = false;
    std::array<int32_t, 2> parent{-1, -1};
    int32_t aux = 0;         // concat axis
    double aux_scalar = 0.0; // scale factor
    Param* bound = nullptr;  // leaf bound to a model parameter
  };

  Value leaf(NdArray v, bool requires_grad = false) {
    return push(std::move(v), Op::kLeaf, requires_grad, -1, -1);
  }
  Value constant(NdArray v) { return leaf(std::move(v), false); }

  // Leaf sharing storage semantics with a Param: the value is copied in, and
  // backward() accumulates the leaf gradient into p.grad.
  Value param(Param& p) {
    Value v = push(p.value, Op::kLeaf, true, -1, -1);
    nodes_[static_cast<size_t>(v.index())].bound = &p;
    return v;
  }

  const Node& node(int32_t i) const { return nodes_[static_cast<size_t>(i)]; }
  Node& node(int32_t i) { return nodes_[static_cast<size_t>(i)]; }
  size_t size() const { return nodes_.size(); }

  Value push(NdArray v, Op op, bool rg, int32_t p0, int32_t p1, int32_t aux = 0,
             double aux_scalar = 0.0) {
    Node n;
    n.val = std::move(v);
    n.op = op;
    n.requires_grad = rg;
    n.parent = {p0, p1};
    n.aux = aux;
    n.aux_scalar = aux_scalar;
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<int32_t>(nodes_.size() - 1));
  }

  void ensure_grad(int32_t i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.data.empty()) n.grad = NdArray::zeros(n.val.shape);
  }

 private:
  std::vector<Node> nodes_;
};

inline const NdArray& Value::payload() const { return tape_->node(idx_).val; }
inline const NdArray& Value::grad() const {
  const auto& g = tape_->node(idx_).grad;
  if (g.data.empty())
    throw ValidationError("Value::grad: gradient not populated (run backward first)");
  return g;
}
inline bool Value::requires_grad() const { return tape_->node(idx_).requires_grad; }

namespace detail {

inline bool rg2(const Value& a, const Value& b) { return a.requires_grad() || b.requires_grad(); }

inline void check_same_tape(const Value& a, const Value& b, const char* op) {
  if (a.tape() != b.tape())
    throw ValidationError(std::string(op) + ": operands belong to different tapes");
}

}  // namespace detail

inline Value add(Value a, Value b) {
  detail::check_same_tape(a, b, "add");
  require_same_shape(a.payload(), b.payload(), "add");
  NdArray out = a.payload();
  const auto& bd = b.payload().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
  return a.tape()->push(std::move(out), Op::kAdd, detail::rg2(a, b), a.index(), b.index());
}

inline Value sub(Value a, Value b) {
  detail::check_same_tape(a, b, "sub");
  require_same_shape(a.payload(), b.payload(), "sub");
  NdArray out = a.payload();
  const auto& bd = b.payload().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bd[i];
  return a.tape()->push(std::move(out), Op::kSub, detail::rg2(a, b), a.index(), b.index());
}

inline Value mul(Value a, Value b) {
  detail::check_same_tape(a, b, "mul");
  require_same_shape(a.payload(), b.payload(), "mul");
  NdArray out = a.payload();
  const auto& bd = b.payload().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
  return a.tape()->push(std::move(out), Op::kMul, detail::rg2(a, b), a.index(), b.index());
}

inline Value matmul(Value a, Value b) {
  detail::check_same_tape(a, b, "matmul");
  NdArray out = matmul(a.payload(), b.payload());
  return a.tape()->push(std::move(out), Op::kMatMul, detail::rg2(a, b), a.index(), b.index());
}

inline Value relu(Value x) {
  NdArray out = x.payload();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return x.tape()->push(std::move(out), Op::kRelu, x.requires_grad(), x.index(), -1);
}

inline Value tanh(Value x) {
  NdArray out = x.payload();
  for (double& v : out.data) v = std::tanh(v);
  return x.tape()->push(std::move(out), Op::kTanh, x.requires_grad(), x.index(), -1);
}

inline Value exp(Value x) {
  NdArray out = x.payload();
  for (double& v : out.data) v = std::exp(v);
  return x.tape()->push(std::move(out), Op::kExp, x.requires_grad(), x.index(), -1);
}

inline Value log(Value x) {
  NdArray out = x.payload();
  for (double& v : out.data) {
    if (v <= 0.0)
      throw ValidationError("log: non-positive input " + std::to_string(v));
    v = std::log(v);
  }
  return x.tape()->push(std::move(out), Op::kLog, x.requires_grad(), x.index(), -1);
}

inline Value square(Value x) {
  NdArray out = x.payload();
  for (double& v : out.data) v *= v;
  return x.tape()->push(std::move(out), Op::kSquare, x.requires_grad(), x.index(), -1);
}

inline Value sum(Value x) {
  NdArray out = NdArray::scalar(sum_of(x.payload()));
  return x.tape()->push(std::move(out), Op::kSum, x.requires_grad(), x.index(), -1);
}

inline Value mean(Value x) {
  NdArray out = NdArray::scalar(mean_of(x.payload()));
  return x.tape()->push(std::move(out), Op::kMean, x.requires_grad(), x.index(), -1);
}

inline Value scale(Value x, double s) {
  NdArray out = x.payload();
  for (double& v : out.data) v *= s;
  return x.tape()->push(std::move(out), Op::kScale, x.requires_grad(), x.index(), -1, 0, s);
}

// Expand to `target`. Supported: scalar -> anything, [m] or [1,m] -> [n,m]
// (row replication), [n,1] -> [n,m] (column replication).
inline Value broadcast(Value x, const Shape& target) {
  const NdArray& src = x.payload();
  NdArray out = NdArray::zeros(target);
  const int64_t tn = out.rows(), tm = out.cols();
  if (src.is_scalar()) {
    std::fill(out.data.begin(), out.data.end(), src.data[0]);
  } else if ((src.rank() == 1 && src.shape[0] == tm && target.size() == 2) ||
             (src.rank() == 2 && src.shape[0] == 1 && src.shape[1] == tm)) {
    for (int64_t i = 0; i < tn; ++i)
      for (int64_t j = 0; j < tm; ++j) out.at(i, j) = src.data[static_cast<size_t>(j)];
  } else if (src.rank() == 2 && src.shape[1] == 1 && src.shape[0] == tn) {
    for (int64_t i = 0; i < tn; ++i)
      for (int64_t j = 0; j < tm; ++j) out.at(i, j) = src.data[static_cast<size_t>(i)];
  } else {
    throw ValidationError("broadcast: cannot expand " + shape_str(src.shape) + " to " +
                          shape_str(target));
  }
  return x.tape()->push(std::move(out), Op::kBroadcast, x.requires_grad(), x.index(), -1);
}

inline Value concat(Value a, Value b, int axis) {
  detail::check_same_tape(a, b, "concat");
  const NdArray& x = a.payload();
  const NdArray& y = b.payload();
  if (x.rank() == 1 && y.rank() == 1 && axis == 0) {
    NdArray out = NdArray::zeros({x.shape[0] + y.shape[0]});
    std::copy(x.data.begin(), x.data.end(), out.data.begin());
    std::copy(y.data.begin(), y.data.end(), out.data.begin() + x.numel());
    return a.tape()->push(std::move(out), Op::kConcat, detail::rg2(a, b), a.index(), b.index(), 0);
  }
  if (x.rank() != 2 || y.rank() != 2 || (axis != 0 && axis != 1))
    throw ValidationError("concat: expects rank-2 operands and axis 0/1, got " +
                          shape_str(x.shape) + " vs " + shape_str(y.shape));
  if (axis == 0) {
    if (x.shape[1] != y.shape[1])
      throw ValidationError("shape mismatch in concat: " + shape_str(x.shape) + " vs " +
                            shape_str(y.shape));
    NdArray out = NdArray::zeros({x.shape[0] + y.shape[0], x.shape[1]});
    std::copy(x.data.begin(), x.data.end(), out.data.begin());
    std::copy(y.data.begin(), y.data.end(), out.data.begin() + x.numel());
    return a.tape()->push(std::move(out), Op::kConcat, detail::rg2(a, b), a.index(), b.index(), 0);
  }
  if (x.shape[0] != y.shape[0])
    throw ValidationError("shape mismatch in concat: " + shape_str(x.shape) + " vs " +
                          shape_str(y.shape));
  NdArray out = NdArray::zeros({x.shape[0], x.shape[1] + y.shape[1]});
  for (int64_t i = 0; i < x.shape[0]; ++i) {
    for (int64_t j = 0; j < x.shape[1]; ++j) out.at(i, j) = x.at(i, j);
    for (int64_t j = 0; j < y.shape[1]; ++j) out.at(i, x.shape[1] + j) = y.at(i, j);
  }
  return a.tape()->push(std::move(out), Op::kConcat, detail::rg2(a, b), a.index(), b.index(), 1);
}

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }

// z = mu + exp(0.5 * log_var) o eps, with eps a fixed (caller-seeded) leaf.
inline Value reparameterize(Value mu, Value log_var, Value eps) {
  Value sigma = exp(scale(log_var, 0.5));
  return add(mu, mul(sigma, eps));
}

inline NdArray evaluate_graph(Value root) {
  if (!root.valid()) throw ValidationError("evaluate_graph: empty value");
  return root.payload();
}

namespace detail {

inline void reduce_into(const NdArray& g, NdArray& dst) {
  // Reverse of broadcast: sum g over the replicated axes of dst's shape.
  if (dst.is_scalar()) {
    dst.data[0] += sum_of(g);
    return;
  }
  const int64_t gn = g.rows(), gm = g.cols();
  if ((dst.rank() == 1 && dst.shape[0] == gm) ||
      (dst.rank() == 2 && dst.shape[0] == 1 && dst.shape[1] == gm)) {
    for (int64_t i = 0; i < gn; ++i)
      for (int64_t j = 0; j < gm; ++j) dst.data[static_cast<size_t>(j)] += g.at(i, j);
    return;
  }
  if (dst.rank() == 2 && dst.shape[1] == 1 && dst.shape[0] == gn) {
    for (int64_t i = 0; i < gn; ++i)
      for (int64_t j = 0; j < gm; ++j) dst.data[static_cast<size_t>(i)] += g.at(i, j);
    return;
  }
  throw ValidationError("broadcast backward: cannot reduce " + shape_str(g.shape) + " to " +
                        shape_str(dst.shape));
}

}  // namespace detail

// Reverse pass from a scalar root. Accumulates droot/dleaf into every
// requires_grad leaf (and into the bound Param, when set). Creation order is
// a topological order, so a single reverse index sweep suffices.
inline void backward(Value root) {
  if (!root.valid()) throw ValidationError("backward: empty value");
  if (!root.payload().is_scalar())
    throw ValidationError("backward: root must be scalar, got shape " +
                          shape_str(root.payload().shape));
  Tape& t = *root.tape();
  t.ensure_grad(root.index());
  t.node(root.index()).grad.data[0] = 1.0;

  for (int32_t i = root.index(); i >= 0; --i) {
    Tape::Node& n = t.node(i);
    if (!n.requires_grad || n.grad.data.empty()) continue;
    const NdArray& g = n.grad;
    const int32_t pa = n.parent[0], pb = n.parent[1];
    auto grad_of = [&](int32_t p) -> NdArray& {
      t.ensure_grad(p);
      return t.node(p).grad;
    };
    auto wants = [&](int32_t p) { return p >= 0 && t.node(p).requires_grad; };

    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        if (wants(pa)) {
          auto& ga = grad_of(pa);
          for (size_t j = 0; j < g.data.size(); ++j) ga.data[j] += g.data[j];
        }
        if (wants(pb)) {
          auto& gb = grad_of(pb);
          for (size_t j = 0; j < g.data.size(); ++j) gb.data[j] += g.data[j];
        }
        break;
      }
      case Op::kSub: {
        if (wants(pa)) {
          auto& ga = grad_of(pa);
          for (size_t j = 0; j < g.data.size(); ++j) ga.data[j] += g.data[j];
        }
        if (wants(pb)) {
          auto& gb = grad_of(pb);
          for (size_t j = 0; j < g.data.size(); ++j) gb.data[j] -= g.data[j];
        }
        break;
      }
      case Op::kMul: {
        const NdArray& av = t.node(pa).val;
        const NdArray& bv = t.node(pb).val;
        if (wants(pa)) {
          auto& ga = grad_of(pa);
          for (size_t j = 0; j < g.data.size(); ++j) ga.data[j] += g.data[j] * bv.data[j];
        }
        if (wants(pb)) {
          auto& gb = grad_of(pb);
          for (size_t j = 0; j < g.data.size(); ++j) gb.data[j] += g.data[j] * av.data[j];
        }
        break;
      }
      case Op::kMatMul: {
        const NdArray& av = t.node(pa).val;
        const NdArray& bv = t.node(pb).val;
        const int64_t nn = av.shape[0], kk = av.shape[1], mm = bv.shape[1];
        if (wants(pa))
          matmul_grad_lhs(grad_of(pa).data.data(), g.data.data(), bv.data.data(), nn, kk, mm);
        if (wants(pb))
          matmul_grad_rhs(grad_of(pb).data.data(), av.data.data(), g.data.data(), nn, kk, mm);
        break;
      }
      case Op::kRelu: {
        if (wants(pa)) {
          const NdArray& xv = t.node(pa).val;
          auto& ga = grad_of(pa);
          for (size_t j = 0; j < g.data.size(); ++j)
            if (xv.data[j] > 0.0) ga.data[j] += g.data[j];
        }
        break;
      }
      case Op::kTanh: {
        if (wants(pa)) {
          auto& ga = grad_of(pa);
          for (size_t j = 0; j < g.data.size(); ++j)
            ga.data[j] += g.data[j] * (1.0 - n.val.data[j] * n.val.data[j]);
        }
        break;
      }
      case Op::kExp: {
        if (wants(pa)) {
          auto& ga = grad_of(pa);
          for (size_t j = 0; j < g.data.size(); ++j) ga.data[j] += g.data[j] * n.val.data[j];
        }
        break;
      }
      case Op::kLog: {
        if (wants(pa)) {
          const NdArray& xv = t.node(pa).val;
          auto& ga = grad_of(pa);
          for (size_t j = 0; j < g.data.size(); ++j) ga.data[j] += g.data[j] / xv.data[j];
        }
        break;
      }
      case Op::kSquare: {
        if (wants(pa)) {
          const NdArray& xv = t.node(pa).val;
          auto& ga = grad_of(pa);
          for (size_t j = 0; j < g.data.size(); ++j) ga.data[j] += g.data[j] * 2.0 * xv.data[j];
        }
        break;
      }
      case Op::kSum: {
        if (wants(pa)) {
          auto& ga = grad_of(pa);
          for (double& v : ga.data) v += g.data[0];
        }
        break;
      }
      case Op::kMean: {
        if (wants(pa)) {
          auto& ga = grad_of(pa);
          const double s = g.data[0] / static_cast<double>(ga.numel());
          for (double& v : ga.data) v += s;
        }
        break;
      }
      case Op::kScale: {
        if (wants(pa)) {
          auto& ga = grad_of(pa);
          for (size_t j = 0; j < g.data.size(); ++j) ga.data[j] += g.data[j] * n.aux_scalar;
        }
        break;
      }
      case Op::kBroadcast: {
        if (wants(pa)) detail::reduce_into(g, grad_of(pa));
        break;
      }
      case Op::kConcat: {
        const NdArray& av = t.node(pa).val;
        const NdArray& bv = t.node(pb).val;
        if (n.aux == 0) {
          if (wants(pa)) {
            auto& ga = grad_of(pa);
            for (int64_t j = 0; j < av.numel(); ++j)
              ga.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(j)];
          }
          if (wants(pb)) {
            auto& gb = grad_of(pb);
            for (int64_t j = 0; j < bv.numel(); ++j)
              gb.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(av.numel() + j)];
          }
        } else {
          const int64_t rows = av.shape[0], m1 = av.shape[1], m2 = bv.shape[1];
          if (wants(pa)) {
            auto& ga = grad_of(pa);
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t c = 0; c < m1; ++c) ga.at(r, c) += g.at(r, c);
          }
          if (wants(pb)) {
            auto& gb = grad_of(pb);
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t c = 0; c < m2; ++c) gb.at(r, c) += g.at(r, m1 + c);
          }
        }
        break;
      }
    }
  }

  // Hand leaf gradients to their parameters.
  for (int32_t i = 0; i <= root.index(); ++i) {
    Tape::Node& n = t.node(i);
    if (n.op == Op::kLeaf && n.bound != nullptr && !n.grad.data.empty()) {
      for (size_t j = 0; j < n.grad.data.size(); ++j) n.bound->grad.data[j] += n.grad.data[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking: autodiff vs central finite differences over a list of
// parameters. The builder must be deterministic (fixed noise leaves).

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::vector<std::pair<std::string, double>> per_param;
  double tolerance = 0.0;
  bool pass = false;
};

// Relative error with a floor: tiny gradients are compared absolutely against
// the floor, which keeps finite-difference roundoff from dominating.
inline double grad_rel_err(double a, double b, double floor_ = 1e-3) {
  double denom = std::max({std::fabs(a), std::fabs(b), floor_});
  return std::fabs(a - b) / denom;
}

inline GradCheckReport gradient_check(const std::function<Value(Tape&)>& builder,
                                      std::vector<Param*> params, double tolerance,
                                      double h = 1e-5) {
  GradCheckReport report;
  report.tolerance = tolerance;

  std::vector<NdArray> auto_grads;
  {
    for (Param* p : params) p->zero_grad();
    Tape t;
    Value loss = builder(t);
    backward(loss);
    for (Param* p : params) auto_grads.push_back(p->grad);
    for (Param* p : params) p->zero_grad();
  }

  auto eval = [&]() {
    Tape t;
    return builder(t).payload().data[0];
  };

  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    double worst = 0.0;
    for (size_t e = 0; e < p.value.data.size(); ++e) {
      const double orig = p.value.data[e];
      p.value.data[e] = orig + h;
      const double fplus = eval();
      p.value.data[e] = orig - h;
      const double fminus = eval();
      p.value.data[e] = orig;
      const double fd = (fplus - fminus) / (2.0 * h);
      worst = std::max(worst, grad_rel_err(auto_grads[pi].data[e], fd));
    }
    report.per_param.emplace_back(p.name, worst);
    report.max_rel_err = std::max(report.max_rel_err, worst);
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace dlab
