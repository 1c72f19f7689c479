#include "cradle/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace cradle {

namespace {

Precision g_precision = Precision::f64;
std::atomic<std::uint64_t> g_next_id{1};

Array round_precision(Array v) {
  if (g_precision == Precision::f32) {
    v = v.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
  }
  return v;
}

void check_broadcast(const Array& a, const Array& b, const char* op) {
  const bool rows_ok = a.rows() == b.rows() || a.rows() == 1 || b.rows() == 1;
  const bool cols_ok = a.cols() == b.cols() || a.cols() == 1 || b.cols() == 1;
  if (!rows_ok || !cols_ok) {
    throw NumericError(std::string(op) + ": shapes (" + std::to_string(a.rows()) + "," +
                       std::to_string(a.cols()) + ") and (" + std::to_string(b.rows()) + "," +
                       std::to_string(b.cols()) + ") do not broadcast");
  }
}

Array broadcast_to(const Array& a, Eigen::Index r, Eigen::Index c) {
  if (a.rows() == r && a.cols() == c) return a;
  Array out(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      out(i, j) = a(a.rows() == 1 ? 0 : i, a.cols() == 1 ? 0 : j);
  return out;
}

// Sum g back down to the operand's shape (reverse of broadcast_to).
Array reduce_to(const Array& g, Eigen::Index r, Eigen::Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  Array out = g;
  if (r == 1 && out.rows() > 1) {
    Array tmp = out.colwise().sum();
    out = std::move(tmp);
  }
  if (c == 1 && out.cols() > 1) {
    Array tmp = out.rowwise().sum();
    out = std::move(tmp);
  }
  return out;
}

}  // namespace

void set_precision(Precision p) { g_precision = p; }
Precision precision() { return g_precision; }

Var make_op(Array value, std::vector<Var> parents, std::function<void(detail::Node&)> backprop) {
  auto n = std::make_shared<detail::Node>();
  n->value = round_precision(std::move(value));
  n->id = g_next_id.fetch_add(1);
  bool needs = false;
  for (const auto& p : parents) {
    n->parents.push_back(p.node());
    needs = needs || p.requires_grad();
  }
  n->needs_grad = needs;
  if (needs) n->backprop = std::move(backprop);
  return Var(std::move(n));
}

Var Var::constant(Array value) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  n->id = g_next_id.fetch_add(1);
  return Var(std::move(n));
}

Var Var::constant(double value) {
  Array a(1, 1);
  a(0, 0) = value;
  return constant(std::move(a));
}

Var Var::param(Array value, std::string name) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  n->id = g_next_id.fetch_add(1);
  n->needs_grad = true;
  n->name = std::move(name);
  return Var(std::move(n));
}

double Var::scalar() const {
  if (rows() != 1 || cols() != 1)
    throw NumericError("scalar() on tensor of shape (" + std::to_string(rows()) + "," +
                       std::to_string(cols()) + ")");
  return node_->value(0, 0);
}

void Var::set_value(const Array& v) {
  if (v.rows() != rows() || v.cols() != cols())
    throw NumericError("set_value: shape mismatch on '" + node_->name + "'");
  node_->value = v;
}

void Var::zero_grad() {
  if (node_) node_->grad = Array::Zero(rows(), cols());
}

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw NumericError("backward: loss must be 1x1");
  // Topological order by creation id (ids increase along data flow).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });
  for (auto* n : order) n->grad = Array::Zero(n->value.rows(), n->value.cols());
  loss.node()->grad(0, 0) = 1.0;
  for (auto* n : order) {
    if (n->backprop) n->backprop(*n);
  }
}

namespace {

void add_grad(detail::Node& parent, const Array& g) {
  if (!parent.needs_grad) return;
  parent.grad += reduce_to(g, parent.value.rows(), parent.value.cols());
}

Var binary_op(const Var& a, const Var& b, const char* name,
              const std::function<Array(const Array&, const Array&)>& fwd,
              const std::function<void(detail::Node&, detail::Node&, detail::Node&)>& bwd) {
  check_broadcast(a.value(), b.value(), name);
  const Eigen::Index r = std::max(a.rows(), b.rows());
  const Eigen::Index c = std::max(a.cols(), b.cols());
  Array av = broadcast_to(a.value(), r, c);
  Array bv = broadcast_to(b.value(), r, c);
  return make_op(fwd(av, bv), {a, b}, [bwd](detail::Node& n) {
    bwd(n, *n.parents[0], *n.parents[1]);
  });
}

}  // namespace

Var operator+(const Var& a, const Var& b) {
  return binary_op(a, b, "add",
                   [](const Array& x, const Array& y) { return Array(x + y); },
                   [](detail::Node& n, detail::Node& pa, detail::Node& pb) {
                     add_grad(pa, n.grad);
                     add_grad(pb, n.grad);
                   });
}

Var operator-(const Var& a, const Var& b) {
  return binary_op(a, b, "sub",
                   [](const Array& x, const Array& y) { return Array(x - y); },
                   [](detail::Node& n, detail::Node& pa, detail::Node& pb) {
                     add_grad(pa, n.grad);
                     add_grad(pb, Array(-n.grad));
                   });
}

Var operator*(const Var& a, const Var& b) {
  const Eigen::Index r = std::max(a.rows(), b.rows());
  const Eigen::Index c = std::max(a.cols(), b.cols());
  check_broadcast(a.value(), b.value(), "mul");
  Array av = broadcast_to(a.value(), r, c);
  Array bv = broadcast_to(b.value(), r, c);
  return make_op(Array(av * bv), {a, b}, [av, bv](detail::Node& n) {
    add_grad(*n.parents[0], Array(n.grad * bv));
    add_grad(*n.parents[1], Array(n.grad * av));
  });
}

Var operator/(const Var& a, const Var& b) {
  const Eigen::Index r = std::max(a.rows(), b.rows());
  const Eigen::Index c = std::max(a.cols(), b.cols());
  check_broadcast(a.value(), b.value(), "div");
  Array av = broadcast_to(a.value(), r, c);
  Array bv = broadcast_to(b.value(), r, c);
  if ((bv == 0.0).any()) throw NumericError("div: division by zero");
  return make_op(Array(av / bv), {a, b}, [av, bv](detail::Node& n) {
    add_grad(*n.parents[0], Array(n.grad / bv));
    add_grad(*n.parents[1], Array(-n.grad * av / (bv * bv)));
  });
}

Var operator-(const Var& a) { return a * -1.0; }
Var operator+(const Var& a, double b) { return a + Var::constant(b); }
Var operator+(double a, const Var& b) { return Var::constant(a) + b; }
Var operator-(const Var& a, double b) { return a - Var::constant(b); }
Var operator-(double a, const Var& b) { return Var::constant(a) - b; }
Var operator*(const Var& a, double b) { return a * Var::constant(b); }
Var operator*(double a, const Var& b) { return Var::constant(a) * b; }
Var operator/(const Var& a, double b) { return a / Var::constant(b); }
Var operator/(double a, const Var& b) { return Var::constant(a) / b; }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw NumericError("matmul: inner dims " + std::to_string(a.cols()) + " vs " +
                       std::to_string(b.rows()));
  Array out = (a.value().matrix() * b.value().matrix()).array();
  Array av = a.value(), bv = b.value();
  return make_op(std::move(out), {a, b}, [av, bv](detail::Node& n) {
    add_grad(*n.parents[0], Array((n.grad.matrix() * bv.matrix().transpose()).array()));
    add_grad(*n.parents[1], Array((av.matrix().transpose() * n.grad.matrix()).array()));
  });
}

namespace {

Var unary_op(const Var& a, Array value, std::function<Array(const detail::Node&)> dval) {
  return make_op(std::move(value), {a}, [dval](detail::Node& n) {
    add_grad(*n.parents[0], Array(n.grad * dval(n)));
  });
}

}  // namespace

Var relu(const Var& a) {
  Array mask = (a.value() > 0.0).cast<double>();
  return unary_op(a, Array(a.value().max(0.0)), [mask](const detail::Node&) { return mask; });
}

double softplus_value(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_inverse(double y) {
  if (y <= 0.0) throw NumericError("softplus_inverse: nonpositive input");
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

Var softplus(const Var& a) {
  Array out = a.value().unaryExpr(&softplus_value);
  Array d = a.value().unaryExpr(&sigmoid_value);
  return unary_op(a, std::move(out), [d](const detail::Node&) { return d; });
}

Var sigmoid(const Var& a) {
  Array out = a.value().unaryExpr(&sigmoid_value);
  return unary_op(a, out, [out](const detail::Node&) { return Array(out * (1.0 - out)); });
}

Var exp(const Var& a) {
  Array out = a.value().exp();
  return unary_op(a, out, [out](const detail::Node&) { return out; });
}

Var log(const Var& a) {
  if ((a.value() <= 0.0).any()) throw NumericError("log: nonpositive input");
  Array inv = a.value().inverse();
  return unary_op(a, Array(a.value().log()), [inv](const detail::Node&) { return inv; });
}

Var lgamma(const Var& a) {
  if ((a.value() <= 0.0).any()) throw NumericError("lgamma: nonpositive input");
  Array out = a.value().unaryExpr([](double x) { return std::lgamma(x); });
  Array d = a.value().unaryExpr(&digamma);
  return unary_op(a, std::move(out), [d](const detail::Node&) { return d; });
}

Var square(const Var& a) { return a * a; }

Var softmax_rows(const Var& a) {
  Array out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    Eigen::ArrayXd row = a.value().row(i);
    row -= row.maxCoeff();
    row = row.exp();
    out.row(i) = row / row.sum();
  }
  return make_op(out, {a}, [out](detail::Node& n) {
    Array g(out.rows(), out.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const double dot = (n.grad.row(i) * out.row(i)).sum();
      g.row(i) = out.row(i) * (n.grad.row(i) - dot);
    }
    add_grad(*n.parents[0], g);
  });
}

Var sum(const Var& a) {
  Array out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op(out, {a}, [](detail::Node& n) {
    add_grad(*n.parents[0],
             Array::Constant(n.parents[0]->value.rows(), n.parents[0]->value.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) { return sum(a) / static_cast<double>(a.value().size()); }

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw NumericError("concat_cols: no inputs");
  const Eigen::Index r = parts.front().rows();
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw NumericError("concat_cols: row mismatch");
    c += p.cols();
  }
  Array out(r, c);
  Eigen::Index at = 0;
  std::vector<Eigen::Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op(std::move(out), parts, [offsets](detail::Node& n) {
    for (size_t k = 0; k < n.parents.size(); ++k) {
      add_grad(*n.parents[k], Array(n.grad.middleCols(offsets[k], n.parents[k]->value.cols())));
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw NumericError("slice_cols: out of range");
  Array out = a.value().middleCols(start, n);
  return make_op(std::move(out), {a}, [start, n](detail::Node& nd) {
    Array g = Array::Zero(nd.parents[0]->value.rows(), nd.parents[0]->value.cols());
    g.middleCols(start, n) = nd.grad;
    add_grad(*nd.parents[0], g);
  });
}

Var select_rows(const Var& a, const std::vector<Eigen::Index>& idx) {
  Array out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= a.rows()) throw NumericError("select_rows: index out of range");
    out.row(static_cast<Eigen::Index>(k)) = a.value().row(idx[k]);
  }
  return make_op(std::move(out), {a}, [idx](detail::Node& n) {
    Array g = Array::Zero(n.parents[0]->value.rows(), n.parents[0]->value.cols());
    for (size_t k = 0; k < idx.size(); ++k) g.row(idx[k]) += n.grad.row(static_cast<Eigen::Index>(k));
    add_grad(*n.parents[0], g);
  });
}

Var straight_through_round(const Var& a) {
  Array out = a.value().round();
  return make_op(std::move(out), {a}, [](detail::Node& n) { add_grad(*n.parents[0], n.grad); });
}

Var detach(const Var& a) { return Var::constant(a.value()); }

// Recurrence to x >= 6, then the asymptotic series; ~1e-12 on [1e-3, 1e6].
double digamma(double x) {
  if (x <= 0.0) throw NumericError("digamma: nonpositive input");
  double result = 0.0;
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)));
  return result;
}

}  // namespace cradle
