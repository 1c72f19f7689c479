#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cradle/errors.hpp"

namespace cradle {

using Array = Eigen::ArrayXXd;  // dense 2-D, 64-bit

/// Arithmetic precision for newly created graph nodes. f32 emulates single
/// precision by rounding every op result through float; storage stays f64.
enum class Precision { f64, f32 };
void set_precision(Precision p);
Precision precision();

namespace detail {
struct Node {
  Array value;
  Array grad;
  bool needs_grad = false;
  std::uint64_t id = 0;
  std::string name;  // set for leaves, used in diagnostics
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pushes grad into parents
};
}  // namespace detail

/// Handle to a node of a dynamically built computation graph. Values are
/// computed eagerly on construction; backward(loss) accumulates reverse-mode
/// gradients into every reachable leaf created with Var::param.
class Var {
 public:
  Var() = default;

  static Var constant(Array value);
  static Var constant(double value);  // 1x1
  static Var param(Array value, std::string name);

  bool defined() const { return node_ != nullptr; }
  const Array& value() const { return node_->value; }
  const Array& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const;  // value of a 1x1 tensor
  bool requires_grad() const { return node_ && node_->needs_grad; }
  const std::string& name() const { return node_->name; }

  /// Overwrite a leaf's value in place (optimizer updates). Shape must match.
  void set_value(const Array& v);
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Var make_op(Array value, std::vector<Var> parents,
                     std::function<void(detail::Node&)> backprop);
};

/// Runs reverse-mode accumulation from a 1x1 loss node. Gradients of all
/// reachable nodes are zeroed first, so each backward() stands alone.
void backward(const Var& loss);

// Elementwise binary ops with 2-D numpy-style broadcasting (each dim equal
// or 1 on either side).
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator+(const Var& a, double b);
Var operator+(double a, const Var& b);
Var operator-(const Var& a, double b);
Var operator-(double a, const Var& b);
Var operator*(const Var& a, double b);
Var operator*(double a, const Var& b);
Var operator/(const Var& a, double b);
Var operator/(double a, const Var& b);

Var matmul(const Var& a, const Var& b);

Var relu(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);  // requires strictly positive input
Var lgamma(const Var& a);
Var square(const Var& a);
Var softmax_rows(const Var& a);

Var sum(const Var& a);   // 1x1
Var mean(const Var& a);  // 1x1

Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n);
Var select_rows(const Var& a, const std::vector<Eigen::Index>& idx);

/// Rounds to 0/1 in the forward pass, passes gradients straight through.
Var straight_through_round(const Var& a);
/// Cuts the tape: same value, no gradient flow.
Var detach(const Var& a);

// Stable scalar helpers shared with value-level code.
double softplus_value(double x);
double sigmoid_value(double x);
double softplus_inverse(double y);  // softplus(softplus_inverse(y)) == y
double digamma(double x);

}  // namespace cradle
