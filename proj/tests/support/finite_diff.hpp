#pragma once

#include <functional>
#include <string>

#include "cradle/nn.hpp"
#include "cradle/tensor.hpp"

namespace cradle::testsupport {

struct FdResult {
  double max_rel_err = 0.0;
  std::string worst_param;
};

/// Central-difference check of reverse-mode gradients over every entry of
/// every parameter. loss_fn must be deterministic (freeze any noise outside).
inline FdResult finite_diff_check(ParamStore& params, const std::function<Var()>& loss_fn,
                                  double h = 1e-5) {
  // Parameters outside the loss's graph keep an explicit zero gradient.
  for (auto& [name, p] : params.items()) {
    (void)name;
    p.zero_grad();
  }
  Var loss = loss_fn();
  backward(loss);
  std::vector<Array> grads;
  for (const auto& [name, p] : params.items()) {
    (void)name;
    grads.push_back(p.grad());
  }

  FdResult result;
  auto& items = params.items();
  for (std::size_t k = 0; k < items.size(); ++k) {
    Var& p = items[k].second;
    Array base = p.value();
    for (Eigen::Index i = 0; i < base.rows(); ++i) {
      for (Eigen::Index j = 0; j < base.cols(); ++j) {
        Array bumped = base;
        bumped(i, j) = base(i, j) + h;
        p.set_value(bumped);
        const double up = loss_fn().scalar();
        bumped(i, j) = base(i, j) - h;
        p.set_value(bumped);
        const double down = loss_fn().scalar();
        p.set_value(base);
        const double fd = (up - down) / (2.0 * h);
        const double ad = grads[k](i, j);
        const double denom = std::max({std::abs(fd), std::abs(ad), 1e-6});
        const double rel = std::abs(fd - ad) / denom;
        if (rel > result.max_rel_err) {
          result.max_rel_err = rel;
          result.worst_param = items[k].first + "(" + std::to_string(i) + "," +
                               std::to_string(j) + ")";
        }
      }
    }
  }
  return result;
}

}  // namespace cradle::testsupport
