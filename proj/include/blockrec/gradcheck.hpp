#pragma once

#include <functional>
#include <string>
#include <vector>

#include "blockrec/graph.hpp"

namespace blockrec {

// A scalar-valued differentiable function of a list of tensors. Each call
// must build a fresh graph over the given leaves.
using ScalarFn = std::function<NodeRef<double>(const std::vector<NodeRef<double>>&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_input = -1;
  i64 worst_coord = -1;
};

namespace detail {

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor<double>>& inputs,
                          const char* where) {
  std::vector<NodeRef<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(constant(t));
  auto root = f(leaves);
  contract(root->value.numel() == 1, "grad_check: function must return a scalar");
  const double y = root->value.data[0];
  if (!std::isfinite(y)) throw NumericalError(std::string("grad_check: non-finite value at ") + where);
  return y;
}

}  // namespace detail

// Compares reverse-mode gradients against central finite differences.
// Relative error per coordinate: |analytic - fd| / max(|analytic|, |fd|, 1e-12).
inline GradCheckReport grad_check_report(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                                         double eps = 1e-5) {
  std::vector<NodeRef<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(param(t));
  auto root = f(leaves);
  contract(root->value.numel() == 1, "grad_check: function must return a scalar");
  if (!std::isfinite(root->value.data[0]))
    throw NumericalError("grad_check: non-finite function value at base point");
  backward(root);

  GradCheckReport report;
  for (size_t k = 0; k < inputs.size(); ++k) {
    leaves[k]->ensure_grad();
    const Tensor<double>& analytic = leaves[k]->grad;
    for (i64 c = 0; c < inputs[k].numel(); ++c) {
      const double saved = inputs[k].data[static_cast<size_t>(c)];
      const std::string where =
          "input " + std::to_string(k) + " coordinate " + std::to_string(c);
      inputs[k].data[static_cast<size_t>(c)] = saved + eps;
      const double fp = detail::eval_scalar(f, inputs, where.c_str());
      inputs[k].data[static_cast<size_t>(c)] = saved - eps;
      const double fm = detail::eval_scalar(f, inputs, where.c_str());
      inputs[k].data[static_cast<size_t>(c)] = saved;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic.data[static_cast<size_t>(c)];
      const double denom = std::max({std::abs(an), std::abs(fd), 1e-12});
      const double rel = std::abs(an - fd) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_input = static_cast<int>(k);
        report.worst_coord = c;
      }
    }
  }
  return report;
}

inline double grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                         double eps = 1e-5) {
  return grad_check_report(f, std::move(inputs), eps).max_rel_err;
}

}  // namespace blockrec
