#pragma once
// Finite-difference verification of reverse-mode gradients.
//
// For a scalar function f over a set of parameter tensors, compares
// d f / d p from one backward pass against central differences
// (f(p+h) - f(p-h)) / 2h per coordinate. Agreement is reported as the
// worst relative error max |a - n| / max(1, |a|, |n|).

#include <functional>
#include <string>
#include <vector>

#include "docfuse/common.hpp"
#include "docfuse/tensor.hpp"

namespace docfuse {

template <typename S>
struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  std::string worst;  // "tensor#k[i]" for the worst coordinate
};

// fn must rebuild the graph from scratch on a fresh tape and return the
// scalar loss; params are perturbed in place between calls.
template <typename S>
GradCheckResult<S> grad_check(const std::function<TensorPtr<S>(Tape<S>&)>& fn,
                              const std::vector<TensorPtr<S>>& params,
                              double h = 1e-4) {
  for (const auto& p : params)
    if (!p->requires_grad)
      throw ValidationError("grad_check param does not require grad");
  Tape<S> tape;
  for (const auto& p : params) p->zero_grad();
  auto loss = fn(tape);
  tape.backward(loss);
  std::vector<std::vector<S>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    p->ensure_grad();
    analytic.push_back(p->grad);
  }

  GradCheckResult<S> res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (int64_t i = 0; i < p->size(); ++i) {
      const S saved = p->data[i];
      Tape<S> t_plus;
      p->data[i] = static_cast<S>(saved + h);
      const double f_plus = static_cast<double>(fn(t_plus)->data[0]);
      Tape<S> t_minus;
      p->data[i] = static_cast<S>(saved - h);
      const double f_minus = static_cast<double>(fn(t_minus)->data[0]);
      p->data[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "tensor#" + std::to_string(pi) + "[" + std::to_string(i) + "]";
      }
      ++res.checked;
    }
  }
  return res;
}

}  // namespace docfuse
