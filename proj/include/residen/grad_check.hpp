#pragma once

#include <functional>
#include <string>
#include <vector>

#include "residen/tensor.hpp"

namespace residen {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compares the tape gradient of the scalar `f()` with respect to every tensor
/// in `wrt` against central differences (f(x + eps e) - f(x - eps e)) / 2eps.
/// `f` must read the `wrt` tensors by handle; they are perturbed in place and
/// restored. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<Tensor<double>> wrt, double eps = 1e-5,
                           double floor = 1e-6);

/// Single-input form: checks d f(x) / dx.
GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           const Tensor<double>& x, double eps = 1e-5, double floor = 1e-6);

}  // namespace residen
