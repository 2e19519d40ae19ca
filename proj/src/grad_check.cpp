#include "residen/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace residen {

GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<Tensor<double>> wrt, double eps, double floor) {
  std::vector<bool> saved_flags;
  for (auto& t : wrt) {
    saved_flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> y = f();
    tape.backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : wrt) {
    analytic.emplace_back(t.mutable_grad().begin(), t.mutable_grad().end());
    t.clear_grad();
  }

  GradCheckResult result;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto values = wrt[ti].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double plus = f().item();
      values[i] = orig - eps;
      const double minus = f().item();
      values[i] = orig;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[ti][i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
      ++result.coordinates;
    }
  }
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) wrt[ti].set_requires_grad(saved_flags[ti]);
  return result;
}

GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           const Tensor<double>& x, double eps, double floor) {
  Tensor<double> input = x;
  return grad_check([&]() { return f(input); }, {input}, eps, floor);
}

}  // namespace residen
