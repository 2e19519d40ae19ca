#include "residen/optim.hpp"

#include <cmath>

namespace residen {

std::size_t Adam::step(ParamSet<float>& params) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  const auto b1 = static_cast<float>(options_.beta1);
  const auto b2 = static_cast<float>(options_.beta2);
  std::size_t updated = 0;
  for (auto& e : params) {
    if (e.buffer || !e.trainable || !e.tensor.has_grad()) continue;
    auto w = e.tensor.mutable_data();
    auto g = e.tensor.grad();
    auto& mom = state_[e.name];
    if (mom.m.size() != w.size()) {
      mom.m.assign(w.size(), 0.0f);
      mom.v.assign(w.size(), 0.0f);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      mom.m[i] = b1 * mom.m[i] + (1.0f - b1) * g[i];
      mom.v[i] = b2 * mom.v[i] + (1.0f - b2) * g[i] * g[i];
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      w[i] -= static_cast<float>(options_.lr * mhat / (std::sqrt(vhat) + options_.eps));
    }
    ++updated;
  }
  return updated;
}

}  // namespace residen
