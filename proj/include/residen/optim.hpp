#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "residen/tensor.hpp"

namespace residen {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer. Moments are keyed by parameter name so the
/// state survives a checkpoint round trip.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  /// Updates every trainable, non-buffer parameter that holds a gradient.
  /// Returns the number of tensors updated.
  std::size_t step(ParamSet<float>& params);

  const AdamOptions& options() const { return options_; }
  std::uint64_t steps() const { return steps_; }

  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
  };
  const std::unordered_map<std::string, Moments>& state() const { return state_; }
  void restore(std::uint64_t steps, std::unordered_map<std::string, Moments> state) {
    steps_ = steps;
    state_ = std::move(state);
  }

 private:
  AdamOptions options_;
  std::uint64_t steps_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

}  // namespace residen
