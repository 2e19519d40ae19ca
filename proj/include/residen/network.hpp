#pragma once

#include "residen/layers.hpp"

namespace residen {

template <typename T>
struct NetworkOutput {
  Tensor<T> logits;       // pre-sigmoid / pre-softmax scores [N, outputs]
  Tensor<T> feature_map;  // last convolutional activation [N, C, h, w]
};

/// Common surface used by training, evaluation and visualization.
template <typename T>
class Network {
 public:
  virtual ~Network() = default;

  virtual ParamSet<T>& params() = 0;
  virtual NetworkOutput<T> run(const Tensor<T>& x, const ForwardContext& ctx) = 0;
  /// Regularization term added to the training loss; undefined when none.
  virtual Tensor<T> penalty() = 0;
  virtual std::size_t input_size() const = 0;
  virtual std::size_t num_outputs() const = 0;

  Tensor<T> logits(const Tensor<T>& x, const ForwardContext& ctx) { return run(x, ctx).logits; }
};

}  // namespace residen
