#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "residen/tensor.hpp"

namespace residen {

enum class Mode { Train, Eval };

enum class Activation { Swish, Sigmoid, Relu, Linear };

/// Parses "swish" | "sigmoid" | "relu" | "linear"; anything else is a ConfigError.
Activation parse_activation(std::string_view name);
std::string to_string(Activation kind);

// Convolution over NCHW input with zero padding. `b` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad);

template <typename T>
struct MaxPoolResult {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

template <typename T>
MaxPoolResult<T> maxpool2d_with_indices(const Tensor<T>& x, int k, int stride);

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride) {
  return maxpool2d_with_indices(x, k, stride).output;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int k, int stride);

// x[N,F] * w[F,U] + b[U]. `b` may be undefined.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Per-channel batch normalization over (N,H,W). In train mode the running
/// statistics are updated in place: running = (1 - momentum) * running +
/// momentum * batch, with the unbiased batch variance.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                      double momentum = 0.1, double eps = 1e-5);

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x);

template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
  return activation(Activation::Swish, x);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(Activation::Sigmoid, x);
}

// Row-wise softmax of x[N,K].
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

/// Concatenation along axis 1. All other dimensions must agree.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

template <typename T>
Tensor<T> residual_add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return residual_add(a, b);
}

// Elementwise product of equally shaped tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Inverted dropout: train mode zeroes each element with probability p and
/// scales survivors by 1/(1-p). Eval mode and p == 0 return the input handle.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, std::uint64_t seed);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);

// [N, ...] -> [N, prod(...)]
template <typename T>
Tensor<T> flatten(const Tensor<T>& x);

/// Mean binary cross-entropy over all N*A cells; p is clamped to
/// [1e-7, 1 - 1e-7]. Labels must be exactly 0 or 1.
template <typename T>
Tensor<T> bce_multilabel_loss(const Tensor<T>& p, const Tensor<T>& y);

// Mean negative log-softmax probability of the labelled class.
template <typename T>
Tensor<T> crossentropy_loss(const Tensor<T>& logits, const std::vector<int>& labels);

// lambda1 * sum|w| + lambda2 * sum w^2 over all given tensors.
template <typename T>
Tensor<T> l1l2_penalty(const std::vector<Tensor<T>>& params, double lambda1, double lambda2);

inline constexpr double kBceClamp = 1e-7;

}  // namespace residen
