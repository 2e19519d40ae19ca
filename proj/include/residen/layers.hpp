#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "residen/ops.hpp"
#include "residen/rng.hpp"

namespace residen {

/// Per-call forward settings. Dropout layers derive their mask seed from
/// `seed` and their own index, so a forward pass is reproducible.
struct ForwardContext {
  Mode mode = Mode::Eval;
  std::uint64_t seed = 0;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [K,C,kh,kw]
  Tensor<T> bias;    // [K]
  int stride = 1;
  int pad = 0;

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
  std::size_t out_channels() const { return weight.dim(0); }
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [F,U]
  Tensor<T> bias;    // [U]

  Tensor<T> operator()(const Tensor<T>& x) const { return dense(x, weight, bias); }
  std::size_t out_features() const { return weight.dim(1); }
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, mode, momentum, eps);
  }
};

/// Creates layers with He-scaled normal weights, zero biases, unit BN scale,
/// and registers every tensor in the owning ParamSet under `prefix.name`.
template <typename T>
class LayerFactory {
 public:
  LayerFactory(ParamSet<T>& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  Conv2d<T> conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                 int stride = 1, int pad = 0) {
    Conv2d<T> c;
    c.weight = normal(Shape{out, in, k, k}, std::sqrt(2.0 / static_cast<double>(in * k * k)));
    c.bias = Tensor<T>::zeros(Shape{out});
    c.stride = stride;
    c.pad = pad;
    params_.add(name + ".weight", c.weight);
    params_.add(name + ".bias", c.bias);
    return c;
  }

  Linear<T> linear(const std::string& name, std::size_t in, std::size_t out) {
    Linear<T> l;
    l.weight = normal(Shape{in, out}, std::sqrt(2.0 / static_cast<double>(in)));
    l.bias = Tensor<T>::zeros(Shape{out});
    params_.add(name + ".weight", l.weight);
    params_.add(name + ".bias", l.bias);
    return l;
  }

  BatchNorm2d<T> batchnorm(const std::string& name, std::size_t channels) {
    BatchNorm2d<T> bn;
    bn.gamma = Tensor<T>::full(Shape{channels}, T(1));
    bn.beta = Tensor<T>::zeros(Shape{channels});
    bn.running_mean = Tensor<T>::zeros(Shape{channels});
    bn.running_var = Tensor<T>::full(Shape{channels}, T(1));
    params_.add(name + ".gamma", bn.gamma);
    params_.add(name + ".beta", bn.beta);
    params_.add_buffer(name + ".running_mean", bn.running_mean);
    params_.add_buffer(name + ".running_var", bn.running_var);
    return bn;
  }

 private:
  Tensor<T> normal(const Shape& shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    return Tensor<T>(shape, std::move(v));
  }

  ParamSet<T>& params_;
  std::mt19937_64 rng_;
};

}  // namespace residen
