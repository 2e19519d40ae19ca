#pragma once

#include <random>
#include <vector>

#include "residen/ops.hpp"

namespace residen::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(shape, std::move(v), requires_grad);
}

// Values spaced at least `gap` apart in random order, so pooling windows have
// no near-ties under finite-difference perturbation.
inline Tensor<double> distinct_tensor(const Shape& shape, std::mt19937_64& rng, double gap = 0.01) {
  std::vector<double> v(shape_numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (static_cast<double>(i) - v.size() / 2.0) * gap;
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor<double>(shape, std::move(v));
}

// Scalar probe sum(y * r) with a fixed random r, so every output element
// contributes a distinct weight to the checked gradient.
template <typename T>
Tensor<T> probe(const Tensor<T>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor<T>(y.shape(), rng)));
}

}  // namespace residen::testing

#include "residen/residen.hpp"

namespace residen::testing {

// Trunk small enough for finite differences: 16x16 input, B1 at 8x8.
inline ResiDenConfig tiny_residen(int input_size = 16, int num_aus = 3) {
  ResiDenConfig cfg;
  cfg.input_size = input_size;
  cfg.stem_channels = 3;
  cfg.blocks = {{1, 2}, {1, 2}, {1, 2}};
  cfg.trunk_channels = 4;
  cfg.post_convs = {4};
  cfg.head_units = {6, 5};
  cfg.head_dropout = {0.0, 0.2};
  cfg.num_aus = num_aus;
  return cfg;
}

}  // namespace residen::testing

#include "residen/fusion.hpp"

namespace residen::testing {

inline ExpressionConfig tiny_expression(int input_size = 16, int num_classes = 6) {
  ExpressionConfig cfg;
  cfg.num_classes = num_classes;
  cfg.cnn.input_size = input_size;
  cfg.cnn.conv_filters = {3, 4};
  cfg.cnn.pool_after = {true, true};
  cfg.cnn.fc_units = {6, 5};
  cfg.cnn.fc_dropout = {0.4, 0.0};
  cfg.cnn.num_classes = num_classes;
  cfg.residen = tiny_residen(input_size, num_classes);
  return cfg;
}

inline FusionConfig tiny_fusion(int input_size = 16, int num_aus = 3) {
  FusionConfig cfg;
  cfg.image = tiny_residen(input_size, num_aus);
  cfg.expression = tiny_expression(input_size);
  cfg.image_feature_width = cfg.image.flatten_width();
  cfg.expr_feature_width = 3;
  cfg.reducer_units = {4, 3};
  cfg.head_units = {5, 4};
  cfg.head_dropout = {0.0, 0.0};
  cfg.num_aus = num_aus;
  return cfg;
}

}  // namespace residen::testing
