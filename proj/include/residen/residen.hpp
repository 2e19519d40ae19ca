#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "residen/json_util.hpp"
#include "residen/network.hpp"

namespace residen {

struct DenseBlockConfig {
  int num_layers = 12;
  int growth_rate = 32;

  int out_channels(int in_channels) const { return in_channels + num_layers * growth_rate; }
};

struct TransitionConfig {
  int out_channels = 256;
};

/// Dense blocks joined by transitions, with an inter-block residual addition
/// at every block boundary after the first, two regularized post-block convs,
/// and a standalone fully connected head.
struct ResiDenConfig {
  int input_size = 128;
  int input_channels = 3;
  int stem_channels = 48;
  std::vector<DenseBlockConfig> blocks{{12, 32}, {12, 32}, {36, 32}};
  int trunk_channels = 256;
  bool skip_connections = true;
  bool block_batchnorm = true;
  std::vector<int> post_convs{128, 256};
  double post_conv_l1 = 0.001;
  double post_conv_l2 = 0.001;
  std::vector<int> head_units{512, 1024, 2048};
  std::vector<double> head_dropout{0.0, 0.4, 0.2};
  int num_aus = 12;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  void validate() const;
  TransitionConfig transition() const { return {trunk_channels}; }
  /// Spatial size entering dense block `b`.
  int block_spatial(std::size_t b) const;
  int flatten_width() const;
  int feature_width() const { return head_units.back(); }
  /// Number of trainable scalars (BN running statistics excluded).
  std::size_t parameter_count() const;

  struct SkipSite {
    std::size_t block;  // the sum feeds this block (0-based)
    Shape transition_output;
    Shape skip_source;  // avgpool of the previous block's input
  };
  /// Shapes at each residual addition for an N=1 input.
  std::vector<SkipSite> skip_sites() const;
};

json to_json(const ResiDenConfig& cfg);
ResiDenConfig residen_config_from_json(const json& j);

/// Channel count after a dense block: in + L * k.
inline int dense_block_out_channels(const DenseBlockConfig& cfg, int in_channels) {
  return cfg.out_channels(in_channels);
}

template <typename T>
struct DenseLayer {
  BatchNorm2d<T> bn;
  bool use_bn = true;
  Conv2d<T> conv;
};

/// One dense block: every layer sees the concatenation of the block input
/// and all previous layer outputs.
template <typename T>
class DenseBlock {
 public:
  DenseBlock() = default;
  DenseBlock(LayerFactory<T>& factory, const std::string& name, const DenseBlockConfig& cfg,
             int in_channels, bool use_bn, double bn_momentum, double bn_eps);

  Tensor<T> operator()(const Tensor<T>& x, Mode mode);
  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }
  std::vector<DenseLayer<T>>& layers() { return layers_; }

 private:
  std::vector<DenseLayer<T>> layers_;
  int in_channels_ = 0;
  int out_channels_ = 0;
};

/// batchnorm -> swish -> 1x1 conv -> 2x2 max pool.
template <typename T>
class Transition {
 public:
  Transition() = default;
  Transition(LayerFactory<T>& factory, const std::string& name, const TransitionConfig& cfg,
             int in_channels, double bn_momentum, double bn_eps);

  Tensor<T> operator()(const Tensor<T>& x, Mode mode);
  Conv2d<T>& conv() { return conv_; }

 private:
  BatchNorm2d<T> bn_;
  Conv2d<T> conv_;
};

template <typename T>
class ResiDen : public Network<T> {
 public:
  struct Trace {
    std::vector<Tensor<T>> block_inputs;
    Tensor<T> last_conv;      // after the final post-block conv and pool
    Tensor<T> features;       // flattened trunk output
    Tensor<T> head_features;  // last hidden head layer
    Tensor<T> logits;
  };

  explicit ResiDen(ResiDenConfig cfg, std::uint64_t seed = 0);

  const ResiDenConfig& config() const { return cfg_; }
  ParamSet<T>& params() override { return params_; }

  /// Full pass; the head is skipped when `with_head` is false.
  Trace trace(const Tensor<T>& x, const ForwardContext& ctx, bool with_head = true);
  Tensor<T> forward_features(const Tensor<T>& x, const ForwardContext& ctx);
  /// Per-AU sigmoid probabilities from the standalone head.
  Tensor<T> forward_standalone(const Tensor<T>& x, const ForwardContext& ctx);

  NetworkOutput<T> run(const Tensor<T>& x, const ForwardContext& ctx) override;
  Tensor<T> penalty() override;
  std::size_t input_size() const override { return static_cast<std::size_t>(cfg_.input_size); }
  std::size_t num_outputs() const override { return static_cast<std::size_t>(cfg_.num_aus); }

  std::vector<DenseBlock<T>>& blocks() { return blocks_; }
  std::vector<Transition<T>>& transitions() { return transitions_; }

 private:
  void check_input(const Tensor<T>& x) const;

  ResiDenConfig cfg_;
  ParamSet<T> params_;
  Conv2d<T> stem_;
  std::vector<DenseBlock<T>> blocks_;
  std::vector<Transition<T>> transitions_;
  std::vector<Conv2d<T>> post_convs_;
  std::vector<Linear<T>> head_;
  Linear<T> out_;
};

}  // namespace residen
