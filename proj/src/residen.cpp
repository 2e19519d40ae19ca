#include "residen/residen.hpp"

namespace residen {

void ResiDenConfig::validate() const {
  if (input_channels < 1 || stem_channels < 1 || trunk_channels < 1 || num_aus < 1) {
    throw ConfigError("residen: channel counts and num_aus must be >= 1");
  }
  if (blocks.empty()) throw ConfigError("residen: at least one dense block is required");
  for (const auto& b : blocks) {
    if (b.num_layers < 1 || b.growth_rate < 1) {
      throw ConfigError("residen: dense blocks need num_layers >= 1 and growth_rate >= 1");
    }
  }
  if (post_convs.empty()) throw ConfigError("residen: post_convs must list at least one conv");
  for (int c : post_convs) {
    if (c < 1) throw ConfigError("residen: post_convs widths must be >= 1");
  }
  if (head_units.empty()) throw ConfigError("residen: head_units must not be empty");
  if (head_dropout.size() != head_units.size()) {
    throw ConfigError("residen: head_dropout needs one rate per head layer");
  }
  for (int u : head_units) {
    if (u < 1) throw ConfigError("residen: head widths must be >= 1");
  }
  for (double p : head_dropout) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("residen: dropout rates must lie in [0, 1)");
  }
  if (post_conv_l1 < 0 || post_conv_l2 < 0) throw ConfigError("residen: penalties must be >= 0");
  const std::size_t pools = 1 + (blocks.size() - 1) + post_convs.size();
  if (input_size < 1 || pools >= 31 || input_size % (1 << pools) != 0) {
    throw ConfigError("residen: input_size " + std::to_string(input_size) + " must be divisible by 2^" +
                      std::to_string(pools) + " (one halving per pool)");
  }
  for (const auto& site : skip_sites()) {
    if (site.transition_output != site.skip_source) {
      throw ConfigError("residen: skip connection into block " + std::to_string(site.block + 1) +
                        " joins mismatched shapes " + shape_str(site.transition_output) + " and " +
                        shape_str(site.skip_source));
    }
  }
}

int ResiDenConfig::block_spatial(std::size_t b) const {
  return (input_size / 2) >> b;
}

int ResiDenConfig::flatten_width() const {
  const int spatial = block_spatial(blocks.size() - 1) >> post_convs.size();
  return post_convs.back() * spatial * spatial;
}

std::size_t ResiDenConfig::parameter_count() const {
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + out; };
  std::size_t n = conv(input_channels, stem_channels, 3);
  std::size_t channels = stem_channels;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (int i = 0; i < blocks[b].num_layers; ++i) {
      const std::size_t in = channels + static_cast<std::size_t>(i * blocks[b].growth_rate);
      if (block_batchnorm) n += 2 * in;
      n += conv(in, blocks[b].growth_rate, 3);
    }
    channels = dense_block_out_channels(blocks[b], static_cast<int>(channels));
    if (b + 1 < blocks.size()) {
      n += 2 * channels + conv(channels, trunk_channels, 1);
      channels = trunk_channels;
    }
  }
  for (int c : post_convs) {
    n += conv(channels, c, 3);
    channels = c;
  }
  std::size_t width = flatten_width();
  for (int u : head_units) {
    n += width * u + u;
    width = u;
  }
  return n + width * num_aus + num_aus;
}

std::vector<ResiDenConfig::SkipSite> ResiDenConfig::skip_sites() const {
  std::vector<SkipSite> sites;
  if (!skip_connections) return sites;
  int channels_in = stem_channels;
  for (std::size_t b = 0; b + 1 < blocks.size(); ++b) {
    // The transition after block b feeds block b+1; a skip exists from the
    // input of block b whenever b is not the first block.
    if (b >= 1) {
      const auto s = static_cast<std::size_t>(block_spatial(b));
      const auto t = static_cast<std::size_t>(trunk_channels);
      sites.push_back(SkipSite{b + 1, Shape{1, t, s / 2, s / 2},
                               Shape{1, static_cast<std::size_t>(channels_in), s / 2, s / 2}});
    }
    channels_in = trunk_channels;
  }
  return sites;
}

json to_json(const ResiDenConfig& cfg) {
  json blocks = json::array();
  for (const auto& b : cfg.blocks) blocks.push_back({{"num_layers", b.num_layers}, {"growth_rate", b.growth_rate}});
  return json{{"input_size", cfg.input_size},
              {"input_channels", cfg.input_channels},
              {"stem_channels", cfg.stem_channels},
              {"blocks", blocks},
              {"trunk_channels", cfg.trunk_channels},
              {"skip_connections", cfg.skip_connections},
              {"block_batchnorm", cfg.block_batchnorm},
              {"post_convs", cfg.post_convs},
              {"post_conv_l1", cfg.post_conv_l1},
              {"post_conv_l2", cfg.post_conv_l2},
              {"head_units", cfg.head_units},
              {"head_dropout", cfg.head_dropout},
              {"num_aus", cfg.num_aus},
              {"bn_momentum", cfg.bn_momentum},
              {"bn_eps", cfg.bn_eps}};
}

ResiDenConfig residen_config_from_json(const json& j) {
  const std::string ctx = "residen";
  reject_unknown_keys(j, {"input_size", "input_channels", "stem_channels", "blocks", "trunk_channels",
                          "skip_connections", "block_batchnorm", "post_convs", "post_conv_l1",
                          "post_conv_l2", "head_units", "head_dropout", "num_aus", "bn_momentum",
                          "bn_eps"},
                      ctx);
  ResiDenConfig cfg;
  read_opt(j, "input_size", cfg.input_size, ctx);
  read_opt(j, "input_channels", cfg.input_channels, ctx);
  read_opt(j, "stem_channels", cfg.stem_channels, ctx);
  if (auto it = j.find("blocks"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("residen.blocks: expected an array");
    cfg.blocks.clear();
    for (const auto& b : *it) {
      reject_unknown_keys(b, {"num_layers", "growth_rate"}, "residen.blocks[]");
      DenseBlockConfig block;
      read_opt(b, "num_layers", block.num_layers, "residen.blocks[]");
      read_opt(b, "growth_rate", block.growth_rate, "residen.blocks[]");
      cfg.blocks.push_back(block);
    }
  }
  read_opt(j, "trunk_channels", cfg.trunk_channels, ctx);
  read_opt(j, "skip_connections", cfg.skip_connections, ctx);
  read_opt(j, "block_batchnorm", cfg.block_batchnorm, ctx);
  read_opt(j, "post_convs", cfg.post_convs, ctx);
  read_opt(j, "post_conv_l1", cfg.post_conv_l1, ctx);
  read_opt(j, "post_conv_l2", cfg.post_conv_l2, ctx);
  read_opt(j, "head_units", cfg.head_units, ctx);
  read_opt(j, "head_dropout", cfg.head_dropout, ctx);
  read_opt(j, "num_aus", cfg.num_aus, ctx);
  read_opt(j, "bn_momentum", cfg.bn_momentum, ctx);
  read_opt(j, "bn_eps", cfg.bn_eps, ctx);
  cfg.validate();
  return cfg;
}

template <typename T>
DenseBlock<T>::DenseBlock(LayerFactory<T>& factory, const std::string& name,
                          const DenseBlockConfig& cfg, int in_channels, bool use_bn,
                          double bn_momentum, double bn_eps)
    : in_channels_(in_channels), out_channels_(cfg.out_channels(in_channels)) {
  for (int i = 0; i < cfg.num_layers; ++i) {
    const auto in = static_cast<std::size_t>(in_channels + i * cfg.growth_rate);
    const std::string layer = name + ".layer" + std::to_string(i);
    DenseLayer<T> l;
    l.use_bn = use_bn;
    if (use_bn) {
      l.bn = factory.batchnorm(layer + ".bn", in);
      l.bn.momentum = bn_momentum;
      l.bn.eps = bn_eps;
    }
    l.conv = factory.conv(layer + ".conv", in, static_cast<std::size_t>(cfg.growth_rate), 3, 1, 1);
    layers_.push_back(std::move(l));
  }
}

template <typename T>
Tensor<T> DenseBlock<T>::operator()(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = x;
  for (auto& layer : layers_) {
    Tensor<T> z = layer.use_bn ? layer.bn(h, mode) : h;
    Tensor<T> grown = layer.conv(swish(z));
    h = concat_channels<T>({h, grown});
  }
  return h;
}

template <typename T>
Transition<T>::Transition(LayerFactory<T>& factory, const std::string& name,
                          const TransitionConfig& cfg, int in_channels, double bn_momentum,
                          double bn_eps) {
  bn_ = factory.batchnorm(name + ".bn", static_cast<std::size_t>(in_channels));
  bn_.momentum = bn_momentum;
  bn_.eps = bn_eps;
  conv_ = factory.conv(name + ".conv", static_cast<std::size_t>(in_channels),
                       static_cast<std::size_t>(cfg.out_channels), 1, 1, 0);
}

template <typename T>
Tensor<T> Transition<T>::operator()(const Tensor<T>& x, Mode mode) {
  return maxpool2d(conv_(swish(bn_(x, mode))), 2, 2);
}

template <typename T>
ResiDen<T>::ResiDen(ResiDenConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  LayerFactory<T> factory(params_, seed);
  stem_ = factory.conv("stem.conv", cfg_.input_channels, cfg_.stem_channels, 3, 1, 1);
  int channels = cfg_.stem_channels;
  for (std::size_t b = 0; b < cfg_.blocks.size(); ++b) {
    blocks_.emplace_back(factory, "block" + std::to_string(b + 1), cfg_.blocks[b], channels,
                         cfg_.block_batchnorm, cfg_.bn_momentum, cfg_.bn_eps);
    channels = blocks_.back().out_channels();
    if (b + 1 < cfg_.blocks.size()) {
      transitions_.emplace_back(factory, "transition" + std::to_string(b + 1), cfg_.transition(),
                                channels, cfg_.bn_momentum, cfg_.bn_eps);
      channels = cfg_.trunk_channels;
    }
  }
  for (std::size_t i = 0; i < cfg_.post_convs.size(); ++i) {
    post_convs_.push_back(factory.conv("post" + std::to_string(i + 1) + ".conv",
                                       static_cast<std::size_t>(channels),
                                       static_cast<std::size_t>(cfg_.post_convs[i]), 3, 1, 1));
    channels = cfg_.post_convs[i];
  }
  std::size_t width = static_cast<std::size_t>(cfg_.flatten_width());
  for (std::size_t i = 0; i < cfg_.head_units.size(); ++i) {
    head_.push_back(factory.linear("head.fc" + std::to_string(i + 1), width,
                                   static_cast<std::size_t>(cfg_.head_units[i])));
    width = static_cast<std::size_t>(cfg_.head_units[i]);
  }
  out_ = factory.linear("head.out", width, static_cast<std::size_t>(cfg_.num_aus));
}

template <typename T>
void ResiDen<T>::check_input(const Tensor<T>& x) const {
  const auto s = static_cast<std::size_t>(cfg_.input_size);
  if (!x.defined() || x.rank() != 4 || x.dim(1) != static_cast<std::size_t>(cfg_.input_channels) ||
      x.dim(2) != s || x.dim(3) != s) {
    throw DimensionError("residen: expected input [N," + std::to_string(cfg_.input_channels) + "," +
                         std::to_string(s) + "," + std::to_string(s) + "], got " +
                         (x.defined() ? shape_str(x.shape()) : std::string("<undefined>")));
  }
}

template <typename T>
typename ResiDen<T>::Trace ResiDen<T>::trace(const Tensor<T>& x, const ForwardContext& ctx,
                                             bool with_head) {
  check_input(x);
  Trace tr;
  Tensor<T> block_input = maxpool2d(swish(stem_(x)), 2, 2);
  Tensor<T> h;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    tr.block_inputs.push_back(block_input);
    Tensor<T> out = blocks_[b](block_input, ctx.mode);
    if (b + 1 == blocks_.size()) {
      h = out;
      break;
    }
    Tensor<T> next = transitions_[b](out, ctx.mode);
    if (cfg_.skip_connections && b >= 1) {
      next = residual_add(next, avgpool2d(block_input, 2, 2));
    }
    block_input = next;
  }
  for (auto& conv : post_convs_) h = maxpool2d(swish(conv(h)), 2, 2);
  tr.last_conv = h;
  tr.features = flatten(h);
  if (!with_head) return tr;

  Tensor<T> z = tr.features;
  for (std::size_t i = 0; i < head_.size(); ++i) {
    z = swish(head_[i](z));
    z = dropout(z, cfg_.head_dropout[i], ctx.mode, mix_seed(ctx.seed, 0x5eed0000u + i));
  }
  tr.head_features = z;
  tr.logits = out_(z);
  return tr;
}

template <typename T>
Tensor<T> ResiDen<T>::forward_features(const Tensor<T>& x, const ForwardContext& ctx) {
  return trace(x, ctx, false).features;
}

template <typename T>
Tensor<T> ResiDen<T>::forward_standalone(const Tensor<T>& x, const ForwardContext& ctx) {
  return sigmoid(trace(x, ctx).logits);
}

template <typename T>
NetworkOutput<T> ResiDen<T>::run(const Tensor<T>& x, const ForwardContext& ctx) {
  auto tr = trace(x, ctx);
  return {tr.logits, tr.last_conv};
}

template <typename T>
Tensor<T> ResiDen<T>::penalty() {
  std::vector<Tensor<T>> weights;
  for (auto& c : post_convs_) weights.push_back(c.weight);
  return l1l2_penalty(weights, cfg_.post_conv_l1, cfg_.post_conv_l2);
}

template class DenseBlock<float>;
template class DenseBlock<double>;
template class Transition<float>;
template class Transition<double>;
template class ResiDen<float>;
template class ResiDen<double>;

}  // namespace residen
