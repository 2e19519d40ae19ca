#include "residen/expression.hpp"

#include <algorithm>

namespace residen {

void ExprNetConfig::validate() const {
  if (input_size < 1 || input_channels < 1 || num_classes < 2) {
    throw ConfigError("expression cnn: input size/channels must be >= 1 and num_classes >= 2");
  }
  if (conv_filters.empty()) throw ConfigError("expression cnn: conv_filters must not be empty");
  if (pool_after.size() != conv_filters.size()) {
    throw ConfigError("expression cnn: pool_after needs one flag per conv");
  }
  if (fc_units.empty()) throw ConfigError("expression cnn: fc_units must not be empty");
  if (fc_dropout.size() != fc_units.size()) {
    throw ConfigError("expression cnn: fc_dropout needs one rate per fully connected layer");
  }
  for (int f : conv_filters) {
    if (f < 1) throw ConfigError("expression cnn: filter counts must be >= 1");
  }
  for (int u : fc_units) {
    if (u < 1) throw ConfigError("expression cnn: fc widths must be >= 1");
  }
  for (double p : fc_dropout) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("expression cnn: dropout rates must lie in [0, 1)");
  }
  int spatial = input_size;
  for (bool pool : pool_after) {
    if (!pool) continue;
    if (spatial % 2 != 0 || spatial < 2) {
      throw ConfigError("expression cnn: input_size " + std::to_string(input_size) +
                        " cannot be halved at every pool");
    }
    spatial /= 2;
  }
}

int ExprNetConfig::flatten_width() const {
  int spatial = input_size;
  for (bool pool : pool_after) spatial = pool ? spatial / 2 : spatial;
  return conv_filters.back() * spatial * spatial;
}

json to_json(const ExprNetConfig& cfg) {
  return json{{"input_size", cfg.input_size},     {"input_channels", cfg.input_channels},
              {"conv_filters", cfg.conv_filters}, {"pool_after", cfg.pool_after},
              {"fc_units", cfg.fc_units},         {"fc_dropout", cfg.fc_dropout},
              {"num_classes", cfg.num_classes}};
}

ExprNetConfig expr_net_config_from_json(const json& j) {
  const std::string ctx = "expression.cnn";
  reject_unknown_keys(j, {"input_size", "input_channels", "conv_filters", "pool_after", "fc_units",
                          "fc_dropout", "num_classes"},
                      ctx);
  ExprNetConfig cfg;
  read_opt(j, "input_size", cfg.input_size, ctx);
  read_opt(j, "input_channels", cfg.input_channels, ctx);
  read_opt(j, "conv_filters", cfg.conv_filters, ctx);
  read_opt(j, "pool_after", cfg.pool_after, ctx);
  read_opt(j, "fc_units", cfg.fc_units, ctx);
  read_opt(j, "fc_dropout", cfg.fc_dropout, ctx);
  read_opt(j, "num_classes", cfg.num_classes, ctx);
  cfg.validate();
  return cfg;
}

const std::vector<std::string>& default_emotion_classes() {
  static const std::vector<std::string> classes{"surprise", "fear",  "disgust", "happiness",
                                                "sadness",  "anger", "neutral"};
  return classes;
}

ClassMergeMap::ClassMergeMap(std::vector<int> mapping) : mapping_(std::move(mapping)) {
  if (mapping_.empty()) throw ConfigError("class merge map must not be empty");
  new_count_ = *std::max_element(mapping_.begin(), mapping_.end()) + 1;
  std::vector<bool> hit(static_cast<std::size_t>(new_count_), false);
  for (int m : mapping_) {
    if (m < 0) throw ConfigError("class merge map targets must be >= 0");
    hit[static_cast<std::size_t>(m)] = true;
  }
  if (std::find(hit.begin(), hit.end(), false) != hit.end()) {
    throw ConfigError("class merge map must be surjective onto [0, new_count)");
  }
}

ClassMergeMap ClassMergeMap::identity(int num_classes) {
  std::vector<int> m(static_cast<std::size_t>(num_classes));
  for (int i = 0; i < num_classes; ++i) m[static_cast<std::size_t>(i)] = i;
  return ClassMergeMap(std::move(m));
}

ClassMergeMap ClassMergeMap::merge_pair(const std::vector<std::string>& classes, const std::string& a,
                                        const std::string& b) {
  auto ia = std::find(classes.begin(), classes.end(), a);
  auto ib = std::find(classes.begin(), classes.end(), b);
  if (ia == classes.end() || ib == classes.end() || ia == ib) {
    throw ConfigError("cannot merge classes '" + a + "' and '" + b + "': both must be distinct known classes");
  }
  const auto keep = static_cast<std::size_t>(std::min(ia, ib) - classes.begin());
  const auto drop = static_cast<std::size_t>(std::max(ia, ib) - classes.begin());
  std::vector<int> m(classes.size());
  int next = 0;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (i == drop) continue;
    m[i] = next++;
  }
  m[drop] = m[keep];
  return ClassMergeMap(std::move(m));
}

ClassMergeMap ClassMergeMap::anger_disgust(const std::vector<std::string>& classes) {
  return merge_pair(classes, "anger", "disgust");
}

int ClassMergeMap::operator()(int old_class) const {
  if (old_class < 0 || old_class >= old_count()) {
    throw LabelError("emotion label " + std::to_string(old_class) + " outside [0, " +
                     std::to_string(old_count()) + ")");
  }
  return mapping_[static_cast<std::size_t>(old_class)];
}

std::vector<std::string> ClassMergeMap::merged_names(const std::vector<std::string>& classes) const {
  if (classes.size() != mapping_.size()) throw ConfigError("class name list does not match merge map");
  std::vector<std::string> names(static_cast<std::size_t>(new_count_));
  for (std::size_t i = 0; i < classes.size(); ++i) {
    auto& n = names[static_cast<std::size_t>(mapping_[i])];
    n = n.empty() ? classes[i] : n + "+" + classes[i];
  }
  return names;
}

std::vector<int> merge_classes(const std::vector<int>& labels, const ClassMergeMap& map) {
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(map(l));
  return out;
}

template <typename T>
ExprCnn<T>::ExprCnn(ExprNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  LayerFactory<T> factory(params_, seed);
  std::size_t channels = static_cast<std::size_t>(cfg_.input_channels);
  for (std::size_t i = 0; i < cfg_.conv_filters.size(); ++i) {
    const auto out = static_cast<std::size_t>(cfg_.conv_filters[i]);
    convs_.push_back(factory.conv("conv" + std::to_string(i + 1), channels, out, 3, 1, 1));
    channels = out;
  }
  std::size_t width = static_cast<std::size_t>(cfg_.flatten_width());
  for (std::size_t i = 0; i < cfg_.fc_units.size(); ++i) {
    const auto u = static_cast<std::size_t>(cfg_.fc_units[i]);
    fcs_.push_back(factory.linear("fc" + std::to_string(i + 1), width, u));
    width = u;
  }
  out_ = factory.linear("classifier", width, static_cast<std::size_t>(cfg_.num_classes));
}

template <typename T>
typename ExprCnn<T>::Trace ExprCnn<T>::trace(const Tensor<T>& x, const ForwardContext& ctx) {
  const auto s = static_cast<std::size_t>(cfg_.input_size);
  if (!x.defined() || x.rank() != 4 || x.dim(1) != static_cast<std::size_t>(cfg_.input_channels) ||
      x.dim(2) != s || x.dim(3) != s) {
    throw DimensionError("expression cnn: unexpected input shape " +
                         (x.defined() ? shape_str(x.shape()) : std::string("<undefined>")));
  }
  Trace tr;
  Tensor<T> h = x;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = swish(convs_[i](h));
    if (cfg_.pool_after[i]) h = maxpool2d(h, 2, 2);
  }
  tr.last_conv = h;
  Tensor<T> z = flatten(h);
  for (std::size_t i = 0; i < fcs_.size(); ++i) {
    z = swish(fcs_[i](z));
    z = dropout(z, cfg_.fc_dropout[i], ctx.mode, mix_seed(ctx.seed, 0xe0000u + i));
  }
  tr.features = z;
  tr.logits = out_(z);
  return tr;
}

template <typename T>
Tensor<T> ExprCnn<T>::probabilities(const Tensor<T>& x, const ForwardContext& ctx) {
  return softmax(trace(x, ctx).logits);
}

template <typename T>
NetworkOutput<T> ExprCnn<T>::run(const Tensor<T>& x, const ForwardContext& ctx) {
  auto tr = trace(x, ctx);
  return {tr.logits, tr.last_conv};
}

void ExpressionConfig::validate() const {
  const int full = static_cast<int>(class_order.size());
  const int expected = merge_anger_disgust ? full - 1 : full;
  if (num_classes != expected) {
    throw ConfigError("expression: num_classes " + std::to_string(num_classes) + " inconsistent with " +
                      std::to_string(full) + " listed classes" +
                      (merge_anger_disgust ? " merged to " : " (unmerged) = ") + std::to_string(expected));
  }
  if (merge_anger_disgust) ClassMergeMap::anger_disgust(class_order);
  if (extractor == ExtractorKind::Cnn) {
    if (cnn.num_classes != num_classes) throw ConfigError("expression: cnn.num_classes must equal num_classes");
    cnn.validate();
  } else {
    if (residen.num_aus != num_classes) throw ConfigError("expression: residen.num_aus must equal num_classes");
    residen.validate();
  }
}

int ExpressionConfig::feature_width() const {
  return extractor == ExtractorKind::Cnn ? cnn.feature_width() : residen.feature_width();
}

int ExpressionConfig::input_size() const {
  return extractor == ExtractorKind::Cnn ? cnn.input_size : residen.input_size;
}

json to_json(const ExpressionConfig& cfg) {
  return json{{"extractor", cfg.extractor == ExtractorKind::Cnn ? "cnn" : "residen"},
              {"num_classes", cfg.num_classes},
              {"merge_anger_disgust", cfg.merge_anger_disgust},
              {"class_order", cfg.class_order},
              {"cnn", to_json(cfg.cnn)},
              {"residen", to_json(cfg.residen)}};
}

ExpressionConfig expression_config_from_json(const json& j) {
  const std::string ctx = "expression";
  reject_unknown_keys(j, {"extractor", "num_classes", "merge_anger_disgust", "class_order", "cnn", "residen"},
                      ctx);
  ExpressionConfig cfg;
  std::string kind = "cnn";
  read_opt(j, "extractor", kind, ctx);
  if (kind == "cnn") {
    cfg.extractor = ExtractorKind::Cnn;
  } else if (kind == "residen") {
    cfg.extractor = ExtractorKind::Residen;
  } else {
    throw ConfigError("expression.extractor must be 'cnn' or 'residen', got '" + kind + "'");
  }
  read_opt(j, "merge_anger_disgust", cfg.merge_anger_disgust, ctx);
  read_opt(j, "class_order", cfg.class_order, ctx);
  cfg.num_classes = static_cast<int>(cfg.class_order.size()) - (cfg.merge_anger_disgust ? 1 : 0);
  read_opt(j, "num_classes", cfg.num_classes, ctx);
  // Sub-network outputs always follow num_classes.
  json cnn = j.value("cnn", json::object());
  json res = j.value("residen", json::object());
  cnn["num_classes"] = cfg.num_classes;
  res["num_aus"] = cfg.num_classes;
  cfg.cnn = expr_net_config_from_json(cnn);
  cfg.residen = residen_config_from_json(res);
  cfg.validate();
  return cfg;
}

template <typename T>
ExpressionNet<T>::ExpressionNet(ExpressionConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.cnn.num_classes = cfg_.num_classes;
  cfg_.residen.num_aus = cfg_.num_classes;
  cfg_.validate();
  if (cfg_.extractor == ExtractorKind::Cnn) {
    cnn_ = std::make_unique<ExprCnn<T>>(cfg_.cnn, seed);
  } else {
    residen_ = std::make_unique<ResiDen<T>>(cfg_.residen, seed);
  }
}

template <typename T>
ParamSet<T>& ExpressionNet<T>::params() {
  return cnn_ ? cnn_->params() : residen_->params();
}

template <typename T>
NetworkOutput<T> ExpressionNet<T>::run(const Tensor<T>& x, const ForwardContext& ctx) {
  return cnn_ ? cnn_->run(x, ctx) : residen_->run(x, ctx);
}

template <typename T>
Tensor<T> ExpressionNet<T>::penalty() {
  return cnn_ ? cnn_->penalty() : residen_->penalty();
}

template <typename T>
std::size_t ExpressionNet<T>::input_size() const {
  return cnn_ ? cnn_->input_size() : residen_->input_size();
}

template <typename T>
Tensor<T> ExpressionNet<T>::features(const Tensor<T>& x, const ForwardContext& ctx) {
  return cnn_ ? cnn_->trace(x, ctx).features : residen_->trace(x, ctx).head_features;
}

template <typename T>
Tensor<T> ExpressionNet<T>::extract_features(const Tensor<T>& x) {
  return features(x, ForwardContext{Mode::Eval, 0});
}

template <typename T>
FeatureReducer<T>::FeatureReducer(LayerFactory<T>& factory, const std::string& name,
                                  std::size_t in_width, const std::vector<int>& units)
    : in_width_(in_width) {
  std::size_t width = in_width;
  for (std::size_t i = 0; i < units.size(); ++i) {
    layers_.push_back(factory.linear(name + ".fc" + std::to_string(i + 1), width,
                                     static_cast<std::size_t>(units[i])));
    width = static_cast<std::size_t>(units[i]);
  }
}

template <typename T>
Tensor<T> FeatureReducer<T>::operator()(const Tensor<T>& x) const {
  if (!x.defined() || x.rank() != 2 || x.dim(1) != in_width_) {
    throw DimensionError("reduce_features: expected [N," + std::to_string(in_width_) + "], got " +
                         (x.defined() ? shape_str(x.shape()) : std::string("<undefined>")));
  }
  Tensor<T> h = x;
  for (const auto& l : layers_) h = swish(l(h));
  return h;
}

template class ExprCnn<float>;
template class ExprCnn<double>;
template class ExpressionNet<float>;
template class ExpressionNet<double>;
template class FeatureReducer<float>;
template class FeatureReducer<double>;

}  // namespace residen
