#include "residen/fusion.hpp"

namespace residen {

void FusionConfig::validate() const {
  image.validate();
  expression.validate();
  if (image.flatten_width() != image_feature_width) {
    throw ConfigError("fusion: image branch flattens to " + std::to_string(image.flatten_width()) +
                      " features but image_feature_width is " + std::to_string(image_feature_width));
  }
  if (reducer_units.empty() || reducer_units.back() != expr_feature_width) {
    throw ConfigError("fusion: reducer must end at expr_feature_width " + std::to_string(expr_feature_width));
  }
  if (image.input_size != expression.input_size()) {
    throw ConfigError("fusion: image and expression branches need the same input size");
  }
  if (head_units.empty() || head_dropout.size() != head_units.size()) {
    throw ConfigError("fusion: head_dropout needs one rate per head layer");
  }
  for (double p : head_dropout) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("fusion: dropout rates must lie in [0, 1)");
  }
  if (num_aus < 1) throw ConfigError("fusion: num_aus must be >= 1");
}

json to_json(const FusionConfig& cfg) {
  return json{{"image", to_json(cfg.image)},
              {"expression", to_json(cfg.expression)},
              {"image_feature_width", cfg.image_feature_width},
              {"expr_feature_width", cfg.expr_feature_width},
              {"reducer_units", cfg.reducer_units},
              {"head_units", cfg.head_units},
              {"head_dropout", cfg.head_dropout},
              {"num_aus", cfg.num_aus},
              {"joint_finetune", cfg.joint_finetune}};
}

FusionConfig fusion_config_from_json(const json& j) {
  const std::string ctx = "fusion";
  reject_unknown_keys(j, {"image", "expression", "image_feature_width", "expr_feature_width", "reducer_units",
                          "head_units", "head_dropout", "num_aus", "joint_finetune"},
                      ctx);
  FusionConfig cfg;
  read_opt(j, "num_aus", cfg.num_aus, ctx);
  json image = j.value("image", json::object());
  image["num_aus"] = cfg.num_aus;
  cfg.image = residen_config_from_json(image);
  cfg.expression = expression_config_from_json(j.value("expression", json::object()));
  read_opt(j, "image_feature_width", cfg.image_feature_width, ctx);
  read_opt(j, "expr_feature_width", cfg.expr_feature_width, ctx);
  read_opt(j, "reducer_units", cfg.reducer_units, ctx);
  read_opt(j, "head_units", cfg.head_units, ctx);
  read_opt(j, "head_dropout", cfg.head_dropout, ctx);
  read_opt(j, "joint_finetune", cfg.joint_finetune, ctx);
  cfg.validate();
  return cfg;
}

template <typename T>
Tensor<T> fuse_features(const Tensor<T>& image, const Tensor<T>& expression, std::size_t image_width,
                        std::size_t expr_width) {
  auto bad = [](const Tensor<T>& t, std::size_t w) { return !t.defined() || t.rank() != 2 || t.dim(1) != w; };
  if (bad(image, image_width) || bad(expression, expr_width) || image.dim(0) != expression.dim(0)) {
    throw DimensionError("fuse_features: expected [N," + std::to_string(image_width) + "] and [N," +
                         std::to_string(expr_width) + "], got " +
                         (image.defined() ? shape_str(image.shape()) : "<undefined>") + " and " +
                         (expression.defined() ? shape_str(expression.shape()) : "<undefined>"));
  }
  return concat_channels<T>({image, expression});
}

template <typename T>
FusionModel<T>::FusionModel(FusionConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.image.num_aus = cfg_.num_aus;
  cfg_.expression.cnn.num_classes = cfg_.expression.num_classes;
  cfg_.expression.residen.num_aus = cfg_.expression.num_classes;
  cfg_.validate();
  image_ = std::make_unique<ResiDen<T>>(cfg_.image, mix_seed(seed, 1));
  expr_ = std::make_unique<ExpressionNet<T>>(cfg_.expression, mix_seed(seed, 2));

  LayerFactory<T> factory(own_, mix_seed(seed, 3));
  reducer_ = FeatureReducer<T>(factory, "reducer", expr_->feature_width(), cfg_.reducer_units);
  std::size_t width = static_cast<std::size_t>(cfg_.concat_width());
  for (std::size_t i = 0; i < cfg_.head_units.size(); ++i) {
    head_.push_back(factory.linear("head.fc" + std::to_string(i + 1), width,
                                   static_cast<std::size_t>(cfg_.head_units[i])));
    width = static_cast<std::size_t>(cfg_.head_units[i]);
  }
  out_ = factory.linear("head.out", width, static_cast<std::size_t>(cfg_.num_aus));

  auto adopt = [this](const std::string& prefix, ParamSet<T>& from) {
    for (auto& e : from) {
      if (e.buffer) {
        params_.add_buffer(prefix + e.name, e.tensor);
      } else {
        params_.add(prefix + e.name, e.tensor, e.trainable);
      }
    }
  };
  adopt("image.", image_->params());
  adopt("expression.", expr_->params());
  adopt("", own_);
  set_joint_finetune(cfg_.joint_finetune);
}

template <typename T>
void FusionModel<T>::set_joint_finetune(bool on) {
  cfg_.joint_finetune = on;
  params_.set_trainable("expression.", on);
}

template <typename T>
NetworkOutput<T> FusionModel<T>::head(const Tensor<T>& image_features, const Tensor<T>& feature_map,
                                      const Tensor<T>& expr_raw, const ForwardContext& ctx) {
  Tensor<T> reduced = reducer_(expr_raw);
  Tensor<T> z = fuse_features(image_features, reduced, static_cast<std::size_t>(cfg_.image_feature_width),
                              static_cast<std::size_t>(cfg_.expr_feature_width));
  for (std::size_t i = 0; i < head_.size(); ++i) {
    z = swish(head_[i](z));
    z = dropout(z, cfg_.head_dropout[i], ctx.mode, mix_seed(ctx.seed, 0xf0000u + i));
  }
  return {out_(z), feature_map};
}

template <typename T>
NetworkOutput<T> FusionModel<T>::run(const Tensor<T>& x, const ForwardContext& ctx) {
  auto tr = image_->trace(x, ctx, false);
  const ForwardContext expr_ctx =
      cfg_.joint_finetune ? ForwardContext{ctx.mode, mix_seed(ctx.seed, 7)} : ForwardContext{Mode::Eval, 0};
  Tensor<T> expr = expr_->features(x, expr_ctx);
  return head(tr.features, tr.last_conv, expr, ctx);
}

template <typename T>
NetworkOutput<T> FusionModel<T>::run_with_expression(const Tensor<T>& x, const Tensor<T>& expr_features,
                                                     const ForwardContext& ctx) {
  if (!expr_features.defined() || expr_features.rank() != 2 || expr_features.dim(1) != expr_->feature_width()) {
    throw ConfigError("fusion: cached expression features must be [N," +
                      std::to_string(expr_->feature_width()) + "]");
  }
  auto tr = image_->trace(x, ctx, false);
  return head(tr.features, tr.last_conv, expr_features, ctx);
}

template <typename T>
Tensor<T> FusionModel<T>::forward_fusion(const Tensor<T>& x, const ForwardContext& ctx) {
  return sigmoid(run(x, ctx).logits);
}

template <typename T>
Tensor<T> FusionModel<T>::penalty() {
  Tensor<T> p = image_->penalty();
  if (cfg_.joint_finetune) {
    Tensor<T> q = expr_->penalty();
    if (q.defined()) p = add(p, q);
  }
  return p;
}

template <typename T>
AuPredictions threshold_probabilities(const Tensor<T>& probs, double threshold) {
  if (!probs.defined() || probs.rank() != 2) throw DimensionError("predict_aus: expected [N,A] probabilities");
  AuPredictions out;
  out.rows = probs.dim(0);
  out.cols = probs.dim(1);
  out.probabilities.assign(probs.data().begin(), probs.data().end());
  out.present.reserve(out.probabilities.size());
  for (double p : out.probabilities) out.present.push_back(p > threshold ? 1 : 0);
  return out;
}

template <typename T>
AuPredictions predict_aus(Network<T>& model, const Tensor<T>& x, double threshold) {
  return threshold_probabilities(sigmoid(model.logits(x, ForwardContext{Mode::Eval, 0})), threshold);
}

template AuPredictions threshold_probabilities(const Tensor<float>&, double);
template AuPredictions threshold_probabilities(const Tensor<double>&, double);
template AuPredictions predict_aus(Network<float>&, const Tensor<float>&, double);
template AuPredictions predict_aus(Network<double>&, const Tensor<double>&, double);
template Tensor<float> fuse_features(const Tensor<float>&, const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> fuse_features(const Tensor<double>&, const Tensor<double>&, std::size_t, std::size_t);
template class FusionModel<float>;
template class FusionModel<double>;

}  // namespace residen
