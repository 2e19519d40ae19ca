#pragma once

#include <memory>
#include <string>
#include <vector>

#include "residen/json_util.hpp"
#include "residen/network.hpp"
#include "residen/residen.hpp"

namespace residen {

/// Plain expression CNN: 3x3 convs (pad 1) with optional 2x2 pooling after
/// each, then fully connected layers; the last hidden layer is the feature
/// layer read by the fusion model.
struct ExprNetConfig {
  int input_size = 128;
  int input_channels = 3;
  std::vector<int> conv_filters{48, 128, 256, 256};
  std::vector<bool> pool_after{true, false, true, true};
  std::vector<int> fc_units{512, 512, 2048};
  std::vector<double> fc_dropout{0.4, 0.2, 0.0};
  int num_classes = 7;

  void validate() const;
  int flatten_width() const;
  int feature_width() const { return fc_units.back(); }
};

json to_json(const ExprNetConfig& cfg);
ExprNetConfig expr_net_config_from_json(const json& j);

/// RAF-DB label order.
const std::vector<std::string>& default_emotion_classes();

/// Surjective relabelling old class -> new class.
class ClassMergeMap {
 public:
  ClassMergeMap() = default;
  explicit ClassMergeMap(std::vector<int> mapping);

  static ClassMergeMap identity(int num_classes);
  /// Merges the classes named `a` and `b` (into the lower index) and
  /// compacts the remaining indices in order.
  static ClassMergeMap merge_pair(const std::vector<std::string>& classes, const std::string& a,
                                  const std::string& b);
  /// Default 7 -> 6 map: anger and disgust become one class.
  static ClassMergeMap anger_disgust(const std::vector<std::string>& classes = default_emotion_classes());

  int old_count() const { return static_cast<int>(mapping_.size()); }
  int new_count() const { return new_count_; }
  int operator()(int old_class) const;
  const std::vector<int>& mapping() const { return mapping_; }
  /// Class names after merging; merged names are joined with '+'.
  std::vector<std::string> merged_names(const std::vector<std::string>& classes) const;

 private:
  std::vector<int> mapping_;
  int new_count_ = 0;
};

/// Relabels every entry; an index outside [0, old_count) is a LabelError.
std::vector<int> merge_classes(const std::vector<int>& labels, const ClassMergeMap& map);

template <typename T>
class ExprCnn : public Network<T> {
 public:
  struct Trace {
    Tensor<T> last_conv;
    Tensor<T> features;  // feature layer activation (pre-classifier)
    Tensor<T> logits;
  };

  explicit ExprCnn(ExprNetConfig cfg, std::uint64_t seed = 0);

  const ExprNetConfig& config() const { return cfg_; }
  ParamSet<T>& params() override { return params_; }
  Trace trace(const Tensor<T>& x, const ForwardContext& ctx);
  /// Class probabilities (softmax over logits).
  Tensor<T> probabilities(const Tensor<T>& x, const ForwardContext& ctx);

  NetworkOutput<T> run(const Tensor<T>& x, const ForwardContext& ctx) override;
  Tensor<T> penalty() override { return {}; }
  std::size_t input_size() const override { return static_cast<std::size_t>(cfg_.input_size); }
  std::size_t num_outputs() const override { return static_cast<std::size_t>(cfg_.num_classes); }

 private:
  ExprNetConfig cfg_;
  ParamSet<T> params_;
  std::vector<Conv2d<T>> convs_;
  std::vector<Linear<T>> fcs_;
  Linear<T> out_;
};

enum class ExtractorKind { Cnn, Residen };

/// Expression-branch description: which network, how many classes, and
/// whether anger and disgust are merged before training.
struct ExpressionConfig {
  ExtractorKind extractor = ExtractorKind::Cnn;
  int num_classes = 6;
  bool merge_anger_disgust = true;
  std::vector<std::string> class_order = default_emotion_classes();
  ExprNetConfig cnn = [] {
    ExprNetConfig c;
    c.num_classes = 6;
    return c;
  }();
  ResiDenConfig residen = [] {
    ResiDenConfig c;
    c.num_aus = 6;
    return c;
  }();

  void validate() const;
  int feature_width() const;
  int input_size() const;
};

json to_json(const ExpressionConfig& cfg);
ExpressionConfig expression_config_from_json(const json& j);

/// Either expression extractor behind one interface.
template <typename T>
class ExpressionNet : public Network<T> {
 public:
  explicit ExpressionNet(ExpressionConfig cfg, std::uint64_t seed = 0);

  const ExpressionConfig& config() const { return cfg_; }
  ParamSet<T>& params() override;
  NetworkOutput<T> run(const Tensor<T>& x, const ForwardContext& ctx) override;
  Tensor<T> penalty() override;
  std::size_t input_size() const override;
  std::size_t num_outputs() const override { return static_cast<std::size_t>(cfg_.num_classes); }

  /// Feature-layer activation with the given context (train mode allowed for
  /// joint fine-tuning).
  Tensor<T> features(const Tensor<T>& x, const ForwardContext& ctx);
  /// Feature-layer activation in eval mode; deterministic.
  Tensor<T> extract_features(const Tensor<T>& x);
  std::size_t feature_width() const { return static_cast<std::size_t>(cfg_.feature_width()); }

 private:
  ExpressionConfig cfg_;
  std::unique_ptr<ExprCnn<T>> cnn_;
  std::unique_ptr<ResiDen<T>> residen_;
};

/// Two swish dense layers mapping extractor features to the fused width.
template <typename T>
class FeatureReducer {
 public:
  FeatureReducer() = default;
  FeatureReducer(LayerFactory<T>& factory, const std::string& name, std::size_t in_width,
                 const std::vector<int>& units);

  Tensor<T> operator()(const Tensor<T>& x) const;
  std::size_t in_width() const { return in_width_; }
  std::size_t out_width() const { return layers_.empty() ? in_width_ : layers_.back().out_features(); }

 private:
  std::size_t in_width_ = 0;
  std::vector<Linear<T>> layers_;
};

}  // namespace residen
