#pragma once

#include <memory>
#include <vector>

#include "residen/expression.hpp"
#include "residen/residen.hpp"

namespace residen {

struct FusionConfig {
  ResiDenConfig image;
  ExpressionConfig expression;
  int image_feature_width = 4096;
  int expr_feature_width = 256;
  std::vector<int> reducer_units{512, 256};
  std::vector<int> head_units{512, 2048, 2048};
  std::vector<double> head_dropout{0.0, 0.0, 0.0};
  int num_aus = 12;
  bool joint_finetune = false;

  void validate() const;
  int concat_width() const { return image_feature_width + expr_feature_width; }
};

json to_json(const FusionConfig& cfg);
FusionConfig fusion_config_from_json(const json& j);

/// Image features first, expression features second. Widths must match the
/// expected ones exactly.
template <typename T>
Tensor<T> fuse_features(const Tensor<T>& image, const Tensor<T>& expression,
                        std::size_t image_width, std::size_t expr_width);

/// ResiDen trunk features concatenated with reduced expression features,
/// followed by a fully connected AU head. Parameters are prefixed "image.",
/// "expression.", "reducer." and "head.".
template <typename T>
class FusionModel : public Network<T> {
 public:
  explicit FusionModel(FusionConfig cfg, std::uint64_t seed = 0);

  const FusionConfig& config() const { return cfg_; }
  ParamSet<T>& params() override { return params_; }
  ResiDen<T>& image_branch() { return *image_; }
  ExpressionNet<T>& expression_branch() { return *expr_; }

  /// Freezes or unfreezes the expression extractor. A frozen extractor
  /// runs in eval mode and its parameters never receive gradients.
  void set_joint_finetune(bool on);
  bool joint_finetune() const { return cfg_.joint_finetune; }

  NetworkOutput<T> run(const Tensor<T>& x, const ForwardContext& ctx) override;
  /// Same as run() but consumes precomputed extractor features [N, F].
  NetworkOutput<T> run_with_expression(const Tensor<T>& x, const Tensor<T>& expr_features,
                                       const ForwardContext& ctx);
  /// Per-AU sigmoid probabilities.
  Tensor<T> forward_fusion(const Tensor<T>& x, const ForwardContext& ctx);

  Tensor<T> penalty() override;
  std::size_t input_size() const override { return static_cast<std::size_t>(cfg_.image.input_size); }
  std::size_t num_outputs() const override { return static_cast<std::size_t>(cfg_.num_aus); }

 private:
  NetworkOutput<T> head(const Tensor<T>& image_features, const Tensor<T>& feature_map,
                        const Tensor<T>& expr_raw, const ForwardContext& ctx);

  FusionConfig cfg_;
  std::unique_ptr<ResiDen<T>> image_;
  std::unique_ptr<ExpressionNet<T>> expr_;
  ParamSet<T> own_;     // reducer + head
  ParamSet<T> params_;  // everything, prefixed
  FeatureReducer<T> reducer_;
  std::vector<Linear<T>> head_;
  Linear<T> out_;
};

/// Thresholded AU decisions; row-major [rows, cols].
struct AuPredictions {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> probabilities;
  std::vector<std::uint8_t> present;  // 1 iff probability > threshold

  bool at(std::size_t r, std::size_t c) const { return present[r * cols + c] != 0; }
};

template <typename T>
AuPredictions threshold_probabilities(const Tensor<T>& probs, double threshold = 0.5);

/// Eval-mode sigmoid probabilities of `model` thresholded per AU.
template <typename T>
AuPredictions predict_aus(Network<T>& model, const Tensor<T>& x, double threshold = 0.5);

}  // namespace residen
