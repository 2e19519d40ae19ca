#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "residen/network.hpp"

namespace residen {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Per-column counts for row-major binary matrices [rows, cols].
std::vector<ConfusionCounts> count_confusion(const std::vector<std::uint8_t>& predicted,
                                             const std::vector<std::uint8_t>& truth, std::size_t rows,
                                             std::size_t cols);

/// (tp + tn) / total. Throws UndefinedMetricError on an empty count.
double au_accuracy(const ConfusionCounts& c);
/// tp / (tp + fp); with nothing predicted positive: 1 when there were no
/// positives to find, else 0.
double precision(const ConfusionCounts& c);
/// tp / (tp + fn); with no positives: 1 when nothing was predicted
/// positive, else 0.
double recall(const ConfusionCounts& c);
/// 2PR / (P + R); 1 when tp + fp + fn == 0, 0 when P + R == 0.
double f1(const ConfusionCounts& c);
double final_score(double accuracy, double f1_score);
double mean_over_aus(const std::vector<double>& per_au);

double expression_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);
/// matrix[truth][predicted].
std::vector<std::vector<std::uint64_t>> confusion_matrix(const std::vector<int>& predicted,
                                                         const std::vector<int>& truth, int num_classes);

struct AuMetrics {
  std::string au;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double final_score = 0.0;
  ConfusionCounts counts;
};

struct ExpressionMetrics {
  double accuracy = 0.0;
  std::vector<std::string> classes;
  std::vector<double> per_class_accuracy;  // recall per true class; NaN-free (0 for absent classes)
  std::vector<std::vector<std::uint64_t>> confusion;
};

struct MetricsReport {
  std::vector<AuMetrics> per_au;
  double mean_accuracy = 0.0;
  double mean_precision = 0.0;
  double mean_recall = 0.0;
  double mean_f1 = 0.0;
  double mean_final_score = 0.0;
  /// Accuracy over all (sample, AU) cells; filled only when requested.
  std::optional<double> cell_accuracy;
  std::optional<ExpressionMetrics> expression;

  std::string dataset;
  std::string checkpoint_id;
  double threshold = 0.5;
  std::size_t samples = 0;
  std::vector<std::string> dropped_aus;
};

/// Builds per-AU metrics and their means. `au_names` labels the columns.
MetricsReport make_report(const std::vector<ConfusionCounts>& counts, const std::vector<std::string>& au_names);
/// Counts the binary matrices and builds the report; `cell_level` also fills cell_accuracy.
MetricsReport evaluate_predictions(const std::vector<std::uint8_t>& predicted,
                                   const std::vector<std::uint8_t>& truth, std::size_t rows,
                                   const std::vector<std::string>& au_names, bool cell_level = false);
ExpressionMetrics evaluate_expression(const std::vector<int>& predicted, const std::vector<int>& truth,
                                      const std::vector<std::string>& classes);

enum class ReportFormat { Json, Csv };

/// Writes the report; CSV holds one row per AU plus a trailing "mean" row.
void write_report(const MetricsReport& report, const std::string& path, ReportFormat format);
MetricsReport read_report(const std::string& path, ReportFormat format);
std::string report_json_string(const MetricsReport& report);

inline constexpr const char* kReportCsvHeader = "au,accuracy,precision,recall,f1,final_score";

/// Square heatmap in [0, 1], row-major.
struct Heatmap {
  std::size_t size = 0;
  std::vector<float> values;

  float max() const;
};

/// |d logit(au) / d x| reduced over channels by max, normalized by its max.
/// `x` must be a single image [1, C, H, W].
Heatmap saliency_map(Network<float>& model, const Tensor<float>& x, std::size_t au_index);

/// Gradient-weighted class activation map over the model's last conv
/// activation, rectified, bilinearly upsampled to the input size and
/// normalized.
Heatmap class_activation_map(Network<float>& model, const Tensor<float>& x, std::size_t au_index);

/// Mean heatmap value over rows [r0, r1) x cols [c0, c1).
double region_mean(const Heatmap& map, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);

/// 8-bit grayscale PNG, or the map as a red overlay on `image` ([1,3,H,W] in [0,1]).
void write_heatmap_png(const Heatmap& map, const std::string& path);
void write_heatmap_overlay_png(const Heatmap& map, const Tensor<float>& image, const std::string& path);

}  // namespace residen
