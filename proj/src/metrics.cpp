#include "residen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "residen/json_util.hpp"

namespace residen {

std::vector<ConfusionCounts> count_confusion(const std::vector<std::uint8_t>& predicted,
                                             const std::vector<std::uint8_t>& truth, std::size_t rows,
                                             std::size_t cols) {
  if (predicted.size() != rows * cols || truth.size() != rows * cols) {
    throw UsageError("count_confusion: expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " matrices, got " + std::to_string(predicted.size()) + " and " +
                     std::to_string(truth.size()) + " cells");
  }
  std::vector<ConfusionCounts> counts(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const bool p = predicted[r * cols + c] != 0;
      const bool t = truth[r * cols + c] != 0;
      auto& k = counts[c];
      if (p && t) {
        ++k.tp;
      } else if (p) {
        ++k.fp;
      } else if (t) {
        ++k.fn;
      } else {
        ++k.tn;
      }
    }
  }
  return counts;
}

double au_accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw UndefinedMetricError("accuracy is undefined for zero samples");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double precision(const ConfusionCounts& c) {
  if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

double recall(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) return c.fp == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

double f1(const ConfusionCounts& c) {
  if (c.tp + c.fp + c.fn == 0) return 1.0;
  const double p = precision(c), r = recall(c);
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

double final_score(double accuracy, double f1_score) {
  return (accuracy + f1_score) / 2.0;
}

double mean_over_aus(const std::vector<double>& per_au) {
  if (per_au.empty()) throw UndefinedMetricError("mean over an empty AU list");
  double s = 0.0;
  for (double v : per_au) s += v;
  return s / static_cast<double>(per_au.size());
}

double expression_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) {
    throw UsageError("expression_accuracy: " + std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(truth.size()) + " labels");
  }
  if (truth.empty()) throw UndefinedMetricError("expression accuracy is undefined for zero samples");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

std::vector<std::vector<std::uint64_t>> confusion_matrix(const std::vector<int>& predicted,
                                                         const std::vector<int>& truth, int num_classes) {
  if (predicted.size() != truth.size()) throw UsageError("confusion_matrix: length mismatch");
  std::vector<std::vector<std::uint64_t>> m(static_cast<std::size_t>(num_classes),
                                            std::vector<std::uint64_t>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
      throw LabelError("confusion_matrix: class index outside [0, " + std::to_string(num_classes) + ")");
    }
    ++m[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return m;
}

MetricsReport make_report(const std::vector<ConfusionCounts>& counts, const std::vector<std::string>& au_names) {
  if (counts.empty()) throw UndefinedMetricError("a metrics report needs at least one AU");
  if (au_names.size() != counts.size()) throw UsageError("make_report: one name per AU required");
  MetricsReport r;
  std::vector<double> acc, prec, rec, f, fs;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    AuMetrics m;
    m.au = au_names[i];
    m.counts = counts[i];
    m.accuracy = au_accuracy(counts[i]);
    m.precision = precision(counts[i]);
    m.recall = recall(counts[i]);
    m.f1 = f1(counts[i]);
    m.final_score = final_score(m.accuracy, m.f1);
    acc.push_back(m.accuracy);
    prec.push_back(m.precision);
    rec.push_back(m.recall);
    f.push_back(m.f1);
    fs.push_back(m.final_score);
    r.per_au.push_back(std::move(m));
  }
  r.mean_accuracy = mean_over_aus(acc);
  r.mean_precision = mean_over_aus(prec);
  r.mean_recall = mean_over_aus(rec);
  r.mean_f1 = mean_over_aus(f);
  r.mean_final_score = mean_over_aus(fs);
  r.samples = counts.front().total();
  return r;
}

MetricsReport evaluate_predictions(const std::vector<std::uint8_t>& predicted,
                                   const std::vector<std::uint8_t>& truth, std::size_t rows,
                                   const std::vector<std::string>& au_names, bool cell_level) {
  auto report = make_report(count_confusion(predicted, truth, rows, au_names.size()), au_names);
  if (cell_level) {
    std::uint64_t hit = 0;
    for (const auto& m : report.per_au) hit += m.counts.tp + m.counts.tn;
    report.cell_accuracy = static_cast<double>(hit) / static_cast<double>(rows * au_names.size());
  }
  return report;
}

ExpressionMetrics evaluate_expression(const std::vector<int>& predicted, const std::vector<int>& truth,
                                      const std::vector<std::string>& classes) {
  ExpressionMetrics m;
  m.accuracy = expression_accuracy(predicted, truth);
  m.classes = classes;
  m.confusion = confusion_matrix(predicted, truth, static_cast<int>(classes.size()));
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::uint64_t row = 0;
    for (auto v : m.confusion[c]) row += v;
    m.per_class_accuracy.push_back(row == 0 ? 0.0 : static_cast<double>(m.confusion[c][c]) / static_cast<double>(row));
  }
  return m;
}

namespace {

void check_report(const MetricsReport& r) {
  if (r.per_au.empty() && !r.expression) throw UsageError("refusing to write a report with no AUs");
}

json report_to_json(const MetricsReport& r) {
  json aus = json::array();
  for (const auto& m : r.per_au) {
    aus.push_back({{"au", m.au},
                   {"accuracy", m.accuracy},
                   {"precision", m.precision},
                   {"recall", m.recall},
                   {"f1", m.f1},
                   {"final_score", m.final_score},
                   {"tp", m.counts.tp},
                   {"fp", m.counts.fp},
                   {"tn", m.counts.tn},
                   {"fn", m.counts.fn}});
  }
  json j{{"per_au", aus},
         {"mean", {{"accuracy", r.mean_accuracy},
                   {"precision", r.mean_precision},
                   {"recall", r.mean_recall},
                   {"f1", r.mean_f1},
                   {"final_score", r.mean_final_score}}},
         {"metadata", {{"dataset", r.dataset},
                       {"checkpoint_id", r.checkpoint_id},
                       {"threshold", r.threshold},
                       {"samples", r.samples},
                       {"dropped_aus", r.dropped_aus}}}};
  if (r.cell_accuracy) j["cell_accuracy"] = *r.cell_accuracy;
  if (r.expression) {
    j["expression"] = {{"accuracy", r.expression->accuracy},
                       {"classes", r.expression->classes},
                       {"per_class_accuracy", r.expression->per_class_accuracy},
                       {"confusion", r.expression->confusion}};
  }
  return j;
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  for (const auto& a : j.at("per_au")) {
    AuMetrics m;
    m.au = a.at("au").get<std::string>();
    m.accuracy = a.at("accuracy").get<double>();
    m.precision = a.at("precision").get<double>();
    m.recall = a.at("recall").get<double>();
    m.f1 = a.at("f1").get<double>();
    m.final_score = a.at("final_score").get<double>();
    m.counts = {a.value("tp", std::uint64_t{0}), a.value("fp", std::uint64_t{0}), a.value("tn", std::uint64_t{0}),
                a.value("fn", std::uint64_t{0})};
    r.per_au.push_back(std::move(m));
  }
  const auto& mean = j.at("mean");
  r.mean_accuracy = mean.at("accuracy").get<double>();
  r.mean_precision = mean.at("precision").get<double>();
  r.mean_recall = mean.at("recall").get<double>();
  r.mean_f1 = mean.at("f1").get<double>();
  r.mean_final_score = mean.at("final_score").get<double>();
  if (j.contains("cell_accuracy")) r.cell_accuracy = j.at("cell_accuracy").get<double>();
  if (j.contains("expression")) {
    const auto& e = j.at("expression");
    ExpressionMetrics m;
    m.accuracy = e.at("accuracy").get<double>();
    m.classes = e.at("classes").get<std::vector<std::string>>();
    m.per_class_accuracy = e.at("per_class_accuracy").get<std::vector<double>>();
    m.confusion = e.at("confusion").get<std::vector<std::vector<std::uint64_t>>>();
    r.expression = std::move(m);
  }
  if (j.contains("metadata")) {
    const auto& md = j.at("metadata");
    r.dataset = md.value("dataset", "");
    r.checkpoint_id = md.value("checkpoint_id", "");
    r.threshold = md.value("threshold", 0.5);
    r.samples = md.value("samples", std::size_t{0});
    r.dropped_aus = md.value("dropped_aus", std::vector<std::string>{});
  }
  return r;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string report_json_string(const MetricsReport& report) {
  check_report(report);
  return report_to_json(report).dump(2) + "\n";
}

void write_report(const MetricsReport& report, const std::string& path, ReportFormat format) {
  check_report(report);
  if (format == ReportFormat::Csv && report.per_au.empty())
    throw UsageError("CSV reports hold AU rows; this report has none");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report '" + path + "'");
  if (format == ReportFormat::Json) {
    out << report_json_string(report);
  } else {
    out << kReportCsvHeader << "\n";
    for (const auto& m : report.per_au) {
      out << m.au << "," << fmt(m.accuracy) << "," << fmt(m.precision) << "," << fmt(m.recall) << ","
          << fmt(m.f1) << "," << fmt(m.final_score) << "\n";
    }
    out << "mean," << fmt(report.mean_accuracy) << "," << fmt(report.mean_precision) << ","
        << fmt(report.mean_recall) << "," << fmt(report.mean_f1) << "," << fmt(report.mean_final_score) << "\n";
  }
  if (!out) throw IoError("failed writing report '" + path + "'");
}

MetricsReport read_report(const std::string& path, ReportFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read report '" + path + "'");
  if (format == ReportFormat::Json) {
    try {
      return report_from_json(json::parse(in));
    } catch (const json::exception& e) {
      throw DataError("malformed report '" + path + "': " + e.what());
    }
  }
  std::string line;
  std::getline(in, line);
  if (line != kReportCsvHeader) throw DataError("report '" + path + "' has an unexpected CSV header");
  MetricsReport r;
  bool have_mean = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw DataError("report '" + path + "': malformed row '" + line + "'");
    double v[5];
    for (int i = 0; i < 5; ++i) v[i] = std::stod(cells[static_cast<std::size_t>(i + 1)]);
    if (cells[0] == "mean") {
      r.mean_accuracy = v[0];
      r.mean_precision = v[1];
      r.mean_recall = v[2];
      r.mean_f1 = v[3];
      r.mean_final_score = v[4];
      have_mean = true;
    } else {
      AuMetrics m;
      m.au = cells[0];
      m.accuracy = v[0];
      m.precision = v[1];
      m.recall = v[2];
      m.f1 = v[3];
      m.final_score = v[4];
      r.per_au.push_back(std::move(m));
    }
  }
  if (!have_mean || r.per_au.empty()) throw DataError("report '" + path + "' lacks AU rows or the mean row");
  return r;
}

float Heatmap::max() const {
  return values.empty() ? 0.0f : *std::max_element(values.begin(), values.end());
}

namespace {

void normalize(Heatmap& map) {
  const float m = map.max();
  if (m > 0.0f) {
    for (auto& v : map.values) v /= m;
  }
}

struct LogitGrad {
  Tensor<float> input;
  Tensor<float> feature_map;
};

LogitGrad backprop_logit(Network<float>& model, const Tensor<float>& x, std::size_t au_index) {
  if (!x.defined() || x.rank() != 4 || x.dim(0) != 1) {
    throw DimensionError("heatmaps take a single image [1,C,H,W]");
  }
  if (au_index >= model.num_outputs()) {
    throw UsageError("AU index " + std::to_string(au_index) + " out of range for " +
                     std::to_string(model.num_outputs()) + " outputs");
  }
  LogitGrad out;
  out.input = x.clone();
  out.input.set_requires_grad(true);
  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  auto res = model.run(out.input, ForwardContext{Mode::Eval, 0});
  std::vector<float> onehot(res.logits.numel(), 0.0f);
  onehot[au_index] = 1.0f;
  tape.backward(sum(mul(res.logits, Tensor<float>(res.logits.shape(), std::move(onehot)))));
  out.feature_map = res.feature_map;
  model.params().zero_grad();
  return out;
}

}  // namespace

Heatmap saliency_map(Network<float>& model, const Tensor<float>& x, std::size_t au_index) {
  auto g = backprop_logit(model, x, au_index);
  const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H != W) throw DimensionError("heatmaps expect square images");
  Heatmap map{H, std::vector<float>(H * W, 0.0f)};
  if (g.input.has_grad()) {
    auto grad = g.input.grad();
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < H * W; ++i) map.values[i] = std::max(map.values[i], std::abs(grad[c * H * W + i]));
    }
  }
  normalize(map);
  return map;
}

Heatmap class_activation_map(Network<float>& model, const Tensor<float>& x, std::size_t au_index) {
  auto g = backprop_logit(model, x, au_index);
  const std::size_t H = x.dim(2);
  const auto& fm = g.feature_map;
  Heatmap map{H, std::vector<float>(H * H, 0.0f)};
  if (!fm.defined() || !fm.has_grad()) return map;
  const std::size_t C = fm.dim(1), h = fm.dim(2), w = fm.dim(3), hw = h * w;
  cv::Mat cam(static_cast<int>(h), static_cast<int>(w), CV_32F, cv::Scalar(0));
  auto grad = fm.grad();
  auto act = fm.data();
  for (std::size_t c = 0; c < C; ++c) {
    double weight = 0.0;
    for (std::size_t i = 0; i < hw; ++i) weight += grad[c * hw + i];
    weight /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      cam.at<float>(static_cast<int>(i / w), static_cast<int>(i % w)) += static_cast<float>(weight * act[c * hw + i]);
    }
  }
  for (int r = 0; r < cam.rows; ++r) {
    for (int c = 0; c < cam.cols; ++c) {
      const float v = cam.at<float>(r, c);
      cam.at<float>(r, c) = std::max(0.0f, v / (1.0f + std::exp(-v)));
    }
  }
  cv::Mat up;
  cv::resize(cam, up, cv::Size(static_cast<int>(H), static_cast<int>(H)), 0, 0, cv::INTER_LINEAR);
  for (int r = 0; r < up.rows; ++r) {
    for (int c = 0; c < up.cols; ++c) map.values[static_cast<std::size_t>(r) * H + static_cast<std::size_t>(c)] = std::max(0.0f, up.at<float>(r, c));
  }
  normalize(map);
  return map;
}

double region_mean(const Heatmap& map, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  if (r1 <= r0 || c1 <= c0 || r1 > map.size || c1 > map.size) throw UsageError("region_mean: bad region");
  double s = 0.0;
  for (std::size_t r = r0; r < r1; ++r) {
    for (std::size_t c = c0; c < c1; ++c) s += map.values[r * map.size + c];
  }
  return s / static_cast<double>((r1 - r0) * (c1 - c0));
}

void write_heatmap_png(const Heatmap& map, const std::string& path) {
  cv::Mat img(static_cast<int>(map.size), static_cast<int>(map.size), CV_8U);
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    img.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map.values[i], 0.0f, 1.0f) * 255.0f));
  }
  if (!cv::imwrite(path, img)) throw IoError("cannot write heatmap '" + path + "'");
}

void write_heatmap_overlay_png(const Heatmap& map, const Tensor<float>& image, const std::string& path) {
  if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != map.size || image.dim(3) != map.size) {
    throw DimensionError("overlay needs a [1,3,S,S] image matching the heatmap");
  }
  const std::size_t S = map.size, plane = S * S;
  cv::Mat img(static_cast<int>(S), static_cast<int>(S), CV_8UC3);
  auto px = image.data();
  for (std::size_t i = 0; i < plane; ++i) {
    const float a = std::clamp(map.values[i], 0.0f, 1.0f) * 0.6f;
    float rgb[3];
    for (std::size_t c = 0; c < 3; ++c) rgb[c] = std::clamp(px[c * plane + i], 0.0f, 1.0f) * (1.0f - a);
    rgb[0] += a;
    auto* out = img.data + i * 3;
    out[0] = static_cast<std::uint8_t>(std::lround(rgb[2] * 255.0f));
    out[1] = static_cast<std::uint8_t>(std::lround(rgb[1] * 255.0f));
    out[2] = static_cast<std::uint8_t>(std::lround(rgb[0] * 255.0f));
  }
  if (!cv::imwrite(path, img)) throw IoError("cannot write heatmap '" + path + "'");
}

}  // namespace residen
