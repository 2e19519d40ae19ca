#include <fstream>
#include <numeric>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "residen/expression.hpp"
#include "residen/metrics.hpp"
#include "residen/residen.hpp"
#include "test_helpers.hpp"

using namespace residen;
using residen::testing::random_tensor;
using residen::testing::tiny_residen;

namespace {

// Counting oracle written from the metric definitions, one AU column at a time.
struct Oracle {
  double accuracy, precision, recall, f1, final_score;
};

Oracle oracle(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth, std::size_t rows,
              std::size_t cols, std::size_t col) {
  double tp = 0, fp = 0, fn = 0, correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int p = pred[r * cols + col], t = truth[r * cols + col];
    correct += (p == t);
    tp += (p == 1 && t == 1);
    fp += (p == 1 && t == 0);
    fn += (p == 0 && t == 1);
  }
  Oracle o{};
  o.accuracy = correct / static_cast<double>(rows);
  if (tp + fp + fn == 0) {
    o.precision = o.recall = o.f1 = 1.0;
  } else {
    o.precision = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
    o.recall = (tp + fn) > 0 ? tp / (tp + fn) : 0.0;
    o.f1 = (o.precision + o.recall) > 0 ? 2 * o.precision * o.recall / (o.precision + o.recall) : 0.0;
  }
  o.final_score = 0.5 * (o.accuracy + o.f1);
  return o;
}

std::vector<std::string> names(std::size_t n) {
  std::vector<std::string> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back("AU" + std::to_string(i + 1));
  return v;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("residen_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("au_accuracy") {
  CHECK(au_accuracy({3, 1, 5, 1}) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(au_accuracy({4, 0, 6, 0}) == 1.0);
  CHECK_THROWS_AS(au_accuracy({}), UndefinedMetricError);
}

TEST_CASE("f1 and conventions") {
  CHECK(f1({0, 0, 10, 0}) == 1.0);
  CHECK(precision({0, 0, 10, 0}) == 1.0);
  CHECK(recall({0, 0, 10, 0}) == 1.0);
  ConfusionCounts c{1, 1, 0, 1};
  CHECK(precision(c) == 0.5);
  CHECK(recall(c) == 0.5);
  CHECK(f1(c) == 0.5);
  CHECK(f1({0, 3, 2, 0}) == 0.0);  // predicted positives, none real
  CHECK(precision({0, 0, 2, 3}) == 0.0);
  CHECK(recall({0, 0, 2, 3}) == 0.0);
}

TEST_CASE("final_score and mean_over_aus") {
  CHECK(final_score(0.8, 0.6) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(final_score(1, 1) == 1.0);
  CHECK(mean_over_aus({0.5, 0.7}) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(mean_over_aus({0.3}) == 0.3);
  CHECK(mean_over_aus({0.1, 0.2, 0.9}) == doctest::Approx(mean_over_aus({0.9, 0.1, 0.2})).epsilon(1e-15));
  CHECK_THROWS_AS(mean_over_aus({}), UndefinedMetricError);
}

TEST_CASE("expression_accuracy") {
  CHECK(expression_accuracy({1, 2, 3}, {1, 2, 3}) == 1.0);
  CHECK(expression_accuracy({0, 0}, {1, 1}) == 0.0);
  CHECK_THROWS_AS(expression_accuracy({1}, {1, 2}), UsageError);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> p(1 + rng() % 64), t(p.size());
    std::size_t hit = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = static_cast<int>(rng() % 7);
      t[i] = static_cast<int>(rng() % 7);
      if (p[i] == t[i]) ++hit;
    }
    CHECK(std::abs(expression_accuracy(p, t) - static_cast<double>(hit) / p.size()) < 1e-12);
    auto m = confusion_matrix(p, t, 7);
    std::uint64_t diag = 0, all = 0;
    for (int a = 0; a < 7; ++a)
      for (int b = 0; b < 7; ++b) {
        all += m[a][b];
        if (a == b) diag += m[a][b];
      }
    CHECK(all == p.size());
    CHECK(diag == hit);
  }
}

TEST_CASE("property: metrics equal a brute-force recount") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng() % 64, cols = 1 + rng() % 12;
    // Skew some columns so zero-denominator cases occur.
    std::vector<std::uint8_t> pred(rows * cols), truth(rows * cols);
    std::vector<double> rate_p(cols), rate_t(cols);
    for (std::size_t c = 0; c < cols; ++c) {
      const double choices[] = {0.0, 0.05, 0.5, 0.95, 1.0};
      rate_p[c] = choices[rng() % 5];
      rate_t[c] = choices[rng() % 5];
    }
    std::uniform_real_distribution<double> u(0, 1);
    for (std::size_t i = 0; i < rows * cols; ++i) {
      pred[i] = u(rng) < rate_p[i % cols];
      truth[i] = u(rng) < rate_t[i % cols];
    }
    auto report = evaluate_predictions(pred, truth, rows, names(cols), true);
    double sa = 0, sf = 0, cells = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      auto o = oracle(pred, truth, rows, cols, c);
      const auto& m = report.per_au[c];
      CHECK(m.counts.total() == rows);
      CHECK(std::abs(m.accuracy - o.accuracy) <= 1e-12);
      CHECK(std::abs(m.precision - o.precision) <= 1e-12);
      CHECK(std::abs(m.recall - o.recall) <= 1e-12);
      CHECK(std::abs(m.f1 - o.f1) <= 1e-12);
      CHECK(std::abs(m.final_score - o.final_score) <= 1e-12);
      CHECK(m.final_score >= std::min(m.accuracy, m.f1) - 1e-15);
      CHECK(m.final_score <= std::max(m.accuracy, m.f1) + 1e-15);
      sa += o.accuracy;
      sf += o.final_score;
      cells += o.accuracy * rows;
    }
    CHECK(std::abs(report.mean_accuracy - sa / cols) <= 1e-12);
    CHECK(std::abs(report.mean_final_score - sf / cols) <= 1e-12);
    CHECK(std::abs(*report.cell_accuracy - cells / (rows * cols)) <= 1e-12);
  }
}

TEST_CASE("property: accuracy is invariant under sample permutation") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 2 + rng() % 30, cols = 1 + rng() % 5;
    std::vector<std::uint8_t> pred(rows * cols), truth(rows * cols);
    for (auto& v : pred) v = rng() % 2;
    for (auto& v : truth) v = rng() % 2;
    std::vector<std::size_t> perm(rows);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::uint8_t> pp(rows * cols), tp(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        pp[r * cols + c] = pred[perm[r] * cols + c];
        tp[r * cols + c] = truth[perm[r] * cols + c];
      }
    }
    auto a = evaluate_predictions(pred, truth, rows, names(cols));
    auto b = evaluate_predictions(pp, tp, rows, names(cols));
    for (std::size_t c = 0; c < cols; ++c) CHECK(a.per_au[c].accuracy == b.per_au[c].accuracy);
  }
}

TEST_CASE("property: merged expression accuracy never drops") {
  std::mt19937_64 rng(4);
  auto m = ClassMergeMap::anger_disgust();
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> p(1 + rng() % 64), t(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = static_cast<int>(rng() % 7);
      t[i] = static_cast<int>(rng() % 7);
    }
    CHECK(expression_accuracy(merge_classes(p, m), merge_classes(t, m)) >= expression_accuracy(p, t));
  }
}

TEST_CASE("report round trips") {
  auto dir = temp_dir("metrics");
  std::mt19937_64 rng(5);
  std::vector<std::uint8_t> pred(40 * 4), truth(40 * 4);
  for (auto& v : pred) v = rng() % 2;
  for (auto& v : truth) v = rng() % 2;
  auto r = evaluate_predictions(pred, truth, 40, names(4), true);
  r.dataset = "synthetic";
  r.dropped_aus = {"AU15"};
  r.expression = evaluate_expression({0, 1, 1}, {0, 1, 0}, {"a", "b"});

  write_report(r, (dir / "r.json").string(), ReportFormat::Json);
  auto j = read_report((dir / "r.json").string(), ReportFormat::Json);
  REQUIRE(j.per_au.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(j.per_au[i].f1 - r.per_au[i].f1) <= 1e-12);
    CHECK(j.per_au[i].counts == r.per_au[i].counts);
  }
  CHECK(j.mean_final_score == r.mean_final_score);
  CHECK(*j.cell_accuracy == *r.cell_accuracy);
  CHECK(j.dropped_aus == r.dropped_aus);
  CHECK(j.expression->confusion == r.expression->confusion);

  write_report(r, (dir / "r.csv").string(), ReportFormat::Csv);
  std::ifstream in(dir / "r.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "au,accuracy,precision,recall,f1,final_score");
  auto c = read_report((dir / "r.csv").string(), ReportFormat::Csv);
  REQUIRE(c.per_au.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(c.per_au[i].au == r.per_au[i].au);
    CHECK(std::abs(c.per_au[i].recall - r.per_au[i].recall) <= 1e-12);
    CHECK(std::abs(c.per_au[i].final_score - r.per_au[i].final_score) <= 1e-12);
  }
  CHECK(std::abs(c.mean_accuracy - r.mean_accuracy) <= 1e-12);

  CHECK_THROWS_AS(write_report(MetricsReport{}, (dir / "e.json").string(), ReportFormat::Json), UsageError);
  CHECK_THROWS_AS(make_report({}, {}), UndefinedMetricError);
}

TEST_CASE("heatmaps") {
  auto cfg = tiny_residen(32, 3);
  ResiDen<float> net(cfg, 6);
  std::mt19937_64 rng(6);
  auto x = random_tensor<float>({1, 3, 32, 32}, rng, 0, 1);
  auto s = saliency_map(net, x, 1);
  CHECK(s.size == 32);
  CHECK(s.max() == 1.0f);
  for (float v : s.values) CHECK((v >= 0.0f && v <= 1.0f));
  auto s2 = saliency_map(net, x, 1);
  CHECK(s.values == s2.values);
  for (auto& e : net.params()) CHECK_FALSE(e.tensor.has_grad());

  auto cam = class_activation_map(net, x, 1);
  CHECK(cam.size == 32);
  for (float v : cam.values) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK(cam.values == class_activation_map(net, x, 1).values);

  CHECK_THROWS_AS(saliency_map(net, x, 3), UsageError);
  CHECK_THROWS_AS(saliency_map(net, random_tensor<float>({2, 3, 32, 32}, rng), 0), DimensionError);

  ResiDen<float> zero(cfg, 7);
  for (auto& e : zero.params()) {
    if (!e.buffer) std::fill(e.tensor.mutable_data().begin(), e.tensor.mutable_data().end(), 0.0f);
  }
  auto zs = saliency_map(zero, x, 0);
  for (float v : zs.values) CHECK(v == 0.0f);
  auto zc = class_activation_map(zero, x, 0);
  for (float v : zc.values) CHECK(v == 0.0f);

  auto dir = temp_dir("heatmap");
  write_heatmap_png(s, (dir / "s.png").string());
  write_heatmap_overlay_png(cam, x, (dir / "c.png").string());
  CHECK(std::filesystem::file_size(dir / "s.png") > 0);
  CHECK(std::filesystem::file_size(dir / "c.png") > 0);
}
