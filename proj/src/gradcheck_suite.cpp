#include "residen/gradcheck_suite.hpp"

#include <chrono>
#include <cstdio>
#include <random>

#include "residen/ops.hpp"

namespace residen {

namespace {

Tensor<double> uniform_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>(shape, std::move(v));
}

// Magnitudes in [lo, hi] with random sign; keeps |x| away from kinks at 0.
Tensor<double> signed_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  auto t = uniform_tensor(shape, rng, lo, hi);
  for (auto& x : t.mutable_data())
    if (rng() & 1) x = -x;
  return t;
}

// Pairwise gaps of `gap`, shuffled: no near-ties inside pooling windows.
Tensor<double> spaced_tensor(const Shape& shape, std::mt19937_64& rng, double gap) {
  std::vector<double> v(shape_numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (static_cast<double>(i) - v.size() / 2.0) * gap;
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor<double>(shape, std::move(v));
}

// sum(y * r) with a fixed random r.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, uniform_tensor(y.shape(), rng, -1.0, 1.0)));
}

}  // namespace

bool GradCheckReport::passed() const {
  for (const auto& r : rows)
    if (!r.passed) return false;
  return !rows.empty();
}

std::vector<GradCheckCase> default_gradcheck_cases(std::uint64_t seed) {
  std::vector<GradCheckCase> cases;
  auto rng = std::make_shared<std::mt19937_64>(seed);
  const std::uint64_t ps = seed + 1;

  cases.push_back({"conv2d", [rng, ps] {
                     auto x = uniform_tensor({2, 3, 5, 5}, *rng, -1, 1);
                     auto w = uniform_tensor({4, 3, 3, 3}, *rng, -1, 1);
                     auto b = uniform_tensor({4}, *rng, -1, 1);
                     return grad_check([=] { return probe(conv2d(x, w, b, 1, 1), ps); }, {x, w, b});
                   }});
  cases.push_back({"conv2d_stride2", [rng, ps] {
                     auto x = uniform_tensor({1, 2, 6, 6}, *rng, -1, 1);
                     auto w = uniform_tensor({3, 2, 3, 3}, *rng, -1, 1);
                     return grad_check([=] { return probe(conv2d(x, w, Tensor<double>(), 2, 0), ps); }, {x, w});
                   }});
  cases.push_back({"maxpool2d", [rng, ps] {
                     auto x = spaced_tensor({2, 2, 4, 4}, *rng, 0.01);
                     return grad_check([=] { return probe(maxpool2d(x, 2, 2), ps); }, {x});
                   }});
  cases.push_back({"avgpool2d", [rng, ps] {
                     auto x = uniform_tensor({2, 2, 4, 4}, *rng, -1, 1);
                     return grad_check([=] { return probe(avgpool2d(x, 2, 2), ps); }, {x});
                   }});
  cases.push_back({"dense", [rng, ps] {
                     auto x = uniform_tensor({3, 5}, *rng, -1, 1);
                     auto w = uniform_tensor({5, 4}, *rng, -1, 1);
                     auto b = uniform_tensor({4}, *rng, -1, 1);
                     return grad_check([=] { return probe(dense(x, w, b), ps); }, {x, w, b});
                   }});
  cases.push_back({"batchnorm2d_train", [rng, ps] {
                     auto x = uniform_tensor({3, 2, 3, 3}, *rng, -1, 1);
                     auto g = uniform_tensor({2}, *rng, 0.5, 1.5);
                     auto b = uniform_tensor({2}, *rng, -1, 1);
                     return grad_check(
                         [=] {
                           auto rm = Tensor<double>::zeros({2});
                           auto rv = Tensor<double>::full({2}, 1.0);
                           return probe(batchnorm2d(x, g, b, rm, rv, Mode::Train), ps);
                         },
                         {x, g, b});
                   }});
  cases.push_back({"batchnorm2d_eval", [rng, ps] {
                     auto x = uniform_tensor({2, 2, 3, 3}, *rng, -1, 1);
                     auto g = uniform_tensor({2}, *rng, 0.5, 1.5);
                     auto b = uniform_tensor({2}, *rng, -1, 1);
                     auto rm = uniform_tensor({2}, *rng, -0.5, 0.5);
                     auto rv = uniform_tensor({2}, *rng, 0.5, 2.0);
                     return grad_check(
                         [=]() mutable { return probe(batchnorm2d(x, g, b, rm, rv, Mode::Eval), ps); },
                         {x, g, b});
                   }});
  cases.push_back({"swish", [rng, ps] {
                     auto x = uniform_tensor({4, 6}, *rng, -3, 3);
                     return grad_check([=] { return probe(swish(x), ps); }, {x});
                   }});
  cases.push_back({"sigmoid", [rng, ps] {
                     auto x = uniform_tensor({4, 6}, *rng, -3, 3);
                     return grad_check([=] { return probe(sigmoid(x), ps); }, {x});
                   }});
  cases.push_back({"relu", [rng, ps] {
                     auto x = signed_tensor({4, 6}, *rng, 0.05, 2);
                     return grad_check([=] { return probe(activation(Activation::Relu, x), ps); }, {x});
                   }});
  cases.push_back({"softmax", [rng, ps] {
                     auto x = uniform_tensor({3, 5}, *rng, -2, 2);
                     return grad_check([=] { return probe(softmax(x), ps); }, {x});
                   }});
  cases.push_back({"concat_channels", [rng, ps] {
                     auto a = uniform_tensor({2, 2, 3, 3}, *rng, -1, 1);
                     auto b = uniform_tensor({2, 3, 3, 3}, *rng, -1, 1);
                     return grad_check([=] { return probe(concat_channels<double>({a, b, a}), ps); }, {a, b});
                   }});
  cases.push_back({"residual_add", [rng, ps] {
                     auto a = uniform_tensor({2, 3, 4, 4}, *rng, -1, 1);
                     auto b = uniform_tensor({2, 3, 8, 8}, *rng, -1, 1);
                     return grad_check([=] { return probe(residual_add(a, avgpool2d(b, 2, 2)), ps); }, {a, b});
                   }});
  cases.push_back({"dropout", [rng, ps] {
                     auto x = uniform_tensor({4, 8}, *rng, -1, 1);
                     return grad_check([=] { return probe(dropout(x, 0.3, Mode::Train, 11), ps); }, {x});
                   }});
  cases.push_back({"bce_multilabel_loss", [rng] {
                     auto z = uniform_tensor({4, 3}, *rng, -2, 2);
                     std::vector<double> y(12);
                     for (auto& v : y) v = static_cast<double>((*rng)() & 1);
                     Tensor<double> labels({4, 3}, y);
                     return grad_check([=] { return bce_multilabel_loss(sigmoid(z), labels); }, {z});
                   }});
  cases.push_back({"crossentropy_loss", [rng] {
                     auto z = uniform_tensor({4, 5}, *rng, -2, 2);
                     std::vector<int> labels{0, 3, 4, 3};
                     return grad_check([=] { return crossentropy_loss(z, labels); }, {z});
                   }});
  cases.push_back({"l1l2_penalty", [rng] {
                     auto a = signed_tensor({3, 4}, *rng, 0.1, 1);
                     auto b = signed_tensor({5}, *rng, 0.1, 1);
                     return grad_check([=] { return l1l2_penalty<double>({a, b}, 0.01, 0.02); }, {a, b});
                   }});
  cases.push_back({"flatten_reshape", [rng, ps] {
                     auto x = uniform_tensor({2, 3, 2, 2}, *rng, -1, 1);
                     return grad_check([=] { return probe(reshape(flatten(x), Shape{4, 6}), ps); }, {x});
                   }});
  return cases;
}

GradCheckReport run_gradcheck_suite(const std::vector<GradCheckCase>& cases, double tolerance) {
  GradCheckReport report;
  report.tolerance = tolerance;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& c : cases) {
    GradCheckRow row{c.op, c.run(), false};
    row.passed = row.result.max_rel_error < tolerance;
    report.rows.push_back(row);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void print_gradcheck_report(const GradCheckReport& report, std::ostream& out) {
  char line[160];
  std::snprintf(line, sizeof line, "%-22s %14s %14s %8s  %s\n", "op", "max_rel_err", "max_abs_err", "coords",
                "status");
  out << line;
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof line, "%-22s %14.3e %14.3e %8zu  %s\n", r.op.c_str(), r.result.max_rel_error,
                  r.result.max_abs_error, r.result.coordinates, r.passed ? "PASS" : "FAIL");
    out << line;
  }
  std::size_t failed = 0;
  for (const auto& r : report.rows) failed += !r.passed;
  std::snprintf(line, sizeof line, "%zu ops, %zu failed, tolerance %.0e, %.2f s\n", report.rows.size(), failed,
                report.tolerance, report.seconds);
  out << line;
}

}  // namespace residen
