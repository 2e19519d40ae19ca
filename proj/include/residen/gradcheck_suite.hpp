#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "residen/grad_check.hpp"

namespace residen {

/// One row of the gradient-check table.
struct GradCheckCase {
  std::string op;
  std::function<GradCheckResult()> run;
};

struct GradCheckRow {
  std::string op;
  GradCheckResult result;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double tolerance = 1e-5;
  double seconds = 0.0;

  bool passed() const;
};

/// f64 finite-difference checks for every differentiable op, on small
/// seeded inputs.
std::vector<GradCheckCase> default_gradcheck_cases(std::uint64_t seed = 7);

GradCheckReport run_gradcheck_suite(const std::vector<GradCheckCase>& cases, double tolerance = 1e-5);

/// Fixed-width table, one line per op plus a summary line.
void print_gradcheck_report(const GradCheckReport& report, std::ostream& out);

}  // namespace residen
