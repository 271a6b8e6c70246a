#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>

#include "imtsp/params.hpp"
#include "imtsp/tape.hpp"

namespace imtsp {

/// Scalar program over a parameter store: records onto the tape and returns
/// the scalar output.
using ScalarProgram = std::function<Var(Tape&, const ParamStore&)>;

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool non_finite = false;
  bool non_smooth = false;
  bool passed = false;
};

/// Compares the tape gradient of `program` against central differences.
///
/// Relative error per component is |a − b| / max(|a|, |b|, 1e-8). When
/// `max_components` is nonzero only that many components, spread evenly
/// across the flat layout, are perturbed. A program whose tape records a
/// hard max at a tie is reported non-smooth and fails.
inline FiniteDiffReport finite_diff_check(const ScalarProgram& program, const ParamStore& params, double eps,
                                          double tol, std::size_t max_components = 0) {
  FiniteDiffReport report;
  ParamStore work = params;

  GradientSample analytic;
  {
    Tape tape;
    Var out = program(tape, work);
    report.non_smooth = tape.has_non_smooth();
    analytic = tape.backward(out, work);
  }

  auto eval = [&]() {
    Tape tape;
    return program(tape, work).item();
  };

  const std::size_t n = work.size();
  const std::size_t count = (max_components == 0 || max_components >= n) ? n : max_components;
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t k = count == n ? c : (c * n) / count;
    double& slot = work.flat_ref(k);
    const double saved = slot;
    double plus = 0.0, minus = 0.0;
    try {
      slot = saved + eps;
      plus = eval();
      slot = saved - eps;
      minus = eval();
    } catch (const NumericError&) {
      plus = minus = std::numeric_limits<double>::quiet_NaN();
    }
    slot = saved;
    const double numeric = (plus - minus) / (2.0 * eps);
    ++report.checked;
    if (!std::isfinite(numeric)) {
      report.non_finite = true;
      continue;
    }
    const double a = analytic.values[k];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = k;
    }
  }
  report.passed = !report.non_finite && !report.non_smooth && report.max_rel_error < tol;
  return report;
}

}  // namespace imtsp
