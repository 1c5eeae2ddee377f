#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dddr/autodiff.hpp"

namespace dddr {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;   // at worst_index
  double numeric = 0.0;    // at worst_index
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
  std::string summary() const;
};

struct GradCheckOptions {
  double tolerance = 1e-3;
  double step = 1e-3;
  /// Denominator floor: err = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
};

using ScalarFn = std::function<double(const ParamSetD&)>;

/// Central differences on every element of `params`, compared against the
/// supplied analytic gradient.
GradCheckReport finite_difference_check(const ScalarFn& f, const ParamSetD& params, const ParamSetD& analytic,
                                         const GradCheckOptions& opts = {});

/// Same, with the analytic gradient taken from the tape.
GradCheckReport finite_difference_check(const GraphFn<double>& f, const ParamSetD& params,
                                         const GradCheckOptions& opts = {}, const ParamSetD& frozen = {});

}  // namespace dddr
