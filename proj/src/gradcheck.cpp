#include "dddr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dddr {

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " max_rel_error=" << max_rel_error << " tol=" << tolerance;
  for (const auto& e : entries)
    if (e.max_rel_error > tolerance)
      os << "\n  " << e.name << "[" << e.worst_index << "]: analytic=" << e.analytic << " numeric=" << e.numeric
         << " rel=" << e.max_rel_error;
  return os.str();
}

GradCheckReport finite_difference_check(const ScalarFn& f, const ParamSetD& params, const ParamSetD& analytic,
                                         const GradCheckOptions& opts) {
  require_same_layout(params, analytic, "finite_difference_check");
  GradCheckReport report;
  report.tolerance = opts.tolerance;
  ParamSetD probe = params;
  for (const auto& [name, t] : params) {
    GradCheckEntry entry;
    entry.name = name;
    auto& slot = probe.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = slot[i];
      slot[i] = orig + opts.step;
      const double up = f(probe);
      slot[i] = orig - opts.step;
      const double down = f(probe);
      slot[i] = orig;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic.at(name)[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
      const double err = std::abs(a - numeric) / denom;
      if (i == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= opts.tolerance;
  return report;
}

GradCheckReport finite_difference_check(const GraphFn<double>& f, const ParamSetD& params,
                                         const GradCheckOptions& opts, const ParamSetD& frozen) {
  const auto eval = evaluate_with_gradients<double>(f, params, frozen);
  ParamSetD all_frozen = frozen;
  ScalarFn scalar = [&](const ParamSetD& p) {
    ParamSetD merged = all_frozen;
    merged.merge(p);
    return evaluate<double>(f, merged);
  };
  return finite_difference_check(scalar, params, eval.grads, opts);
}

}  // namespace dddr
