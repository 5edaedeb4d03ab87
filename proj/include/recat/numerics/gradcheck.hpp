#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "recat/numerics/tape.hpp"

namespace recat {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-3;
  /// Denominator floor for the relative error, so coordinates whose true
  /// gradient is ~0 are judged on absolute error instead.
  double floor = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded sample per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 7;
};

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;
  double max_abs_analytic = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of `build_loss` against central finite
/// differences.  `build_loss` must rebuild the whole forward on the tape it
/// is given and be deterministic in the parameter values.
inline GradcheckReport gradcheck(ParameterSet<double>& params,
                                 const std::function<Var<double>(Tape<double>&)>& build_loss,
                                 const GradcheckOptions& opts = {}) {
  params.zero_grad();
  {
    Tape<double> tape(true);
    auto loss = build_loss(tape);
    tape.backward(loss);
    tape.accumulate_param_grads();
  }
  auto evaluate = [&] {
    Tape<double> tape(false);
    return build_loss(tape).item();
  };

  GradcheckReport report;
  report.tolerance = opts.tolerance;
  std::mt19937_64 rng(opts.seed);
  for (auto& p : params) {
    GradcheckEntry e;
    e.name = p->name;
    std::vector<std::size_t> coords(p->value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param && coords.size() > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (auto c : coords) {
      const double saved = p->value[c];
      p->value[c] = saved + opts.step;
      const double plus = evaluate();
      p->value[c] = saved - opts.step;
      const double minus = evaluate();
      p->value[c] = saved;
      const double numeric = (plus - minus) / (2 * opts.step);
      const double analytic = p->grad[c];
      e.max_rel_error = std::max(e.max_rel_error, relative_error(analytic, numeric, opts.floor));
      e.max_abs_analytic = std::max(e.max_abs_analytic, std::abs(analytic));
      ++e.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace recat
