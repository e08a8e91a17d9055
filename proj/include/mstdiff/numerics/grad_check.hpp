#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mstdiff/numerics/autodiff.hpp"
#include "mstdiff/numerics/params.hpp"

namespace mstdiff {

/// Scalar loss of a parameter list, built on the given tape.
using LossFn = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients with central differences. The error per
/// coordinate is |analytic - numeric| / max(1, |numeric|).
///
/// `stride` > 1 probes every stride-th coordinate of each tensor, which keeps
/// large models affordable.
inline GradCheckResult grad_check(const LossFn& f, const ParamSet<double>& params, double h = 1e-5,
                                  std::size_t stride = 1) {
  ad::Tape<double> tape(true);
  auto bound = params.bind(tape);
  auto loss = f(tape, bound);
  if (!loss.value().all_finite()) throw NumericError("grad_check: non-finite loss");
  tape.backward(loss);
  const auto analytic = params.gradients(tape, bound);

  auto eval = [&](const ParamSet<double>& p) {
    ad::Tape<double> probe(false);
    auto b = p.bind(probe);
    const double v = f(probe, b).value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss during probe");
    return v;
  };

  GradCheckResult result;
  ParamSet<double> work = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t k = 0; k < params[pi].size(); k += stride) {
      const double orig = work[pi][k];
      work[pi][k] = orig + h;
      const double fp = eval(work);
      work[pi][k] = orig - h;
      const double fm = eval(work);
      work[pi][k] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][k];
      if (!std::isfinite(a)) throw NumericError("grad_check: non-finite analytic gradient");
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = k;
      }
    }
  }
  return result;
}

/// Single-tensor convenience form.
inline double grad_check(const std::function<ad::Var<double>(ad::Tape<double>&, ad::Var<double>)>& f,
                         const Tensor<double>& theta, double h = 1e-5) {
  ParamSet<double> p;
  p.add("theta", theta);
  return grad_check([&](ad::Tape<double>& t, const std::vector<ad::Var<double>>& v) { return f(t, v[0]); }, p, h)
      .max_rel_error;
}

}  // namespace mstdiff
