#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mstdiff/errors.hpp"

namespace mstdiff::cdiff {

/// Gaussian noise schedule. Steps are 1-based in the public API; vectors are
/// stored 0-based (index s-1).
struct GaussianSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;  // posterior std, sigma_1 = 0

  std::size_t steps() const noexcept { return beta.size(); }

  double beta_at(std::size_t s) const { return beta.at(s - 1); }
  double alpha_at(std::size_t s) const { return alpha.at(s - 1); }
  double alpha_bar_at(std::size_t s) const { return alpha_bar.at(s - 1); }
  double sigma_at(std::size_t s) const { return sigma.at(s - 1); }

  /// Builds all derived quantities from explicit betas.
  static GaussianSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ContractError("GaussianSchedule: need at least one step");
    GaussianSchedule g;
    g.beta = std::move(betas);
    const std::size_t n = g.beta.size();
    g.alpha.resize(n);
    g.alpha_bar.resize(n);
    g.sigma.resize(n);
    double prod = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(g.beta[i] > 0.0 && g.beta[i] < 1.0)) throw ContractError("GaussianSchedule: beta must lie in (0, 1)");
      g.alpha[i] = 1.0 - g.beta[i];
      prod *= g.alpha[i];
      g.alpha_bar[i] = prod;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (i == 0) {
        g.sigma[i] = 0.0;
      } else {
        const double var = (1.0 - g.alpha_bar[i - 1]) / (1.0 - g.alpha_bar[i]) * g.beta[i];
        g.sigma[i] = std::sqrt(var);
      }
    }
    return g;
  }

  /// Linear betas from `beta_start` to `beta_end` over `steps` steps.
  static GaussianSchedule linear(std::size_t steps, double beta_start, double beta_end) {
    if (steps == 0) throw ContractError("GaussianSchedule: steps must be >= 1");
    std::vector<double> b(steps);
    for (std::size_t i = 0; i < steps; ++i) {
      const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
      b[i] = beta_start + f * (beta_end - beta_start);
    }
    return from_betas(std::move(b));
  }
};

inline void check_step(const GaussianSchedule& sched, std::size_t s) {
  if (s < 1 || s > sched.steps()) {
    throw ContractError("diffusion step " + std::to_string(s) + " outside [1, " + std::to_string(sched.steps()) + "]");
  }
}

/// w_s = sqrt(abar_s) w0 + sqrt(1 - abar_s) eps.
inline std::vector<double> forward_noise(std::span<const double> w0, std::size_t s, const GaussianSchedule& sched,
                                         std::span<const double> eps) {
  check_step(sched, s);
  if (w0.size() != eps.size()) throw ShapeError("forward_noise: noise length mismatch");
  const double a = std::sqrt(sched.alpha_bar_at(s));
  const double b = std::sqrt(1.0 - sched.alpha_bar_at(s));
  std::vector<double> out(w0.size());
  for (std::size_t i = 0; i < w0.size(); ++i) out[i] = a * w0[i] + b * eps[i];
  return out;
}

/// One ancestral step:
/// w_{s-1} = (w_s - (1 - alpha_s) / sqrt(1 - abar_s) * eps_hat) / sqrt(alpha_s) + sigma_s z.
inline std::vector<double> reverse_step(std::span<const double> ws, std::span<const double> eps_hat, std::size_t s,
                                        const GaussianSchedule& sched, std::span<const double> z) {
  check_step(sched, s);
  if (ws.size() != eps_hat.size() || ws.size() != z.size()) throw ShapeError("reverse_step: length mismatch");
  const double alpha = sched.alpha_at(s);
  const double coef = (1.0 - alpha) / std::sqrt(1.0 - sched.alpha_bar_at(s));
  const double inv = 1.0 / std::sqrt(alpha);
  const double sigma = sched.sigma_at(s);
  std::vector<double> out(ws.size());
  for (std::size_t i = 0; i < ws.size(); ++i) {
    if (!std::isfinite(eps_hat[i])) throw NumericError("reverse_step: non-finite noise prediction");
    out[i] = inv * (ws[i] - coef * eps_hat[i]) + sigma * z[i];
    if (!std::isfinite(out[i])) throw NumericError("reverse_step: non-finite output at step " + std::to_string(s));
  }
  return out;
}

inline double mse_loss(std::span<const double> eps, std::span<const double> eps_hat) {
  if (eps.size() != eps_hat.size() || eps.empty()) throw ShapeError("mse_loss: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) s += (eps[i] - eps_hat[i]) * (eps[i] - eps_hat[i]);
  return s / static_cast<double>(eps.size());
}

}  // namespace mstdiff::cdiff
