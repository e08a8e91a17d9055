#pragma once

// Independent reference implementations used only by the tests. They are
// deliberately naive: loops, enumeration and series expansions.

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "mstdiff/numerics/rng.hpp"
#include "mstdiff/numerics/tensor.hpp"

namespace oracle {

using mstdiff::Tensor;

inline Tensor<double> triple_loop_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

/// exp(tA) by a truncated Taylor series.
inline Tensor<double> taylor_expm(const Tensor<double>& a, double t, int terms = 40) {
  const std::size_t n = a.rows();
  Tensor<double> result = Tensor<double>::identity(n);
  Tensor<double> term = Tensor<double>::identity(n);
  for (int k = 1; k < terms; ++k) {
    term = triple_loop_matmul(term, a);
    for (auto& v : term.data()) v *= t / k;
    for (std::size_t i = 0; i < result.size(); ++i) result[i] += term[i];
  }
  return result;
}

inline std::vector<std::complex<double>> naive_dft(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) * static_cast<double>(t) / static_cast<double>(n);
      out[k] += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
  return out;
}

/// Bayes rule over explicit kernels:
/// q(l_{s-1}=i | l_s, l0) = Q_s[i, l_s] * Qbar_{s-1}[l0, i] / sum_i(...).
/// Qbar_{s-1} is obtained by enumerating every path l0 -> ... -> l_{s-1}.
inline std::vector<double> bayes_posterior(const std::vector<Tensor<double>>& q, std::size_t s, std::size_t ls,
                                           std::size_t l0) {
  const std::size_t n = q.front().rows();
  // Path enumeration for the (s-1)-step marginal.
  std::vector<double> marginal(n, 0.0);
  std::vector<std::size_t> path(s - 1, 0);
  const std::size_t steps = s - 1;
  std::size_t total = 1;
  for (std::size_t i = 0; i < steps; ++i) total *= n;
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (std::size_t i = 0; i < steps; ++i) {
      path[i] = c % n;
      c /= n;
    }
    double p = 1.0;
    std::size_t prev = l0;
    for (std::size_t i = 0; i < steps; ++i) {
      p *= q[i](prev, path[i]);
      prev = path[i];
    }
    marginal[steps == 0 ? l0 : prev] += p;
  }
  std::vector<double> joint(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    joint[i] = q[s - 1](i, ls) * marginal[i];
    z += joint[i];
  }
  for (auto& v : joint) v /= z;
  return joint;
}

/// Random row-stochastic matrix with strictly positive entries.
inline Tensor<double> random_stochastic(std::size_t n, mstdiff::Rng& rng) {
  Tensor<double> m({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      m(i, j) = 0.05 + rng.uniform();
      z += m(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) m(i, j) /= z;
  }
  return m;
}

inline double log_sum_exp(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

inline double jsd(const std::vector<double>& p, const std::vector<double>& q) {
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

}  // namespace oracle
