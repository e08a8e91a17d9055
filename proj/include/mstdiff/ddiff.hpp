#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/rng.hpp"
#include "mstdiff/numerics/tensor.hpp"
#include "mstdiff/ukg.hpp"

namespace mstdiff::ddiff {

using ukg::TransitionSchedule;

inline constexpr double kProbFloor = 1e-12;

inline void check_locations(std::span<const std::size_t> l, std::size_t n, const char* what) {
  for (auto v : l)
    if (v >= n) throw ContractError(std::string(what) + ": location " + std::to_string(v) + " outside [0, " +
                                    std::to_string(n) + ")");
}

/// Row t is row l0[t] of Qbar_s.
inline Tensor<double> forward_marginal(std::span<const std::size_t> l0, std::size_t s, const TransitionSchedule& sched) {
  const std::size_t n = sched.num_states;
  check_locations(l0, n, "forward_marginal");
  const auto& qb = sched.qbar_at(s);
  Tensor<double> out({l0.size(), n});
  for (std::size_t t = 0; t < l0.size(); ++t) std::copy(qb.row(l0[t]).begin(), qb.row(l0[t]).end(), out.row(t).begin());
  return out;
}

/// q(l_{s-1} | l_s, l0) into `out`: column l_s of Q_s times row l0 of
/// Qbar_{s-1}, normalized. When the product vanishes the backward message
/// alone is used and `degenerate` (if given) is incremented.
inline void posterior_row(std::size_t ls, std::size_t l0, std::size_t s, const TransitionSchedule& sched,
                          std::span<double> out, std::size_t* degenerate = nullptr) {
  const std::size_t n = sched.num_states;
  if (ls >= n || l0 >= n) throw ContractError("posterior: location out of range");
  const auto& q = sched.q_at(s);
  const auto& qb = sched.qbar_at(s - 1);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = q(j, ls) * qb(l0, j);
    z += out[j];
  }
  if (!(z > 0.0)) {
    if (degenerate) ++*degenerate;
    z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = q(j, ls);
      z += out[j];
    }
    if (!(z > 0.0)) throw NumericError("posterior: degenerate row for l_s=" + std::to_string(ls) + " at step " +
                                       std::to_string(s));
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
}

inline Tensor<double> posterior(std::span<const std::size_t> ls, std::span<const std::size_t> l0, std::size_t s,
                                const TransitionSchedule& sched, std::size_t* degenerate = nullptr) {
  if (ls.size() != l0.size()) throw ShapeError("posterior: sequence lengths differ");
  Tensor<double> out({ls.size(), sched.num_states});
  for (std::size_t t = 0; t < ls.size(); ++t) posterior_row(ls[t], l0[t], s, sched, out.row(t), degenerate);
  return out;
}

/// [N x N] matrix whose row j is q(l_{s-1} | l_s, l0 = j).
inline Tensor<double> posterior_matrix(std::size_t ls, std::size_t s, const TransitionSchedule& sched,
                                       std::size_t* degenerate = nullptr) {
  const std::size_t n = sched.num_states;
  Tensor<double> m({n, n});
  for (std::size_t j = 0; j < n; ++j) posterior_row(ls, j, s, sched, m.row(j), degenerate);
  return m;
}

/// p(l_{s-1} | l_s) = sum_j x0[t, j] q(l_{s-1} | l_s, j).
///
/// Evaluated as a single product: with Z_j = (Qbar_{s-1} Q_s)[j, l_s] the
/// normaliser of posterior row j, p_i = Q_s[i, l_s] * sum_j (x0_j / Z_j) Qbar_{s-1}[j, i].
/// Rows j with Z_j = 0 use the backward message alone, as in posterior_row.
inline Tensor<double> reverse_marginalize(const Tensor<double>& x0_belief, std::span<const std::size_t> ls,
                                          std::size_t s, const TransitionSchedule& sched,
                                          std::size_t* degenerate = nullptr) {
  const std::size_t n = sched.num_states;
  const std::size_t rows = ls.size();
  if (x0_belief.rows() != rows || x0_belief.cols() != n) throw ShapeError("reverse_marginalize: belief shape");
  check_locations(ls, n, "reverse_marginalize");
  const auto& q = sched.q_at(s);
  const auto& qb = sched.qbar_at(s - 1);

  // Normalisers and backward-message mass for each observed state.
  std::vector<std::vector<double>> z(n);
  std::vector<double> col_mass(n, 0.0);
  for (std::size_t t = 0; t < rows; ++t) {
    const std::size_t l = ls[t];
    if (!z[l].empty()) continue;
    z[l].assign(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += qb(j, i) * q(i, l);
      z[l][j] = acc;
    }
    for (std::size_t i = 0; i < n; ++i) col_mass[l] += q(i, l);
  }

  Tensor<double> w({rows, n});
  std::vector<double> fallback(rows, 0.0);
  for (std::size_t t = 0; t < rows; ++t) {
    const auto& zl = z[ls[t]];
    for (std::size_t j = 0; j < n; ++j) {
      const double x = x0_belief(t, j);
      if (x == 0.0) continue;
      if (zl[j] > 0.0) {
        w(t, j) = x / zl[j];
      } else {
        if (degenerate) ++*degenerate;
        fallback[t] += x;
      }
    }
  }
  Tensor<double> out = matmul(w, qb);
  for (std::size_t t = 0; t < rows; ++t) {
    const std::size_t l = ls[t];
    auto row = out.row(t);
    if (fallback[t] > 0.0 && !(col_mass[l] > 0.0)) {
      throw NumericError("reverse_marginalize: degenerate row for l_s=" + std::to_string(l) + " at step " +
                         std::to_string(s));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      row[i] *= q(i, l);
      if (fallback[t] > 0.0) row[i] += fallback[t] * q(i, l) / col_mass[l];
      sum += row[i];
    }
    if (!(sum > 0.0)) throw NumericError("reverse_marginalize: empty belief row");
    for (auto& v : row) v /= sum;
  }
  return out;
}

/// Mean over rows of sum_j q ln(q / max(p, floor)).
inline double kl_loss(const Tensor<double>& q, const Tensor<double>& p, double floor = kProbFloor) {
  if (q.shape() != p.shape()) throw ShapeError("kl_loss: shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double a = q[i];
    if (a > 0.0) s += a * (std::log(a) - std::log(std::max(p[i], floor)));
  }
  return s / static_cast<double>(q.rows());
}

/// Mean over rows of -log softmax(logits[t])[l0[t]].
inline double ce_loss(std::span<const std::size_t> l0, const Tensor<double>& logits) {
  if (logits.rows() != l0.size()) throw ShapeError("ce_loss: label count differs from logit rows");
  check_locations(l0, logits.cols(), "ce_loss");
  double s = 0.0;
  for (std::size_t t = 0; t < l0.size(); ++t) {
    const auto row = logits.row(t);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto v : row) z += std::exp(v - m);
    s += m + std::log(z) - row[l0[t]];
  }
  return s / static_cast<double>(l0.size());
}

/// One categorical draw per row.
inline std::vector<std::size_t> sample_rows(const Tensor<double>& belief, Rng& rng) {
  std::vector<std::size_t> out(belief.rows());
  for (std::size_t t = 0; t < belief.rows(); ++t) out[t] = rng.categorical(belief.row(t));
  return out;
}

}  // namespace mstdiff::ddiff
