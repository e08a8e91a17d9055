#pragma once

#include <complex>
#include <numbers>
#include <span>
#include <vector>

#include "mstdiff/errors.hpp"

namespace mstdiff {

using Spectrum = std::vector<std::complex<double>>;

namespace detail {

inline Spectrum dft_impl(std::span<const std::complex<double>> x, double sign) {
  const std::size_t n = x.size();
  // Twiddles indexed by (k*t mod n) keep the phase argument exact for large k*t.
  std::vector<std::complex<double>> twiddle(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
    twiddle[j] = {std::cos(angle), std::sin(angle)};
  }
  Spectrum out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc{0.0, 0.0};
    std::size_t idx = 0;
    for (std::size_t t = 0; t < n; ++t) {
      acc += x[t] * twiddle[idx];
      idx += k;
      if (idx >= n) idx %= n;
    }
    out[k] = acc;
  }
  return out;
}

}  // namespace detail

/// X[k] = sum_t x[t] exp(-2 pi i k t / T). Direct O(T^2) evaluation; T is a
/// few hundred in every caller.
inline Spectrum dft(std::span<const double> x) {
  if (x.empty()) throw ContractError("dft: empty input");
  std::vector<std::complex<double>> cx(x.begin(), x.end());
  return detail::dft_impl(cx, -1.0);
}

inline Spectrum dft(std::span<const std::complex<double>> x) {
  if (x.empty()) throw ContractError("dft: empty input");
  return detail::dft_impl(x, -1.0);
}

/// Inverse of dft(), including the 1/T factor.
inline Spectrum idft(std::span<const std::complex<double>> spectrum) {
  if (spectrum.empty()) throw ContractError("idft: empty input");
  auto out = detail::dft_impl(spectrum, 1.0);
  const double inv = 1.0 / static_cast<double>(spectrum.size());
  for (auto& v : out) v *= inv;
  return out;
}

}  // namespace mstdiff
