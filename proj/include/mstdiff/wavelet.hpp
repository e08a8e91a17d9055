#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/tensor.hpp"

namespace mstdiff::wavelet {

inline constexpr std::size_t kLevels = 3;
inline constexpr std::size_t kBands = 4;

/// Three-level orthonormal Haar decomposition of one series. Bands are kept
/// coarse to fine: CA3, CD3, CD2, CD1.
struct WaveletStack {
  std::vector<double> ca3;
  std::vector<double> cd3;
  std::vector<double> cd2;
  std::vector<double> cd1;

  std::size_t length() const noexcept { return ca3.size() + cd3.size() + cd2.size() + cd1.size(); }

  const std::vector<double>& band(std::size_t k) const {
    switch (k) {
      case 0: return ca3;
      case 1: return cd3;
      case 2: return cd2;
      case 3: return cd1;
      default: throw ShapeError("wavelet band index out of range");
    }
  }
  std::vector<double>& band(std::size_t k) {
    return const_cast<std::vector<double>&>(static_cast<const WaveletStack&>(*this).band(k));
  }

  /// Concatenated view in band order (the diffusion state w).
  std::vector<double> concatenated() const {
    std::vector<double> out;
    out.reserve(length());
    for (std::size_t k = 0; k < kBands; ++k) out.insert(out.end(), band(k).begin(), band(k).end());
    return out;
  }
};

/// Band lengths (T/8, T/8, T/4, T/2).
inline std::array<std::size_t, kBands> band_lengths(std::size_t series_length) {
  return {series_length / 8, series_length / 8, series_length / 4, series_length / 2};
}

/// Offsets of each band inside the concatenated vector.
inline std::array<std::size_t, kBands> band_offsets(std::size_t series_length) {
  const auto len = band_lengths(series_length);
  return {0, len[0], len[0] + len[1], len[0] + len[1] + len[2]};
}

inline WaveletStack from_concatenated(std::span<const double> w) {
  if (w.size() % 8 != 0 || w.empty()) throw ShapeError("wavelet: length must be a positive multiple of 8");
  const auto len = band_lengths(w.size());
  const auto off = band_offsets(w.size());
  WaveletStack s;
  for (std::size_t k = 0; k < kBands; ++k)
    s.band(k).assign(w.begin() + static_cast<std::ptrdiff_t>(off[k]),
                     w.begin() + static_cast<std::ptrdiff_t>(off[k] + len[k]));
  return s;
}

/// One analysis level: approx[i] = (x[2i]+x[2i+1])/sqrt2, detail[i] = (x[2i]-x[2i+1])/sqrt2.
inline void haar_step(std::span<const double> x, std::vector<double>& approx, std::vector<double>& detail) {
  if (x.size() % 2 != 0) throw ShapeError("haar_step: odd length");
  const double r = std::numbers::sqrt2 / 2.0;
  approx.resize(x.size() / 2);
  detail.resize(x.size() / 2);
  for (std::size_t i = 0; i < x.size() / 2; ++i) {
    approx[i] = (x[2 * i] + x[2 * i + 1]) * r;
    detail[i] = (x[2 * i] - x[2 * i + 1]) * r;
  }
}

inline std::vector<double> haar_inverse_step(std::span<const double> approx, std::span<const double> detail) {
  if (approx.size() != detail.size()) throw ShapeError("haar_inverse_step: band length mismatch");
  const double r = std::numbers::sqrt2 / 2.0;
  std::vector<double> x(approx.size() * 2);
  for (std::size_t i = 0; i < approx.size(); ++i) {
    x[2 * i] = (approx[i] + detail[i]) * r;
    x[2 * i + 1] = (approx[i] - detail[i]) * r;
  }
  return x;
}

inline WaveletStack dwt3(std::span<const double> m) {
  if (m.empty() || m.size() % 8 != 0) {
    throw ShapeError("dwt3: series length " + std::to_string(m.size()) + " is not a positive multiple of 8");
  }
  WaveletStack s;
  std::vector<double> a1, a2;
  haar_step(m, a1, s.cd1);
  haar_step(a1, a2, s.cd2);
  haar_step(a2, s.ca3, s.cd3);
  return s;
}

inline std::vector<double> idwt3(const WaveletStack& w) {
  const std::size_t n = w.ca3.size();
  if (n == 0 || w.cd3.size() != n || w.cd2.size() != 2 * n || w.cd1.size() != 4 * n) {
    throw ShapeError("idwt3: band lengths must be (n, n, 2n, 4n)");
  }
  const auto a2 = haar_inverse_step(w.ca3, w.cd3);
  const auto a1 = haar_inverse_step(a2, w.cd2);
  return haar_inverse_step(a1, w.cd1);
}

/// Row-wise forward transform of a [U x T] matrix into concatenated stacks.
inline Tensor<double> dwt3_rows(const Tensor<double>& series) {
  Tensor<double> out(series.shape());
  for (std::size_t u = 0; u < series.rows(); ++u) {
    const auto w = dwt3(series.row(u)).concatenated();
    std::copy(w.begin(), w.end(), out.row(u).begin());
  }
  return out;
}

inline Tensor<double> idwt3_rows(const Tensor<double>& coeffs) {
  Tensor<double> out(coeffs.shape());
  for (std::size_t u = 0; u < coeffs.rows(); ++u) {
    const auto m = idwt3(from_concatenated(coeffs.row(u)));
    std::copy(m.begin(), m.end(), out.row(u).begin());
  }
  return out;
}

}  // namespace mstdiff::wavelet
