#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <vector>

#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/autodiff.hpp"
#include "mstdiff/numerics/params.hpp"
#include "mstdiff/numerics/rng.hpp"
#include "mstdiff/numerics/tensor.hpp"
#include "mstdiff/wavelet.hpp"

namespace mstdiff::vqvae {

struct VqvaeConfig {
  std::size_t hidden = 16;
  std::size_t latent = 16;
  std::size_t codebook_size = 32;
  double beta = 0.25;
  std::size_t epochs = 300;
  std::size_t batch = 32;
  double lr = 1e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 11;
};

/// One band's autoencoder. The encoder is a stride-2 width-2 convolution
/// followed by ReLU and a width-3 "same" convolution; the decoder mirrors it.
/// Latent sequences have length L/2.
struct Vqvae {
  ParamSet<double> params;
  std::size_t band_length = 0;
  std::size_t hidden = 0;
  std::size_t latent = 0;
  double beta = 0.25;

  static constexpr std::size_t kStride = 2;

  std::size_t latent_length() const noexcept { return band_length / kStride; }
  const Tensor<double>& codebook() const { return params.at("codebook"); }
  std::size_t codebook_size() const { return codebook().rows(); }

  static Vqvae init(std::size_t band_length, const VqvaeConfig& cfg, Rng& rng) {
    if (band_length == 0 || band_length % kStride != 0) {
      throw ShapeError("vqvae: band length " + std::to_string(band_length) + " is not a positive multiple of 2");
    }
    if (cfg.codebook_size < 2) throw ContractError("vqvae: codebook needs at least two entries");
    if (!(cfg.beta > 0.0)) throw ContractError("vqvae: beta must be positive");
    Vqvae v;
    v.band_length = band_length;
    v.hidden = cfg.hidden;
    v.latent = cfg.latent;
    v.beta = cfg.beta;
    const std::size_t h = cfg.hidden, d = cfg.latent;
    v.params.add("enc1.w", init_weight<double>({kStride, h}, rng));
    v.params.add("enc1.b", Tensor<double>({h}));
    v.params.add("enc2.w", init_weight<double>({3 * h, d}, rng));
    v.params.add("enc2.b", Tensor<double>({d}));
    v.params.add("dec1.w", init_weight<double>({3 * d, h}, rng));
    v.params.add("dec1.b", Tensor<double>({h}));
    v.params.add("dec2.w", init_weight<double>({h, kStride}, rng));
    v.params.add("dec2.b", Tensor<double>({kStride}));
    v.params.add("codebook", init_normal<double>({cfg.codebook_size, d}, rng, 0.1));
    return v;
  }
};

/// Parameter order inside bound vectors.
enum ParamSlot : std::size_t { kEnc1W, kEnc1B, kEnc2W, kEnc2B, kDec1W, kDec1B, kDec2W, kDec2B, kCodebook };

/// x: [B*L x 1] (B consecutive bands) -> z_e: [B*L/2 x d].
template <class T>
ad::Var<T> encode_graph(const std::vector<ad::Var<T>>& p, ad::Var<T> x, std::size_t band_length) {
  const std::size_t rows = x.rows();
  if (x.cols() != 1 || rows % band_length != 0) throw ShapeError("vqvae encode: input must be [B*L x 1]");
  auto pairs = ad::reshape(x, {rows / Vqvae::kStride, Vqvae::kStride});
  auto h = ad::relu(ad::linear(pairs, p[kEnc1W], p[kEnc1B]));
  return ad::conv1d_same(h, p[kEnc2W], p[kEnc2B], band_length / Vqvae::kStride, 3);
}

/// z: [B*L/2 x d] -> reconstruction [B*L x 1].
template <class T>
ad::Var<T> decode_graph(const std::vector<ad::Var<T>>& p, ad::Var<T> z, std::size_t band_length) {
  auto h = ad::relu(ad::conv1d_same(z, p[kDec1W], p[kDec1B], band_length / Vqvae::kStride, 3));
  auto out = ad::linear(h, p[kDec2W], p[kDec2B]);
  return ad::reshape(out, {z.rows() * Vqvae::kStride, 1});
}

/// Latents of a batch of bands given as rows of `bands` [B x L].
inline Tensor<double> encode_batch(const Vqvae& v, const Tensor<double>& bands) {
  if (bands.cols() != v.band_length) {
    throw ShapeError("vqvae encode: band length " + std::to_string(bands.cols()) + " but model expects " +
                     std::to_string(v.band_length));
  }
  ad::Tape<double> tape(false);
  auto p = v.params.bind(tape);
  auto x = tape.constant(bands.reshaped({bands.size(), 1}));
  return encode_graph(p, x, v.band_length).value();
}

inline Tensor<double> encode(const Vqvae& v, std::span<const double> band) {
  if (band.size() != v.band_length) {
    throw ShapeError("vqvae encode: band length " + std::to_string(band.size()) + " but model expects " +
                     std::to_string(v.band_length));
  }
  return encode_batch(v, Tensor<double>({1, band.size()}, std::vector<double>(band.begin(), band.end())));
}

struct Quantized {
  Tensor<double> z_q;
  std::vector<std::size_t> indices;
};

/// Nearest codebook entry per row; ties go to the lowest index.
inline Quantized quantize(const Tensor<double>& z_e, const Tensor<double>& codebook) {
  if (codebook.empty() || codebook.rows() == 0) throw ContractError("quantize: empty codebook");
  if (z_e.cols() != codebook.cols()) throw ShapeError("quantize: latent width differs from codebook width");
  Quantized q{Tensor<double>(z_e.shape()), std::vector<std::size_t>(z_e.rows())};
  const std::size_t d = z_e.cols();
  for (std::size_t i = 0; i < z_e.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t k = 0; k < codebook.rows(); ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = z_e(i, c) - codebook(k, c);
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        arg = k;
      }
    }
    q.indices[i] = arg;
    std::copy(codebook.row(arg).begin(), codebook.row(arg).end(), q.z_q.row(i).begin());
  }
  return q;
}

struct VqLoss {
  double total = 0.0;
  double rec = 0.0;
  double vq = 0.0;
  double commit = 0.0;  // already scaled by beta
};

inline double squared_distance(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) throw ShapeError("vq_loss: shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

/// Value of the loss for one sample; total = rec + vq + commit.
inline VqLoss vq_loss(const Tensor<double>& w, const Tensor<double>& w_hat, const Tensor<double>& z_e,
                      const Tensor<double>& z_q, double beta) {
  VqLoss l;
  l.rec = squared_distance(w, w_hat);
  l.vq = squared_distance(z_e, z_q);
  l.commit = beta * l.vq;
  l.total = l.rec + l.vq + l.commit;
  return l;
}

template <class T>
struct VqGraph {
  ad::Var<T> total, rec, vq, commit, z_e;
  std::vector<std::size_t> indices;
};

/// Differentiable loss over a batch of bands [B x L]: the codebook term only
/// reaches the codebook, the commitment term only the encoder, and the
/// decoder sees z_q through a straight-through estimator. Terms are summed
/// over each sample and averaged over the batch.
inline VqGraph<double> vq_loss_graph(ad::Tape<double>& tape, const std::vector<ad::Var<double>>& p,
                                     const Tensor<double>& bands, std::size_t band_length, double beta) {
  const std::size_t batch = bands.rows();
  auto x = tape.constant(bands.reshaped({bands.size(), 1}));
  auto z_e = encode_graph(p, x, band_length);
  auto q = quantize(z_e.value(), p[kCodebook].value());
  auto z_q = ad::gather_rows(p[kCodebook], q.indices);
  Tensor<double> shift = q.z_q;
  for (std::size_t i = 0; i < shift.size(); ++i) shift[i] -= z_e.value()[i];
  auto z_st = ad::add(z_e, tape.constant(std::move(shift)));
  auto w_hat = decode_graph(p, z_st, band_length);
  const double inv = 1.0 / static_cast<double>(batch);
  auto rec = ad::scale(ad::sum_squares(ad::sub(x, w_hat)), inv);
  auto vq = ad::scale(ad::sum_squares(ad::sub(tape.constant(z_e.value()), z_q)), inv);
  auto commit = ad::scale(ad::sum_squares(ad::sub(z_e, tape.constant(q.z_q))), beta * inv);
  auto total = ad::add(ad::add(rec, vq), commit);
  return {total, rec, vq, commit, z_e, std::move(q.indices)};
}

/// Mean per-sample reconstruction loss through the quantizer.
inline double reconstruction_loss(const Vqvae& v, const Tensor<double>& bands) {
  ad::Tape<double> tape(false);
  auto p = v.params.bind(tape);
  return vq_loss_graph(tape, p, bands, v.band_length, v.beta).rec.value()[0];
}

inline std::size_t codebook_usage(const Vqvae& v, const Tensor<double>& bands) {
  const auto q = quantize(encode_batch(v, bands), v.codebook());
  return std::set<std::size_t>(q.indices.begin(), q.indices.end()).size();
}

struct BandReport {
  double initial_rec = 0.0;  // held-out (or training, if no hold-out) mean rec loss
  double final_rec = 0.0;
  std::size_t codes_used = 0;
};

struct PretrainResult {
  std::array<Vqvae, wavelet::kBands> models;
  std::array<BandReport, wavelet::kBands> report;
};

inline Tensor<double> select_rows(const Tensor<double>& m, std::span<const std::size_t> idx) {
  Tensor<double> out({idx.size(), m.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy(m.row(idx[i]).begin(), m.row(idx[i]).end(), out.row(i).begin());
  return out;
}

/// Trains one VQ-VAE on rows of `bands` [U x L].
inline Vqvae pretrain_band(const Tensor<double>& bands, const VqvaeConfig& cfg, Rng& rng, BandReport& report) {
  const std::size_t users = bands.rows();
  if (users == 0) throw ContractError("vqvae pretrain: empty dataset");
  Vqvae v = Vqvae::init(bands.cols(), cfg, rng);

  std::vector<std::size_t> order(users);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = users; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  std::size_t n_hold = users >= 10 ? static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(users)) : 0;
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> hold(order.end() - static_cast<std::ptrdiff_t>(n_hold), order.end());
  const Tensor<double> train_bands = select_rows(bands, train);
  const Tensor<double> eval_bands = hold.empty() ? train_bands : select_rows(bands, hold);

  // Seed the codebook with encoder outputs so every entry starts near data.
  {
    const auto z = encode_batch(v, train_bands);
    auto& cb = v.params.at("codebook");
    for (std::size_t k = 0; k < cb.rows(); ++k) {
      const auto r = rng.uniform_int(z.rows());
      for (std::size_t c = 0; c < cb.cols(); ++c) cb(k, c) = z(r, c) + 0.01 * rng.normal();
    }
  }

  report.initial_rec = reconstruction_loss(v, eval_bands);
  Adam<double> opt({.lr = cfg.lr});
  std::vector<std::size_t> perm(train.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
    for (std::size_t start = 0; start < perm.size(); start += cfg.batch) {
      const std::size_t end = std::min(perm.size(), start + cfg.batch);
      const auto batch = select_rows(train_bands, std::span(perm).subspan(start, end - start));
      ad::Tape<double> tape(true);
      auto p = v.params.bind(tape);
      auto g = vq_loss_graph(tape, p, batch, v.band_length, v.beta);
      if (!std::isfinite(g.total.value()[0])) throw TrainingError("vqvae pretrain: non-finite loss");
      tape.backward(g.total);
      opt.step(v.params, v.params.gradients(tape, p));
    }
  }
  report.final_rec = reconstruction_loss(v, eval_bands);
  if (!std::isfinite(report.final_rec)) throw TrainingError("vqvae pretrain: non-finite loss");
  report.codes_used = codebook_usage(v, train_bands);
  return v;
}

/// One VQ-VAE per wavelet band. `coeffs` holds concatenated stacks [U x T].
inline PretrainResult pretrain(const Tensor<double>& coeffs, const VqvaeConfig& cfg) {
  if (coeffs.empty() || coeffs.rows() == 0) throw ContractError("vqvae pretrain: empty dataset");
  const auto len = wavelet::band_lengths(coeffs.cols());
  const auto off = wavelet::band_offsets(coeffs.cols());
  PretrainResult res;
  for (std::size_t k = 0; k < wavelet::kBands; ++k) {
    Tensor<double> bands({coeffs.rows(), len[k]});
    for (std::size_t u = 0; u < coeffs.rows(); ++u)
      for (std::size_t i = 0; i < len[k]; ++i) bands(u, i) = coeffs(u, off[k] + i);
    Rng rng(cfg.seed + 1000 * k);
    res.models[k] = pretrain_band(bands, cfg, rng, res.report[k]);
  }
  return res;
}

}  // namespace mstdiff::vqvae
