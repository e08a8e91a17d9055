#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/autodiff.hpp"
#include "mstdiff/numerics/params.hpp"
#include "mstdiff/numerics/rng.hpp"
#include "mstdiff/vqvae.hpp"
#include "mstdiff/wavelet.hpp"

namespace mstdiff::denoiser {

enum class HeadSource { Trunk, Finest };

struct DenoiserConfig {
  std::size_t series_length = 336;
  std::size_t num_locations = 25;
  std::size_t d_model = 64;
  std::size_t heads = 2;
  std::size_t blocks = 1;      // per scale
  std::size_t ffn_mult = 2;
  std::size_t step_dim = 128;  // sinusoidal step features
  std::size_t steps_per_day = 48;
  HeadSource head_source = HeadSource::Trunk;
  bool self_attention = true;  // per-stream self-attention ahead of the cross-attention
};

/// Frozen per-band VQ-VAEs shared by every denoiser copy.
using FrozenVq = std::shared_ptr<const std::array<vqvae::Vqvae, wavelet::kBands>>;

/// Sinusoidal features of the diffusion step (half sine, half cosine).
inline std::vector<double> step_features(std::size_t s, std::size_t dim) {
  std::vector<double> out(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(static_cast<double>(s) * freq);
    out[half + i] = std::cos(static_cast<double>(s) * freq);
  }
  return out;
}

/// Positional table initialiser for a band of `len` tokens covering a series
/// of `series_length` samples: daily harmonics of each token's time of day in
/// the first half of the channels, weekly harmonics in the second half.
inline Tensor<double> time_of_day_table(std::size_t len, std::size_t series_length, std::size_t steps_per_day,
                                        std::size_t d) {
  Tensor<double> out({len, d});
  const double stride = static_cast<double>(series_length) / static_cast<double>(len);
  for (std::size_t p = 0; p < len; ++p) {
    const double tau = (static_cast<double>(p) + 0.5) * stride;
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t harmonic = c / 2 % (d / 4 == 0 ? 1 : d / 4) + 1;
      const double period = c < d / 2 ? static_cast<double>(steps_per_day) : static_cast<double>(series_length);
      const double phase = 2.0 * std::numbers::pi * static_cast<double>(harmonic) * tau / period;
      out(p, c) = c % 2 == 0 ? std::sin(phase) : std::cos(phase);
    }
  }
  return out;
}

template <class T>
struct DenoiserOutput {
  ad::Var<T> eps_hat;  // [B x T]
  ad::Var<T> logits;   // [B*T x N]
};

template <class T>
class Denoiser {
 public:
  Denoiser() = default;

  Denoiser(const DenoiserConfig& cfg, FrozenVq vq, Rng& rng) : cfg_(cfg), vq_(std::move(vq)) {
    validate();
    build(rng);
  }

  const DenoiserConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }
  const FrozenVq& vq() const noexcept { return vq_; }
  void set_params(ParamSet<T> p) { params_ = std::move(p); }

  /// w_s: [B x T] concatenated noisy coefficients; belief: [B*T x N];
  /// steps: one diffusion step per user.
  DenoiserOutput<T> forward(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& p, const Tensor<T>& w_s,
                            const Tensor<T>& belief, const std::vector<std::size_t>& steps) const {
    const std::size_t batch = w_s.rows();
    const std::size_t len = cfg_.series_length;
    const std::size_t n = cfg_.num_locations;
    const std::size_t d = cfg_.d_model;
    if (w_s.cols() != len) {
      throw ShapeError("denoiser: coefficient length " + std::to_string(w_s.cols()) + " but model expects " +
                       std::to_string(len));
    }
    if (belief.rows() != batch * len || belief.cols() != n) {
      throw ShapeError("denoiser: belief must be [" + std::to_string(batch * len) + " x " + std::to_string(n) +
                       "], got " + shape_string(belief.shape()));
    }
    if (steps.size() != batch) throw ShapeError("denoiser: one step per user required");

    auto P = [&](const std::string& name) { return p[params_.index(name)]; };
    auto lin = [&](ad::Var<T> x, const std::string& pre) { return ad::linear(x, P(pre + ".w"), P(pre + ".b")); };
    auto ln = [&](ad::Var<T> x, const std::string& pre) { return ad::layer_norm(x, P(pre + ".g"), P(pre + ".b")); };

    Tensor<T> sf({batch, cfg_.step_dim});
    for (std::size_t b = 0; b < batch; ++b) {
      const auto f = step_features(steps[b], cfg_.step_dim);
      for (std::size_t i = 0; i < cfg_.step_dim; ++i) sf(b, i) = static_cast<T>(f[i]);
    }
    auto step_emb = lin(tape.constant(std::move(sf)), "step");  // [B x d]
    auto belief_var = tape.constant(belief);

    const auto blen = wavelet::band_lengths(len);
    const auto boff = wavelet::band_offsets(len);
    std::vector<ad::Var<T>> traffic_out, traj_out;
    ad::Var<T> carry_t{}, carry_j{};
    for (std::size_t k = 0; k < wavelet::kBands; ++k) {
      const std::string sc = "scale" + std::to_string(k);
      const std::size_t lk = blen[k];

      // (1) band slice and (2) gated fusion with the frozen VQ encoding.
      Tensor<T> band({batch * lk, 1});
      Tensor<double> band_d({batch, lk});
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < lk; ++i) {
          band[b * lk + i] = w_s(b, boff[k] + i);
          band_d(b, i) = static_cast<double>(w_s(b, boff[k] + i));
        }
      const auto& vqm = (*vq_)[k];
      const auto zq = vqvae::quantize(vqvae::encode_batch(vqm, band_d), vqm.codebook()).z_q;
      auto vq_tok = lin(ad::repeat_rows(tape.constant(zq.template cast<T>()), vqvae::Vqvae::kStride), sc + ".vq");
      auto raw = lin(tape.constant(std::move(band)), sc + ".raw");
      auto gate = ad::sigmoid(lin(ad::concat_cols<T>({raw, vq_tok}), sc + ".gate"));
      auto t = ad::add(vq_tok, ad::mul(gate, ad::sub(raw, vq_tok)));

      // (3) belief pooled to band length, shared MLP.
      auto pooled = ad::avgpool_rows(belief_var, len / lk);
      auto j = traj_mlp(pooled, lin);

      // (4) positional, band-type, stream-type and step embeddings.
      auto common = ad::add(ad::tile_rows(P(sc + ".pos"), batch), ad::repeat_rows(step_emb, lk));
      common = ad::add_row(common, ad::slice_rows(P("band_type"), k, 1));
      t = ad::add_row(ad::add(t, common), ad::slice_rows(P("stream_type"), 0, 1));
      j = ad::add_row(ad::add(j, common), ad::slice_rows(P("stream_type"), 1, 1));

      // (6) carry from the coarser scale.
      if (k > 0) {
        const std::size_t up = lk / blen[k - 1];
        t = ad::add(t, up == 1 ? carry_t : ad::repeat_rows(carry_t, up));
        j = ad::add(j, up == 1 ? carry_j : ad::repeat_rows(carry_j, up));
      }

      // (5) blocks.
      for (std::size_t blk = 0; blk < cfg_.blocks; ++blk) {
        const std::string pre = sc + ".block" + std::to_string(blk);
        auto both = ad::concat_cols<T>({t, j});
        t = ad::add(t, lin(both, pre + ".mix_t"));
        j = ad::add(j, lin(both, pre + ".mix_j"));
        if (cfg_.self_attention) {
          auto ts = ln(t, pre + ".sln_t");
          auto js = ln(j, pre + ".sln_j");
          t = ad::add(t, lin(ad::attention(lin(ts, pre + ".sq_t"), lin(ts, pre + ".sk_t"), lin(ts, pre + ".sv_t"), batch,
                                           cfg_.heads),
                             pre + ".so_t"));
          j = ad::add(j, lin(ad::attention(lin(js, pre + ".sq_j"), lin(js, pre + ".sk_j"), lin(js, pre + ".sv_j"), batch,
                                           cfg_.heads),
                             pre + ".so_j"));
        }
        auto tn = ln(t, pre + ".ln_t");
        auto jn = ln(j, pre + ".ln_j");
        auto t_att = ad::attention(lin(tn, pre + ".q_t"), lin(jn, pre + ".k_j"), lin(jn, pre + ".v_j"), batch, cfg_.heads);
        auto j_att = ad::attention(lin(jn, pre + ".q_j"), lin(tn, pre + ".k_t"), lin(tn, pre + ".v_t"), batch, cfg_.heads);
        t = ad::add(t, lin(t_att, pre + ".o_t"));
        j = ad::add(j, lin(j_att, pre + ".o_j"));
        t = ad::add(t, lin(ad::gelu(lin(ln(t, pre + ".ffn_ln_t"), pre + ".ffn1_t")), pre + ".ffn2_t"));
        j = ad::add(j, lin(ad::gelu(lin(ln(j, pre + ".ffn_ln_j"), pre + ".ffn1_j")), pre + ".ffn2_j"));
      }
      carry_t = t;
      carry_j = j;
      traffic_out.push_back(t);
      traj_out.push_back(j);
    }

    // (7) heads.
    auto trunk = ln(ad::interleave_segments(traffic_out, batch), "trunk_ln");
    auto eps = ad::reshape(lin(trunk, "eps_head"), {batch, len});

    // traj_head1 acts on [upsampled scale outputs | full-res belief MLP]; the
    // product is split by weight block so each scale is projected before it
    // is upsampled.
    std::vector<std::pair<ad::Var<T>, std::size_t>> feats;
    if (cfg_.head_source == HeadSource::Trunk) {
      for (std::size_t k = 0; k < wavelet::kBands; ++k) feats.emplace_back(traj_out[k], len / blen[k]);
    } else {
      feats.emplace_back(traj_out.back(), len / blen.back());
    }
    feats.emplace_back(traj_mlp(belief_var, lin), 1);
    auto w1 = P("traj_head1.w");
    ad::Var<T> pre{};
    for (std::size_t f = 0; f < feats.size(); ++f) {
      auto part = ad::matmul(feats[f].first, ad::slice_rows(w1, f * d, d));
      if (feats[f].second > 1) part = ad::repeat_rows(part, feats[f].second);
      pre = f == 0 ? part : ad::add(pre, part);
    }
    auto h = ad::gelu(ad::add_row(pre, P("traj_head1.b")));
    auto logits = lin(h, "traj_head2");
    return {eps, logits};
  }

  /// Forward on a non-recording tape; values only.
  std::pair<Tensor<T>, Tensor<T>> predict(const Tensor<T>& w_s, const Tensor<T>& belief,
                                          const std::vector<std::size_t>& steps) const {
    ad::Tape<T> tape(false);
    auto p = params_.bind(tape);
    auto out = forward(tape, p, w_s, belief, steps);
    return {out.eps_hat.value(), out.logits.value()};
  }

 private:
  template <class Lin>
  ad::Var<T> traj_mlp(ad::Var<T> belief, Lin& lin) const {
    return lin(ad::gelu(lin(belief, "traj_mlp1")), "traj_mlp2");
  }

  void validate() const {
    if (!vq_) throw ContractError("denoiser: frozen VQ-VAEs required");
    if (cfg_.series_length == 0 || cfg_.series_length % 16 != 0) {
      throw ShapeError("denoiser: series length must be a positive multiple of 16");
    }
    if (cfg_.num_locations < 2) throw ContractError("denoiser: need at least two locations");
    if (cfg_.d_model == 0 || cfg_.heads == 0 || cfg_.d_model % cfg_.heads != 0) {
      throw ContractError("denoiser: d_model must be a positive multiple of heads");
    }
    if (cfg_.step_dim < 2 || cfg_.step_dim % 2 != 0) throw ContractError("denoiser: step_dim must be even");
    const auto blen = wavelet::band_lengths(cfg_.series_length);
    for (std::size_t k = 0; k < wavelet::kBands; ++k) {
      if ((*vq_)[k].band_length != blen[k]) {
        throw ShapeError("denoiser: VQ-VAE for band " + std::to_string(k) + " expects length " +
                         std::to_string((*vq_)[k].band_length) + ", band has " + std::to_string(blen[k]));
      }
    }
  }

  void add_linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool zero = false) {
    params_.add(name + ".w", zero ? Tensor<T>({in, out}) : init_weight<T>({in, out}, rng));
    params_.add(name + ".b", Tensor<T>({out}));
  }

  void add_norm(const std::string& name, std::size_t d) {
    params_.add(name + ".g", Tensor<T>({d}, T(1)));
    params_.add(name + ".b", Tensor<T>({d}));
  }

  void build(Rng& rng) {
    const std::size_t d = cfg_.d_model, n = cfg_.num_locations;
    const auto blen = wavelet::band_lengths(cfg_.series_length);
    add_linear("step", cfg_.step_dim, d, rng);
    add_linear("traj_mlp1", n, d, rng);
    add_linear("traj_mlp2", d, d, rng);
    params_.add("band_type", init_normal<T>({wavelet::kBands, d}, rng, 0.1));
    params_.add("stream_type", init_normal<T>({2, d}, rng, 0.1));
    for (std::size_t k = 0; k < wavelet::kBands; ++k) {
      const std::string sc = "scale" + std::to_string(k);
      add_linear(sc + ".raw", 1, d, rng);
      add_linear(sc + ".vq", (*vq_)[k].latent, d, rng);
      add_linear(sc + ".gate", 2 * d, d, rng);
      params_.add(sc + ".pos", time_of_day_table(blen[k], cfg_.series_length, cfg_.steps_per_day, d).template cast<T>());
      for (std::size_t blk = 0; blk < cfg_.blocks; ++blk) {
        const std::string pre = sc + ".block" + std::to_string(blk);
        add_linear(pre + ".mix_t", 2 * d, d, rng);
        add_linear(pre + ".mix_j", 2 * d, d, rng);
        if (cfg_.self_attention) {
          add_norm(pre + ".sln_t", d);
          add_norm(pre + ".sln_j", d);
          for (const char* m : {"sq_t", "sk_t", "sv_t", "so_t", "sq_j", "sk_j", "sv_j", "so_j"})
            add_linear(pre + "." + m, d, d, rng);
        }
        add_norm(pre + ".ln_t", d);
        add_norm(pre + ".ln_j", d);
        for (const char* m : {"q_t", "k_j", "v_j", "o_t", "q_j", "k_t", "v_t", "o_j"}) add_linear(pre + "." + m, d, d, rng);
        add_norm(pre + ".ffn_ln_t", d);
        add_norm(pre + ".ffn_ln_j", d);
        add_linear(pre + ".ffn1_t", d, cfg_.ffn_mult * d, rng);
        add_linear(pre + ".ffn2_t", cfg_.ffn_mult * d, d, rng);
        add_linear(pre + ".ffn1_j", d, cfg_.ffn_mult * d, rng);
        add_linear(pre + ".ffn2_j", cfg_.ffn_mult * d, d, rng);
      }
    }
    add_norm("trunk_ln", d);
    add_linear("eps_head", d, 1, rng, true);
    const std::size_t feats = (cfg_.head_source == HeadSource::Trunk ? wavelet::kBands : 1) + 1;
    add_linear("traj_head1", feats * d, d, rng);
    add_linear("traj_head2", d, n, rng, true);
  }

  DenoiserConfig cfg_;
  FrozenVq vq_;
  ParamSet<T> params_;
};

}  // namespace mstdiff::denoiser
