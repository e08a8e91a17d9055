#pragma once

// Small model and schedule fixtures shared by the denoiser, engine and
// acceptance tests.

#include <memory>

#include "mstdiff/cdiff.hpp"
#include "mstdiff/denoiser.hpp"
#include "mstdiff/ukg.hpp"
#include "mstdiff/vqvae.hpp"

namespace tiny {

using namespace mstdiff;

inline denoiser::DenoiserConfig config(std::size_t len = 16, std::size_t n = 4, std::size_t d = 8) {
  denoiser::DenoiserConfig c;
  c.series_length = len;
  c.num_locations = n;
  c.d_model = d;
  c.heads = 2;
  c.blocks = 1;
  c.step_dim = 8;
  c.steps_per_day = 4;
  return c;
}

inline denoiser::FrozenVq frozen_vq(std::size_t len, Rng& rng) {
  vqvae::VqvaeConfig vc;
  vc.hidden = 4;
  vc.latent = 4;
  vc.codebook_size = 4;
  auto vq = std::make_shared<std::array<vqvae::Vqvae, wavelet::kBands>>();
  const auto bl = wavelet::band_lengths(len);
  for (std::size_t k = 0; k < wavelet::kBands; ++k) (*vq)[k] = vqvae::Vqvae::init(bl[k], vc, rng);
  return vq;
}

/// Replaces the zero-initialised heads with small random values so every
/// parameter influences the loss.
template <class T>
void randomize_heads(denoiser::Denoiser<T>& net, Rng& rng) {
  for (const char* name : {"eps_head.w", "eps_head.b", "traj_head2.w", "traj_head2.b"}) {
    auto& p = net.params().at(name);
    p = init_normal<T>(p.shape(), rng, 0.3);
  }
}

inline Tensor<double> ring(std::size_t n) {
  Tensor<double> a({n, n});
  for (std::size_t i = 0; i < n; ++i) a(i, (i + 1) % n) = 1.0;
  return a;
}

inline ukg::TransitionSchedule trajectory_schedule(std::size_t n, std::size_t steps) {
  ukg::ScheduleConfig sc;
  sc.steps = steps;
  return ukg::build_schedule(ring(n), 1, sc);
}

inline cdiff::GaussianSchedule traffic_schedule(std::size_t steps) {
  return cdiff::GaussianSchedule::linear(steps, 0.02, 0.4);
}

}  // namespace tiny
