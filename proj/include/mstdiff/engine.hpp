#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <unordered_map>
#include <vector>

#include "mstdiff/cdiff.hpp"
#include "mstdiff/dataset.hpp"
#include "mstdiff/ddiff.hpp"
#include "mstdiff/denoiser.hpp"
#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/autodiff.hpp"
#include "mstdiff/numerics/params.hpp"
#include "mstdiff/numerics/rng.hpp"
#include "mstdiff/ukg.hpp"
#include "mstdiff/wavelet.hpp"

namespace mstdiff::engine {

using cdiff::GaussianSchedule;
using ukg::TransitionSchedule;

struct LossWeights {
  double tr = 1.0;    // lambda_1, noise MSE
  double tj = 1.0;    // lambda_2, posterior KL
  double pred = 0.1;  // lambda_3, x0 cross-entropy
};

struct LossBreakdown {
  double total = 0.0;
  double l_tr = 0.0;
  double l_tj = 0.0;
  double l_pred = 0.0;
  LossWeights weights;
  std::size_t degenerate = 0;  // posterior rows that needed the fallback
  double grad_norm = 0.0;      // pre-clip; 0 when no update was applied
};

inline LossBreakdown combine(double l_tr, double l_tj, double l_pred, const LossWeights& w) {
  LossBreakdown b;
  b.l_tr = l_tr;
  b.l_tj = l_tj;
  b.l_pred = l_pred;
  b.weights = w;
  b.total = w.tr * l_tr + w.tj * l_tj + w.pred * l_pred;
  return b;
}

/// Everything drawn for one training step, before the network runs.
template <class T>
struct PreparedBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> steps;        // s per user
  Tensor<double> w0, eps, w_s;           // [B x T]
  std::vector<std::size_t> l0, l_s;      // B*T
  Tensor<double> belief;                 // q(l_s | l0), [B*T x N]
  Tensor<double> net_belief;             // what the network sees
  Tensor<double> target;                 // q(l_{s-1} | l_s, l0), [B*T x N]
  std::shared_ptr<const Tensor<T>> posterior_mats;  // [K x N x N]
  std::vector<std::size_t> mat_index;    // B*T entries into posterior_mats
  std::size_t degenerate = 0;
};

/// Draws s, eps, w_s, l_s for each user of the batch. `traffic` holds the
/// normalised series [B x T]; `trajectory` the matching B*T locations.
template <class T>
PreparedBatch<T> prepare_batch(const Tensor<double>& traffic, std::span<const std::size_t> trajectory,
                               const GaussianSchedule& gs, const TransitionSchedule& ts, bool feed_onehot, Rng& rng) {
  PreparedBatch<T> pb;
  pb.batch = traffic.rows();
  pb.length = traffic.cols();
  const std::size_t b_n = pb.batch, len = pb.length, n = ts.num_states;
  if (b_n == 0) throw ContractError("train_step: empty batch");
  if (trajectory.size() != b_n * len) throw ShapeError("train_step: trajectory size does not match traffic");
  if (gs.steps() != ts.steps()) throw ContractError("train_step: traffic and trajectory schedules differ in length");
  ddiff::check_locations(trajectory, n, "train_step");

  pb.w0 = wavelet::dwt3_rows(traffic);
  pb.eps = Tensor<double>(traffic.shape());
  pb.w_s = Tensor<double>(traffic.shape());
  pb.l0.assign(trajectory.begin(), trajectory.end());
  pb.l_s.resize(b_n * len);
  pb.belief = Tensor<double>({b_n * len, n});
  pb.target = Tensor<double>({b_n * len, n});
  pb.mat_index.resize(b_n * len);

  std::unordered_map<std::size_t, std::size_t> mat_slot;
  std::vector<std::size_t> mat_keys;
  for (std::size_t b = 0; b < b_n; ++b) {
    const std::size_t s = 1 + rng.uniform_int(gs.steps());
    pb.steps.push_back(s);
    auto eps = pb.eps.row(b);
    for (auto& v : eps) v = rng.normal();
    const auto ws = cdiff::forward_noise(pb.w0.row(b), s, gs, eps);
    std::copy(ws.begin(), ws.end(), pb.w_s.row(b).begin());

    const auto& qb = ts.qbar_at(s);
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t r = b * len + t;
      const auto src = qb.row(pb.l0[r]);
      std::copy(src.begin(), src.end(), pb.belief.row(r).begin());
      pb.l_s[r] = rng.categorical(src);
      ddiff::posterior_row(pb.l_s[r], pb.l0[r], s, ts, pb.target.row(r), &pb.degenerate);
      const std::size_t key = (s - 1) * n + pb.l_s[r];
      auto [it, inserted] = mat_slot.try_emplace(key, mat_keys.size());
      if (inserted) mat_keys.push_back(key);
      pb.mat_index[r] = it->second;
    }
  }
  auto mats = std::make_shared<Tensor<T>>(Shape{mat_keys.size(), n, n});
  for (std::size_t k = 0; k < mat_keys.size(); ++k) {
    const std::size_t s = mat_keys[k] / n + 1, ls = mat_keys[k] % n;
    const auto m = ddiff::posterior_matrix(ls, s, ts);
    for (std::size_t i = 0; i < n * n; ++i) (*mats)[k * n * n + i] = static_cast<T>(m[i]);
  }
  pb.posterior_mats = std::move(mats);

  if (feed_onehot) {
    pb.net_belief = Tensor<double>({b_n * len, n});
    for (std::size_t r = 0; r < b_n * len; ++r) pb.net_belief(r, pb.l_s[r]) = 1.0;
  } else {
    pb.net_belief = pb.belief;
  }
  return pb;
}

template <class T>
struct LossGraph {
  ad::Var<T> total, l_tr, l_tj, l_pred;
  ad::Var<T> eps_hat, logits, model_dist;
};

/// lambda_1 MSE(eps, eps_hat) + lambda_2 KL(target || p_theta) + lambda_3 CE(l0, z),
/// with p_theta(l_{s-1} | l_s) = sum_j softmax(z)_j q(l_{s-1} | l_s, j).
template <class T>
LossGraph<T> build_loss(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& p, const denoiser::Denoiser<T>& net,
                        const PreparedBatch<T>& pb, const LossWeights& w) {
  auto out = net.forward(tape, p, pb.w_s.template cast<T>(), pb.net_belief.template cast<T>(), pb.steps);
  LossGraph<T> g;
  g.eps_hat = out.eps_hat;
  g.logits = out.logits;
  g.l_tr = ad::mse(out.eps_hat, tape.constant(pb.eps.template cast<T>()));
  g.model_dist = ad::rowwise_vecmat(ad::softmax_rows(out.logits), pb.posterior_mats, pb.mat_index);
  g.l_tj = ad::kl_rows(pb.target.template cast<T>(), g.model_dist, static_cast<T>(ddiff::kProbFloor));
  g.l_pred = ad::cross_entropy(out.logits, pb.l0);
  g.total = ad::add(ad::add(ad::scale(g.l_tr, static_cast<T>(w.tr)), ad::scale(g.l_tj, static_cast<T>(w.tj))),
                    ad::scale(g.l_pred, static_cast<T>(w.pred)));
  return g;
}

/// Intermediates of one step, for audit.
struct TrainTrace {
  std::vector<std::size_t> steps;
  Tensor<double> w0, eps, w_s, belief, net_belief, target;
  std::vector<std::size_t> l0, l_s;
  Tensor<double> eps_hat, logits, model_dist;
  LossBreakdown loss;
};

struct TrainStepOptions {
  LossWeights weights;
  bool feed_onehot = false;
  bool apply_update = true;
};

template <class T>
LossBreakdown train_step(denoiser::Denoiser<T>& net, Adam<T>& opt, const Tensor<double>& traffic,
                         std::span<const std::size_t> trajectory, const GaussianSchedule& gs,
                         const TransitionSchedule& ts, const TrainStepOptions& o, Rng& rng,
                         TrainTrace* trace = nullptr) {
  const auto pb = prepare_batch<T>(traffic, trajectory, gs, ts, o.feed_onehot, rng);
  ad::Tape<T> tape(o.apply_update);
  auto p = net.params().bind(tape);
  auto g = build_loss(tape, p, net, pb, o.weights);
  auto b = combine(static_cast<double>(g.l_tr.value()[0]), static_cast<double>(g.l_tj.value()[0]),
                   static_cast<double>(g.l_pred.value()[0]), o.weights);
  b.degenerate = pb.degenerate;
  if (!std::isfinite(b.total)) {
    std::ostringstream msg;
    msg << "train_step: non-finite loss (l_tr=" << b.l_tr << ", l_tj=" << b.l_tj << ", l_pred=" << b.l_pred
        << ", lambda=" << o.weights.tr << "/" << o.weights.tj << "/" << o.weights.pred << ", steps=";
    for (auto s : pb.steps) msg << s << ' ';
    msg << ")";
    throw TrainingError(msg.str());
  }
  if (o.apply_update) {
    tape.backward(g.total);
    b.grad_norm = opt.step(net.params(), net.params().gradients(tape, p));
  }
  if (trace) {
    trace->steps = pb.steps;
    trace->w0 = pb.w0;
    trace->eps = pb.eps;
    trace->w_s = pb.w_s;
    trace->belief = pb.belief;
    trace->net_belief = pb.net_belief;
    trace->target = pb.target;
    trace->l0 = pb.l0;
    trace->l_s = pb.l_s;
    trace->eps_hat = g.eps_hat.value().template cast<double>();
    trace->logits = g.logits.value().template cast<double>();
    trace->model_dist = g.model_dist.value().template cast<double>();
    trace->loss = b;
  }
  return b;
}

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr = 1e-3;
  double clip_norm = 1.0;
  LossWeights weights;
  bool feed_onehot = false;
  std::uint64_t seed = 1;
};

struct TrainLogEntry {
  std::size_t step = 0;
  LossBreakdown loss;
  double wall_seconds = 0.0;
};

/// Algorithm-1 loop over random mini-batches of `data`. `on_step` sees every
/// step's losses.
template <class T>
void train(denoiser::Denoiser<T>& net, const Dataset& data, const GaussianSchedule& gs, const TransitionSchedule& ts,
           const TrainConfig& cfg, const std::function<void(const TrainLogEntry&)>& on_step = {}) {
  if (data.users() == 0) throw ContractError("train: empty dataset");
  Rng rng(cfg.seed);
  Adam<T> opt({.lr = cfg.lr, .clip_norm = cfg.clip_norm});
  const TrainStepOptions o{cfg.weights, cfg.feed_onehot, true};
  const std::size_t len = data.length();
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::size_t b_n = std::min(cfg.batch, data.users());
    Tensor<double> traffic({b_n, len});
    std::vector<std::size_t> traj(b_n * len);
    for (std::size_t b = 0; b < b_n; ++b) {
      const std::size_t u = rng.uniform_int(data.users());
      std::copy(data.traffic.row(u).begin(), data.traffic.row(u).end(), traffic.row(b).begin());
      const auto src = data.user_trajectory(u);
      std::copy(src.begin(), src.end(), traj.begin() + static_cast<std::ptrdiff_t>(b * len));
    }
    TrainLogEntry e;
    e.step = step;
    e.loss = train_step(net, opt, traffic, traj, gs, ts, o, rng);
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (on_step) on_step(e);
  }
}

// ------------------------------------------------------------------ sampling

struct SampleConfig {
  std::size_t users = 200;
  std::size_t chunk = 50;  // users per network call
  bool feed_onehot = false;
  std::uint64_t seed = 2;
};

/// One reverse step of the trajectory chain, for audit.
struct SampleStepRecord {
  std::size_t s = 0;
  std::vector<std::size_t> l_s;       // state entering the step
  Tensor<double> network_belief;      // what the network saw
  Tensor<double> x0_probs;            // softmax(z_s)
  std::vector<std::size_t> l0_hat;    // sampled estimate of l_0
  Tensor<double> posterior;           // q(l_{s-1} | l_s, l0_hat)
  Tensor<double> p_l;                 // p_L after the step
  std::vector<std::size_t> l_next;    // sampled l_{s-1}
  std::vector<double> w_next;         // traffic coefficients after the step (first user)
};

struct SampleResult {
  Tensor<double> traffic;                // [U x T] clipped to [0, 1]
  std::vector<std::size_t> trajectory;   // U*T
  std::size_t degenerate = 0;
};

inline Tensor<double> softmax_rows(const Tensor<double>& logits) {
  Tensor<double> out(logits.shape());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    double m = row[0];
    for (double v : row) m = std::max(m, v);
    double z = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) z += out(r, c) = std::exp(row[c] - m);
    for (std::size_t c = 0; c < row.size(); ++c) out(r, c) /= z;
  }
  return out;
}

/// Algorithm-2 co-denoising. Every user draws from its own stream
/// (seed forked by user index), so results do not depend on `chunk`.
/// `trace`, when given, records every step of the first chunk.
template <class T>
SampleResult sample(const denoiser::Denoiser<T>& net, const GaussianSchedule& gs, const TransitionSchedule& ts,
                    const SampleConfig& cfg, std::vector<SampleStepRecord>* trace = nullptr) {
  const std::size_t len = net.config().series_length, n = ts.num_states, steps = gs.steps();
  if (n != net.config().num_locations) throw ContractError("sample: schedule and network disagree on N");
  if (steps != ts.steps()) throw ContractError("sample: traffic and trajectory schedules differ in length");
  if (cfg.users == 0 || cfg.chunk == 0) throw ContractError("sample: users and chunk must be positive");
  SampleResult res;
  res.traffic = Tensor<double>({cfg.users, len});
  res.trajectory.resize(cfg.users * len);
  const Rng root(cfg.seed);

  for (std::size_t first = 0; first < cfg.users; first += cfg.chunk) {
    const std::size_t b_n = std::min(cfg.chunk, cfg.users - first);
    std::vector<Rng> rngs;
    for (std::size_t b = 0; b < b_n; ++b) rngs.push_back(root.fork(first + b));
    const bool tracing = trace && first == 0;

    Tensor<double> w({b_n, len});
    std::vector<std::size_t> l(b_n * len);
    for (std::size_t b = 0; b < b_n; ++b) {
      for (auto& v : w.row(b)) v = rngs[b].normal();
      for (std::size_t t = 0; t < len; ++t) l[b * len + t] = rngs[b].uniform_int(n);
    }
    Tensor<double> p_l({b_n * len, n}, 1.0 / static_cast<double>(n));

    for (std::size_t s = steps; s >= 1; --s) {
      Tensor<double> input = p_l;
      if (cfg.feed_onehot) {
        input = Tensor<double>({b_n * len, n});
        for (std::size_t r = 0; r < b_n * len; ++r) input(r, l[r]) = 1.0;
      }
      const auto [eps_t, logits_t] = net.predict(w.template cast<T>(), input.template cast<T>(),
                                                 std::vector<std::size_t>(b_n, s));
      const auto eps_hat = eps_t.template cast<double>();
      for (std::size_t b = 0; b < b_n; ++b) {
        std::vector<double> z(len, 0.0);
        if (s > 1)
          for (auto& v : z) v = rngs[b].normal();
        const auto next = cdiff::reverse_step(w.row(b), eps_hat.row(b), s, gs, z);
        for (double v : next)
          if (!std::isfinite(v)) {
            throw NumericError("sample: non-finite traffic coefficient at step " + std::to_string(s) + " for user " +
                               std::to_string(first + b));
          }
        std::copy(next.begin(), next.end(), w.row(b).begin());
      }
      const auto probs = softmax_rows(logits_t.template cast<double>());
      std::vector<std::size_t> l0_hat(b_n * len);
      for (std::size_t b = 0; b < b_n; ++b)
        for (std::size_t t = 0; t < len; ++t) l0_hat[b * len + t] = rngs[b].categorical(probs.row(b * len + t));
      Tensor<double> post;
      if (tracing) post = ddiff::posterior(l, l0_hat, s, ts);
      auto next_p = ddiff::reverse_marginalize(probs, l, s, ts, &res.degenerate);
      std::vector<std::size_t> l_next(b_n * len);
      for (std::size_t b = 0; b < b_n; ++b)
        for (std::size_t t = 0; t < len; ++t) l_next[b * len + t] = rngs[b].categorical(next_p.row(b * len + t));
      if (tracing) {
        SampleStepRecord rec;
        rec.s = s;
        rec.l_s = l;
        rec.network_belief = input;
        rec.x0_probs = probs;
        rec.l0_hat = l0_hat;
        rec.posterior = std::move(post);
        rec.p_l = next_p;
        rec.l_next = l_next;
        rec.w_next.assign(w.row(0).begin(), w.row(0).end());
        trace->push_back(std::move(rec));
      }
      p_l = std::move(next_p);
      l = std::move(l_next);
    }

    const auto m = wavelet::idwt3_rows(w);
    for (std::size_t b = 0; b < b_n; ++b) {
      for (std::size_t t = 0; t < len; ++t) res.traffic(first + b, t) = std::clamp(m(b, t), 0.0, 1.0);
      std::copy(l.begin() + static_cast<std::ptrdiff_t>(b * len), l.begin() + static_cast<std::ptrdiff_t>((b + 1) * len),
                res.trajectory.begin() + static_cast<std::ptrdiff_t>((first + b) * len));
    }
  }
  return res;
}

}  // namespace mstdiff::engine
