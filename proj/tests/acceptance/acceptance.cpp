// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.
//
//   acceptance [--only 1,2,...] [--work DIR] [--keep]
//
// Criteria 8 and 9 run the full pipeline twice at the default config, which
// takes roughly 25 minutes on one core.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mstdiff/mstdiff.hpp"
#include "mstdiff/numerics/grad_check.hpp"
#include "support/oracles.hpp"
#include "support/tiny.hpp"

namespace fs = std::filesystem;
using namespace mstdiff;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

Tensor<double> random_connected(std::size_t n, Rng& rng) {
  Tensor<double> a({n, n});
  for (std::size_t i = 0; i < n; ++i) a(i, (i + 1) % n) = 1.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && rng.uniform() < 0.2) a(i, j) = 1.0;
  return a;
}

// 1. Discrete posterior against Bayes enumeration.
Outcome posterior_oracle() {
  Rng rng(101);
  double worst = 0.0;
  for (std::size_t n = 1; n <= 4; ++n)
    for (std::size_t steps = 1; steps <= 3; ++steps)
      for (int rep = 0; rep < 5; ++rep) {
        std::vector<Tensor<double>> ks;
        for (std::size_t s = 0; s < steps; ++s) ks.push_back(oracle::random_stochastic(n, rng));
        const auto sched = ukg::TransitionSchedule::from_kernels(ks);
        for (std::size_t s = 1; s <= steps; ++s)
          for (std::size_t ls = 0; ls < n; ++ls)
            for (std::size_t l0 = 0; l0 < n; ++l0) {
              const auto p = ddiff::posterior(std::vector{ls}, std::vector{l0}, s, sched);
              const auto ref = oracle::bayes_posterior(ks, s, ls, l0);
              for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(p(0, j) - ref[j]));
            }
      }
  return {worst < 1e-10, "max |diff| " + fmt(worst)};
}

// 2. Closed-form kernels against explicit products, stochasticity, terminal
// uniformity.
Outcome kernel_oracle() {
  Rng rng(102);
  double prod_err = 0.0, sum_err = 0.0, gap = 0.0;
  for (std::size_t n = 2; n <= 10; ++n) {
    const std::size_t steps = 20;
    const auto sched = ukg::build_schedule(random_connected(n, rng), 2, {.steps = steps});
    Tensor<double> prod = Tensor<double>::identity(n);
    for (std::size_t s = 1; s <= steps; ++s) {
      prod = oracle::triple_loop_matmul(prod, sched.q_at(s));
      prod_err = std::max(prod_err, max_abs_diff(prod, sched.qbar_at(s)));
      for (const auto* m : {&sched.q_at(s), &sched.qbar_at(s)})
        for (std::size_t i = 0; i < n; ++i) {
          double r = 0.0, c = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            r += (*m)(i, j);
            c += (*m)(j, i);
          }
          sum_err = std::max({sum_err, std::abs(r - 1.0), std::abs(c - 1.0)});
        }
    }
    const auto& last = sched.qbar_at(steps);
    for (double v : last.data()) gap = std::max(gap, std::abs(v - 1.0 / static_cast<double>(n)));
  }
  return {prod_err < 1e-8 && sum_err < 1e-9 && gap < 1e-3,
          "product " + fmt(prod_err) + ", row/col sums " + fmt(sum_err) + ", terminal gap " + fmt(gap, 6)};
}

// 3. Wavelet round trip and energy preservation.
Outcome wavelet_round_trip() {
  Rng rng(103);
  double rec = 0.0, energy = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> m(336);
    for (auto& v : m) v = rng.normal();
    const auto w = wavelet::dwt3(m);
    const auto back = wavelet::idwt3(w);
    double em = 0.0, ew = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      rec = std::max(rec, std::abs(back[i] - m[i]));
      em += m[i] * m[i];
    }
    for (double v : w.concatenated()) ew += v * v;
    energy = std::max(energy, std::abs(em - ew));
  }
  return {rec < 1e-10 && energy < 1e-9, "reconstruction " + fmt(rec) + ", energy " + fmt(energy)};
}

// 4. Finite-difference check of the full loss on the tiny denoiser.
Outcome gradient_check() {
  Rng rng(104);
  denoiser::Denoiser<double> net(tiny::config(), tiny::frozen_vq(16, rng), rng);
  tiny::randomize_heads(net, rng);
  const auto gs = tiny::traffic_schedule(6);
  const auto ts = tiny::trajectory_schedule(4, 6);
  Tensor<double> traffic({2, 16});
  for (auto& v : traffic.data()) v = rng.uniform();
  std::vector<std::size_t> traj(32);
  for (auto& l : traj) l = rng.uniform_int(4);
  const auto pb = engine::prepare_batch<double>(traffic, traj, gs, ts, false, rng);
  const auto res = grad_check(
      [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& p) {
        return engine::build_loss(tape, p, net, pb, {}).total;
      },
      net.params());
  return {res.max_rel_error < 1e-4 && res.checked == net.params().scalar_count(),
          "max rel error " + fmt(res.max_rel_error) + " over " + std::to_string(res.checked) + " parameters"};
}

// 5. Monte Carlo forward chains against closed-form marginals.
Outcome forward_chains() {
  Rng rng(105);
  const std::size_t n = 8, steps = 10, samples = 100000;
  const auto sched = ukg::build_schedule(random_connected(n, rng), 2, {.steps = steps, .growth = 1.5});
  std::vector<std::vector<double>> counts(steps + 1, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < samples; ++i) {
    std::size_t l = 0;
    for (std::size_t s = 1; s <= steps; ++s) {
      l = rng.categorical(sched.q_at(s).row(l));
      counts[s][l] += 1.0;
    }
  }
  double tv = 0.0;
  for (std::size_t s = 1; s <= steps; ++s) {
    std::vector<double> emp(n), ref(n);
    for (std::size_t j = 0; j < n; ++j) {
      emp[j] = counts[s][j] / static_cast<double>(samples);
      ref[j] = sched.qbar_at(s)(0, j);
    }
    tv = std::max(tv, oracle::total_variation(emp, ref));
  }

  const auto g = cdiff::GaussianSchedule::linear(10, 0.05, 0.3);
  const std::size_t s = 7;
  const double w0 = 1.7;
  std::vector<double> eps(samples), init(samples, w0);
  for (auto& v : eps) v = rng.normal();
  const auto ws = cdiff::forward_noise(init, s, g, eps);
  double mean = 0.0, var = 0.0;
  for (double x : ws) mean += x;
  mean /= static_cast<double>(samples);
  for (double x : ws) var += (x - mean) * (x - mean);
  var /= static_cast<double>(samples);
  const double ref_mean = std::sqrt(g.alpha_bar_at(s)) * w0, ref_var = 1.0 - g.alpha_bar_at(s);
  const double mean_rel = std::abs(mean - ref_mean) / std::abs(ref_mean), var_rel = std::abs(var - ref_var) / ref_var;
  return {tv < 0.02 && mean_rel < 0.02 && var_rel < 0.02,
          "max TV " + fmt(tv) + ", mean rel " + fmt(mean_rel) + ", variance rel " + fmt(var_rel)};
}

// 6. Reverse steps with oracle noise and no injected randomness.
Outcome reverse_algebra() {
  const std::size_t steps = 4, len = 8;
  const auto g = cdiff::GaussianSchedule::linear(steps, 0.1, 0.4);
  Rng rng(106);
  std::vector<double> w0(len), eps(len);
  for (auto& v : w0) v = rng.normal();
  for (auto& v : eps) v = rng.normal();
  auto w = cdiff::forward_noise(w0, steps, g, eps);
  const std::vector<double> z(len, 0.0);
  for (std::size_t s = steps; s >= 1; --s) {
    std::vector<double> oracle_eps(len);
    for (std::size_t i = 0; i < len; ++i)
      oracle_eps[i] = (w[i] - std::sqrt(g.alpha_bar_at(s)) * w0[i]) / std::sqrt(1 - g.alpha_bar_at(s));
    w = cdiff::reverse_step(w, oracle_eps, s, g, z);
  }
  double err = 0.0;
  for (std::size_t i = 0; i < len; ++i) err = std::max(err, std::abs(w[i] - w0[i]));
  return {err < 1e-5, "max |w - w0| " + fmt(err)};
}

// 7. Metric identities.
Outcome metric_identities() {
  Rng rng(107);
  const std::size_t users = 20, n = 8, T = 336;
  Tensor<double> traffic({users, T});
  std::vector<std::size_t> traj(users * T);
  for (std::size_t u = 0; u < users; ++u) {
    const std::size_t home = rng.uniform_int(n), work = (home + 1) % n;
    for (std::size_t t = 0; t < T; ++t) {
      traffic(u, t) = std::clamp(0.5 - 0.4 * std::cos(2 * std::numbers::pi * static_cast<double>(t % 48) / 48.0) +
                                     0.05 * rng.normal(),
                                 0.0, 1.0);
      traj[u * T + t] = (t % 48) >= 18 && (t % 48) < 36 ? work : home;
    }
  }
  Tensor<double> coords({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    coords(i, 0) = 10.0 + 0.01 * static_cast<double>(i % 4);
    coords(i, 1) = 45.0 + 0.01 * static_cast<double>(i / 4);
  }
  const auto r = metrics::evaluate(traffic, traj, traffic, traj, coords);
  double self = 0.0;
  for (double v : r.values()) self = std::max(self, std::abs(v));

  bool bounded = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 1 + rng.uniform_int(20);
    std::vector<double> a(k), b(k);
    for (auto& v : a) v = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
    for (auto& v : b) v = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
    a[0] += 1e-3;
    b[k - 1] += 1e-3;
    const double d = metrics::jsd(metrics::normalized(a), metrics::normalized(b));
    bounded = bounded && d >= 0.0 && d <= std::numbers::ln2;
  }
  const double disjoint = metrics::jsd(std::vector<double>{1, 0}, std::vector<double>{0, 1});
  const double disjoint_err = std::abs(disjoint - std::numbers::ln2);
  return {self == 0.0 && bounded && disjoint_err < 1e-12,
          "self max " + fmt(self) + ", bounds " + (bounded ? "hold" : "violated") + ", |jsd - ln2| " + fmt(disjoint_err)};
}

// ---------------------------------------------------------------- end to end

struct PipelineResult {
  pipeline::Evaluation trained, untrained;
  double seconds = 0.0;
  fs::path dir;
};

PipelineResult run_pipeline(const fs::path& dir) {
  fs::remove_all(dir);
  pipeline::Run run;
  run.dir = dir;
  run.log = &std::cerr;
  const auto t0 = Clock::now();
  pipeline::synth(run);
  pipeline::pretrain_vqvae(run);
  pipeline::train_kg(run);
  pipeline::build_schedule(run);
  pipeline::train(run);
  const auto gen = pipeline::sample(run, false, dir / "samples");
  const auto base = pipeline::sample(run, true, dir / "samples_untrained");
  const auto real = pipeline::load_dataset(run);
  PipelineResult r;
  r.trained = pipeline::evaluate(run.cfg, real, gen, dir / "eval_trained");
  r.untrained = pipeline::evaluate(run.cfg, real, base, dir / "eval_untrained");
  r.seconds = seconds_since(t0);
  r.dir = dir;
  return r;
}

Outcome end_to_end(const PipelineResult& r) {
  Outcome o;
  std::ostringstream d;
  const auto names = metrics::MetricsReport::names();
  const auto tv = r.trained.report.values(), uv = r.untrained.report.values();
  std::vector<std::string> lost;
  for (std::size_t i = 0; i < names.size(); ++i) {
    d << names[i] << " " << fmt(tv[i]) << " vs " << fmt(uv[i]) << "; ";
    if (!(tv[i] < uv[i])) lost.push_back(names[i]);
  }
  if (!lost.empty()) {
    o.pass = false;
    d << "not better than untrained:";
    for (const auto& n : lost) d << " " << n;
    d << "; ";
  }
  for (const std::string key : {"traffic_volume_jsd", "first_diff_jsd"}) {
    const auto i = static_cast<std::size_t>(std::find(names.begin(), names.end(), key) - names.begin());
    if (i == names.size() || !(tv[i] < 0.5 * uv[i])) {
      o.pass = false;
      d << key << " not below half of baseline; ";
    }
  }
  const auto& a = r.trained.archetype;
  if (!a || !(a->generated > 0.8)) o.pass = false;
  d << "archetype agreement " << (a ? fmt(a->generated) : std::string("n/a")) << "; ";
  if (!(r.seconds < 1800.0)) o.pass = false;
  d << "runtime " << fmt(r.seconds, 4) << " s";
  o.detail = d.str();
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return {};
  return {std::istreambuf_iterator<char>(f), {}};
}

Outcome determinism(const PipelineResult& a, const PipelineResult& b) {
  std::vector<std::string> differ;
  for (const char* sub : {"eval_trained", "eval_untrained"})
    for (const char* file : {"report.json", "report.csv"}) {
      const auto x = slurp(a.dir / sub / file), y = slurp(b.dir / sub / file);
      if (x.empty() || x != y) differ.push_back(std::string(sub) + "/" + file);
    }
  std::string detail = differ.empty() ? "report files byte-identical" : "differ:";
  for (const auto& f : differ) detail += " " + f;
  return {differ.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  pipeline::tune_allocator();
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "mstdiff_acceptance").string();
  bool keep = false;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--work", work, "Scratch directory for the end-to-end runs");
  app.add_flag("--keep", keep, "Keep the end-to-end run directories");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9} : std::set<int>(only.begin(), only.end());

  bool all = true;
  auto report = [&](int id, const char* name, const Outcome& o, double secs, double limit) {
    const bool ok = o.pass && (limit <= 0 || secs < limit);
    all = all && ok;
    std::cout << "criterion " << id << " " << (ok ? "PASS" : "FAIL") << "  " << name << ": " << o.detail;
    if (limit > 0) std::cout << " (" << fmt(secs, 3) << " s, limit " << limit << " s)";
    std::cout << std::endl;
  };
  auto timed = [&](int id, const char* name, double limit, const std::function<Outcome()>& f) {
    if (!selected.count(id)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    report(id, name, o, seconds_since(t0), limit);
  };

  timed(1, "discrete posterior oracle", 10, posterior_oracle);
  timed(2, "transition kernel oracle", 10, kernel_oracle);
  timed(3, "wavelet round trip", 5, wavelet_round_trip);
  timed(4, "full-loss gradient check", 60, gradient_check);
  timed(5, "forward chain consistency", 60, forward_chains);
  timed(6, "reverse process algebra", 1, reverse_algebra);
  timed(7, "metric identities", 5, metric_identities);

  if (selected.count(8) || selected.count(9)) {
    const fs::path root(work);
    std::optional<PipelineResult> first, second;
    try {
      first = run_pipeline(root / "run1");
    } catch (const std::exception& e) {
      if (selected.count(8)) report(8, "end-to-end synthetic experiment", {false, std::string("threw: ") + e.what()}, 0, 0);
      if (selected.count(9)) report(9, "determinism", {false, "first run failed"}, 0, 0);
      return 1;
    }
    if (selected.count(8)) report(8, "end-to-end synthetic experiment", end_to_end(*first), 0, 0);
    if (selected.count(9)) {
      try {
        second = run_pipeline(root / "run2");
        report(9, "determinism", determinism(*first, *second), 0, 0);
      } catch (const std::exception& e) {
        report(9, "determinism", {false, std::string("threw: ") + e.what()}, 0, 0);
      }
    }
    if (!keep) fs::remove_all(root);
  }
  return all ? 0 : 1;
}
