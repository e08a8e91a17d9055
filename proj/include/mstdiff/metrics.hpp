#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <limits>
#include <numbers>
#include <utility>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/dft.hpp"
#include "mstdiff/numerics/tensor.hpp"
#include "mstdiff/ukg.hpp"

namespace mstdiff::metrics {

struct Histogram {
  std::vector<double> edges;   // bins + 1, strictly increasing
  std::vector<double> counts;  // normalised, sums to 1

  std::size_t bins() const noexcept { return counts.size(); }
};

/// Normalised histogram over `edges`; values outside the range land in the
/// end bins. An empty sample gives an all-zero histogram.
inline Histogram histogram(std::span<const double> values, std::vector<double> edges) {
  if (edges.size() < 2) throw ContractError("histogram: need at least one bin");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw ContractError("histogram: edges must be strictly increasing");
  Histogram h;
  h.counts.assign(edges.size() - 1, 0.0);
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("histogram: non-finite value");
    const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, v);
    h.counts[static_cast<std::size_t>(it - edges.begin()) - 1] += 1.0;
  }
  if (!values.empty())
    for (auto& c : h.counts) c /= static_cast<double>(values.size());
  h.edges = std::move(edges);
  return h;
}

inline std::vector<double> uniform_edges(double lo, double hi, std::size_t bins) {
  if (bins == 0 || !(hi > lo)) throw ContractError("uniform_edges: need bins > 0 and hi > lo");
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  e.back() = hi;
  return e;
}

inline std::vector<double> log_edges(double lo, double hi, std::size_t bins) {
  if (bins == 0 || !(lo > 0.0) || !(hi > lo)) throw ContractError("log_edges: need bins > 0 and 0 < lo < hi");
  std::vector<double> e(bins + 1);
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i <= bins; ++i) e[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(bins));
  e.front() = lo;
  e.back() = hi;
  return e;
}

/// Log-spaced edges spanning the positive values of a reference sample.
/// Zeros fall into the first bin.
inline std::vector<double> log_edges_for(std::span<const double> reference, std::size_t bins) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (double v : reference)
    if (v > 0.0) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!std::isfinite(lo)) lo = hi = 1.0;
  if (!(hi > lo * 1.0001)) hi = lo * 10.0;
  return log_edges(lo, hi, bins);
}

inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ContractError("jsd: distributions have different support");
  double s = 0.0;
  // Terms are taken in (min, max) order so jsd(p, q) == jsd(q, p) bitwise.
  auto term = [](double x, double m) { return x > 0.0 ? x * std::log(x / m) : 0.0; };
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double lo = std::min(p[i], q[i]), hi = std::max(p[i], q[i]);
    const double m = 0.5 * (lo + hi);
    s += 0.5 * (term(lo, m) + term(hi, m));
  }
  return std::clamp(s, 0.0, std::numbers::ln2);
}

inline double jsd(const Histogram& p, const Histogram& q) {
  if (p.edges != q.edges) throw ContractError("jsd: histograms have different bin edges");
  return jsd(p.counts, q.counts);
}

// ------------------------------------------------------------------ traffic

struct MetricsConfig {
  std::size_t series_length = 336;
  std::size_t steps_per_day = 48;
  double minutes_per_step = 30.0;
  std::size_t traffic_bins = 100;
  std::size_t log_bins = 50;
  std::size_t distinct_bins = 50;
  bool daily_harmonics = false;  // adds the 2nd and 3rd daily harmonics
  bool grank_by_identity = false;
  double grank_fraction = 0.1;
  std::size_t irank_depth = 20;
};

inline std::vector<double> first_differences(std::span<const double> x) {
  std::vector<double> d;
  for (std::size_t i = 1; i < x.size(); ++i) d.push_back(x[i] - x[i - 1]);
  return d;
}

/// Daily periodic component of a series: the inverse DFT of the daily bins
/// k and T - k (plus harmonics when requested).
inline std::vector<double> daily_component(std::span<const double> x, const MetricsConfig& cfg) {
  const std::size_t len = x.size();
  if (cfg.steps_per_day == 0 || len % cfg.steps_per_day != 0) {
    throw ContractError("daily_component: series length is not a whole number of days");
  }
  const std::size_t k0 = len / cfg.steps_per_day;
  const auto spec = dft(x);
  Spectrum keep(len);
  const std::size_t harmonics = cfg.daily_harmonics ? 3 : 1;
  for (std::size_t h = 1; h <= harmonics; ++h) {
    const std::size_t k = h * k0;
    if (k == 0 || 2 * k >= len) continue;
    keep[k] = spec[k];
    keep[len - k] = spec[len - k];
  }
  const auto back = idft(keep);
  std::vector<double> out(len);
  for (std::size_t t = 0; t < len; ++t) out[t] = back[t].real();
  return out;
}

inline std::vector<double> user_mean(const Tensor<double>& series) {
  std::vector<double> m(series.cols(), 0.0);
  for (std::size_t u = 0; u < series.rows(); ++u)
    for (std::size_t t = 0; t < series.cols(); ++t) m[t] += series(u, t);
  for (auto& v : m) v /= static_cast<double>(series.rows());
  return m;
}

struct TrafficMetrics {
  double volume_jsd = 0.0;
  double diff_jsd = 0.0;
  double daily_rmse = 0.0;
  Histogram volume_real, volume_gen, diff_real, diff_gen;
  std::vector<double> daily_real, daily_gen;
};

inline void check_series(const Tensor<double>& x, const MetricsConfig& cfg, const char* what) {
  if (x.empty() || x.rank() != 2 || x.rows() == 0) throw ContractError(std::string(what) + ": empty traffic set");
  if (x.cols() != cfg.series_length) {
    throw ContractError(std::string(what) + ": series length " + std::to_string(x.cols()) + ", expected " +
                        std::to_string(cfg.series_length));
  }
}

inline TrafficMetrics traffic_metrics(const Tensor<double>& real, const Tensor<double>& gen, const MetricsConfig& cfg) {
  check_series(real, cfg, "traffic_metrics (real)");
  check_series(gen, cfg, "traffic_metrics (generated)");
  TrafficMetrics m;
  const auto vol_edges = uniform_edges(0.0, 1.0, cfg.traffic_bins);
  m.volume_real = histogram(real.data(), vol_edges);
  m.volume_gen = histogram(gen.data(), vol_edges);
  m.volume_jsd = jsd(m.volume_real, m.volume_gen);

  auto diffs = [](const Tensor<double>& x) {
    std::vector<double> all;
    for (std::size_t u = 0; u < x.rows(); ++u) {
      const auto d = first_differences(x.row(u));
      all.insert(all.end(), d.begin(), d.end());
    }
    return all;
  };
  const auto diff_edges = uniform_edges(-1.0, 1.0, cfg.traffic_bins);
  m.diff_real = histogram(diffs(real), diff_edges);
  m.diff_gen = histogram(diffs(gen), diff_edges);
  m.diff_jsd = jsd(m.diff_real, m.diff_gen);

  m.daily_real = daily_component(user_mean(real), cfg);
  m.daily_gen = daily_component(user_mean(gen), cfg);
  double se = 0.0;
  for (std::size_t t = 0; t < m.daily_real.size(); ++t) se += std::pow(m.daily_real[t] - m.daily_gen[t], 2);
  m.daily_rmse = std::sqrt(se / static_cast<double>(m.daily_real.size()));
  return m;
}

// --------------------------------------------------------------- trajectory

/// Per-user trajectory statistics, pooled over a dataset.
struct TrajectoryStats {
  std::vector<double> distance_km;   // one per location change
  std::vector<double> radius_km;     // one per user
  std::vector<double> distinct;      // one per user
  std::vector<double> duration_min;  // one per maximal stay
  std::vector<double> visits;        // per location, whole dataset
  std::vector<double> irank;         // mean normalised rank-frequency, depth entries
};

/// Locations projected to a local plane (km) around the coordinate centroid.
inline Tensor<double> project_km(const Tensor<double>& coords) {
  constexpr double kEarthRadiusKm = 6371.0088;
  const double rad = std::numbers::pi / 180.0;
  double lon0 = 0.0, lat0 = 0.0;
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    lon0 += coords(i, 0);
    lat0 += coords(i, 1);
  }
  lon0 /= static_cast<double>(coords.rows());
  lat0 /= static_cast<double>(coords.rows());
  Tensor<double> xy({coords.rows(), 2});
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    xy(i, 0) = kEarthRadiusKm * (coords(i, 0) - lon0) * rad * std::cos(lat0 * rad);
    xy(i, 1) = kEarthRadiusKm * (coords(i, 1) - lat0) * rad;
  }
  return xy;
}

inline TrajectoryStats trajectory_stats(std::span<const std::size_t> traj, std::size_t length, const Tensor<double>& coords,
                                        const MetricsConfig& cfg) {
  const std::size_t n = coords.rows();
  if (coords.empty() || coords.rank() != 2 || coords.cols() != 2) throw ContractError("trajectory metrics: coords must be [N x 2]");
  if (length == 0 || traj.empty() || traj.size() % length != 0) {
    throw ContractError("trajectory metrics: sequence size is not a multiple of the series length");
  }
  for (auto l : traj)
    if (l >= n) throw ContractError("trajectory metrics: unknown location id " + std::to_string(l));
  const auto xy = project_km(coords);
  const std::size_t users = traj.size() / length;
  TrajectoryStats st;
  st.visits.assign(n, 0.0);
  st.irank.assign(cfg.irank_depth, 0.0);
  std::vector<double> own(n);
  for (std::size_t u = 0; u < users; ++u) {
    const auto seq = traj.subspan(u * length, length);
    std::fill(own.begin(), own.end(), 0.0);
    std::size_t run = 1;
    for (std::size_t t = 0; t < length; ++t) {
      const std::size_t l = seq[t];
      own[l] += 1.0;
      st.visits[l] += 1.0;
      if (t > 0) {
        if (l != seq[t - 1]) {
          const std::size_t p = seq[t - 1];
          st.distance_km.push_back(ukg::haversine_m(coords(p, 0), coords(p, 1), coords(l, 0), coords(l, 1)) / 1000.0);
          st.duration_min.push_back(static_cast<double>(run) * cfg.minutes_per_step);
          run = 1;
        } else {
          ++run;
        }
      }
    }
    st.duration_min.push_back(static_cast<double>(run) * cfg.minutes_per_step);
    // Radius of gyration from pairwise distances between visited places:
    // r^2 = sum_{i<j} c_i c_j |x_i - x_j|^2 / T^2. Exactly zero for a user
    // who never moves.
    double r2 = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (own[i] > 0.0 && own[j] > 0.0)
          r2 += own[i] * own[j] * (std::pow(xy(i, 0) - xy(j, 0), 2) + std::pow(xy(i, 1) - xy(j, 1), 2));
    st.radius_km.push_back(std::sqrt(r2) / static_cast<double>(length));

    std::vector<double> counts;
    for (double c : own)
      if (c > 0.0) counts.push_back(c);
    st.distinct.push_back(static_cast<double>(counts.size()) / static_cast<double>(length));
    std::sort(counts.rbegin(), counts.rend());
    for (std::size_t r = 0; r < std::min(counts.size(), cfg.irank_depth); ++r)
      st.irank[r] += counts[r] / static_cast<double>(length) / static_cast<double>(users);
  }
  return st;
}

/// Normalises a non-negative vector to sum 1; an all-zero vector stays zero.
inline std::vector<double> normalized(std::vector<double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  if (s > 0.0)
    for (auto& x : v) x /= s;
  return v;
}

inline Histogram rank_histogram(std::vector<double> freq) {
  Histogram h;
  h.counts = normalized(std::move(freq));
  h.edges.resize(h.counts.size() + 1);
  for (std::size_t i = 0; i < h.edges.size(); ++i) h.edges[i] = static_cast<double>(i);
  return h;
}

/// Visit frequencies over the top ceil(fraction * N) ranks. By default each
/// dataset ranks its own locations; with `by_identity` both use the real
/// dataset's top locations.
inline std::pair<Histogram, Histogram> grank(const std::vector<double>& real_visits, const std::vector<double>& gen_visits,
                                             const MetricsConfig& cfg) {
  const std::size_t n = real_visits.size();
  const std::size_t k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(cfg.grank_fraction * static_cast<double>(n) - 1e-9)));
  auto order = [&](const std::vector<double>& v) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    return idx;
  };
  const auto ro = order(real_visits);
  const auto go = cfg.grank_by_identity ? ro : order(gen_visits);
  std::vector<double> r(k), g(k);
  for (std::size_t i = 0; i < k; ++i) {
    r[i] = real_visits[ro[i]];
    g[i] = gen_visits[go[i]];
  }
  return {rank_histogram(r), rank_histogram(g)};
}

// ------------------------------------------------------------------- report

struct MetricsReport {
  double traffic_volume_jsd = 0.0;
  double first_diff_jsd = 0.0;
  double daily_rmse = 0.0;
  double distance_jsd = 0.0;
  double radius_jsd = 0.0;
  double distinctloc_jsd = 0.0;
  double duration_jsd = 0.0;
  double grank_jsd = 0.0;
  double irank_jsd = 0.0;
  MetricsConfig config;
  std::map<std::string, std::pair<Histogram, Histogram>> histograms;  // name -> (real, generated)

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n{"traffic_volume_jsd", "first_diff_jsd", "daily_rmse",
                                            "distance_jsd",       "radius_jsd",     "distinctloc_jsd",
                                            "duration_jsd",       "grank_jsd",      "irank_jsd"};
    return n;
  }

  std::vector<double> values() const {
    return {traffic_volume_jsd, first_diff_jsd, daily_rmse,   distance_jsd, radius_jsd,
            distinctloc_jsd,    duration_jsd,   grank_jsd,    irank_jsd};
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    const auto v = values();
    for (std::size_t i = 0; i < v.size(); ++i) j[names()[i]] = v[i];
    j["binning"] = {{"traffic_bins", config.traffic_bins},
                    {"log_bins", config.log_bins},
                    {"distinct_bins", config.distinct_bins},
                    {"daily_harmonics", config.daily_harmonics},
                    {"grank_by_identity", config.grank_by_identity},
                    {"grank_fraction", config.grank_fraction},
                    {"irank_depth", config.irank_depth}};
    return j;
  }

  std::string csv_header() const {
    std::string s;
    for (const auto& n : names()) s += (s.empty() ? "" : ",") + n;
    return s;
  }

  std::string csv_row() const {
    std::string s;
    for (double v : values()) {
      nlohmann::json j = v;
      s += (s.empty() ? "" : ",") + j.dump();
    }
    return s;
  }

  /// report.json, report.csv and one hist_<metric>.csv per histogram
  /// (columns: bin_lo, bin_hi, real, generated).
  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    {
      std::ofstream f(dir / "report.json");
      if (!f) throw IoError("cannot write " + (dir / "report.json").string());
      f << to_json().dump(2) << "\n";
    }
    {
      std::ofstream f(dir / "report.csv");
      if (!f) throw IoError("cannot write " + (dir / "report.csv").string());
      f << csv_header() << "\n" << csv_row() << "\n";
    }
    for (const auto& [name, pair] : histograms) {
      std::ofstream f(dir / ("hist_" + name + ".csv"));
      if (!f) throw IoError("cannot write histogram for " + name);
      f << "bin_lo,bin_hi,real,generated\n";
      for (std::size_t i = 0; i < pair.first.bins(); ++i) {
        f << nlohmann::json(pair.first.edges[i]).dump() << "," << nlohmann::json(pair.first.edges[i + 1]).dump() << ","
          << nlohmann::json(pair.first.counts[i]).dump() << "," << nlohmann::json(pair.second.counts[i]).dump() << "\n";
      }
    }
  }
};

/// All nine metrics. `real_traj` and `gen_traj` hold users * T location ids.
inline MetricsReport evaluate(const Tensor<double>& real_traffic, std::span<const std::size_t> real_traj,
                              const Tensor<double>& gen_traffic, std::span<const std::size_t> gen_traj,
                              const Tensor<double>& coords, const MetricsConfig& cfg = {}) {
  MetricsReport r;
  r.config = cfg;
  const auto tm = traffic_metrics(real_traffic, gen_traffic, cfg);
  r.traffic_volume_jsd = tm.volume_jsd;
  r.first_diff_jsd = tm.diff_jsd;
  r.daily_rmse = tm.daily_rmse;
  r.histograms["traffic_volume"] = {tm.volume_real, tm.volume_gen};
  r.histograms["first_diff"] = {tm.diff_real, tm.diff_gen};

  const auto rs = trajectory_stats(real_traj, cfg.series_length, coords, cfg);
  const auto gs = trajectory_stats(gen_traj, cfg.series_length, coords, cfg);
  auto put = [&](const std::string& name, Histogram a, Histogram b) {
    const double d = jsd(a, b);
    r.histograms[name] = {std::move(a), std::move(b)};
    return d;
  };
  auto logged = [&](const std::string& name, const std::vector<double>& a, const std::vector<double>& b) {
    const auto edges = log_edges_for(a, cfg.log_bins);
    return put(name, histogram(a, edges), histogram(b, edges));
  };
  r.distance_jsd = logged("distance", rs.distance_km, gs.distance_km);
  r.radius_jsd = logged("radius", rs.radius_km, gs.radius_km);
  const auto de = uniform_edges(0.0, 1.0, cfg.distinct_bins);
  r.distinctloc_jsd = put("distinctloc", histogram(rs.distinct, de), histogram(gs.distinct, de));
  const auto dur_edges =
      log_edges(cfg.minutes_per_step, cfg.minutes_per_step * static_cast<double>(cfg.series_length), cfg.log_bins);
  r.duration_jsd = put("duration", histogram(rs.duration_min, dur_edges), histogram(gs.duration_min, dur_edges));
  auto [gr, gg] = grank(rs.visits, gs.visits, cfg);
  r.grank_jsd = put("grank", std::move(gr), std::move(gg));
  r.irank_jsd = put("irank", rank_histogram(rs.irank), rank_histogram(gs.irank));
  return r;
}

// ---------------------------------------------------------------- archetypes

/// Agreement between where users live and how much traffic they produce.
/// Each user is assigned the majority group of the locations it visits
/// (ties go to the lower group) and a level, its mean normalised traffic.
/// The threshold and orientation come from the real data: the threshold is
/// the midpoint of the two group means and the orientation is the sign of
/// their difference. Agreement is the fraction of users whose level falls on
/// the side of the threshold that their group predicts.
struct ArchetypeAgreement {
  double real = 0.0;
  double generated = 0.0;
  double threshold = 0.0;
  bool group1_higher = true;
};

inline std::pair<std::vector<int>, std::vector<double>> group_levels(const Tensor<double>& traffic,
                                                                     std::span<const std::size_t> traj,
                                                                     std::span<const int> station_group) {
  const std::size_t users = traffic.rows(), len = traffic.cols();
  if (traj.size() != users * len) throw ContractError("archetype agreement: trajectory size mismatch");
  std::vector<int> group(users);
  std::vector<double> level(users);
  for (std::size_t u = 0; u < users; ++u) {
    std::size_t ones = 0;
    for (std::size_t t = 0; t < len; ++t) {
      const auto l = traj[u * len + t];
      if (l >= station_group.size()) throw ContractError("archetype agreement: unknown location id " + std::to_string(l));
      if (station_group[l] != 0) ++ones;
    }
    group[u] = 2 * ones > len ? 1 : 0;
    double s = 0.0;
    for (double v : traffic.row(u)) s += v;
    level[u] = s / static_cast<double>(len);
  }
  return {group, level};
}

inline ArchetypeAgreement archetype_agreement(const Tensor<double>& real_traffic, std::span<const std::size_t> real_traj,
                                              const Tensor<double>& gen_traffic, std::span<const std::size_t> gen_traj,
                                              std::span<const int> station_group) {
  const auto [rg, rl] = group_levels(real_traffic, real_traj, station_group);
  double m[2] = {0.0, 0.0};
  std::size_t c[2] = {0, 0};
  for (std::size_t u = 0; u < rg.size(); ++u) {
    m[rg[u]] += rl[u];
    ++c[rg[u]];
  }
  if (c[0] == 0 || c[1] == 0) throw ContractError("archetype agreement: real data has users in only one group");
  m[0] /= static_cast<double>(c[0]);
  m[1] /= static_cast<double>(c[1]);
  ArchetypeAgreement a;
  a.threshold = 0.5 * (m[0] + m[1]);
  a.group1_higher = m[1] >= m[0];
  auto score = [&](const std::vector<int>& g, const std::vector<double>& l) {
    std::size_t ok = 0;
    for (std::size_t u = 0; u < g.size(); ++u) {
      const bool high = l[u] > a.threshold;
      if (high == ((g[u] == 1) == a.group1_higher)) ++ok;
    }
    return static_cast<double>(ok) / static_cast<double>(g.size());
  };
  a.real = score(rg, rl);
  const auto [gg, gl] = group_levels(gen_traffic, gen_traj, station_group);
  a.generated = score(gg, gl);
  return a;
}

}  // namespace mstdiff::metrics
