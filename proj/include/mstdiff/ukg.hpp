#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/autodiff.hpp"
#include "mstdiff/numerics/linalg.hpp"
#include "mstdiff/numerics/params.hpp"
#include "mstdiff/numerics/rng.hpp"

namespace mstdiff::ukg {

// ------------------------------------------------------------ knowledge graph

enum class Relation : std::size_t { BaseLocateAt = 0, BaseBelongTo = 1, BaseBorderBy = 2, ServedBy = 3 };

inline constexpr std::size_t kRelationCount = 4;
inline constexpr std::array<std::string_view, kRelationCount> kRelationNames = {"BaseLocateAt", "BaseBelongTo",
                                                                                "BaseBorderBy", "ServedBy"};

inline Relation relation_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kRelationCount; ++i)
    if (kRelationNames[i] == name) return static_cast<Relation>(i);
  throw LookupError("unknown relation: " + std::string(name));
}

struct Triplet {
  std::size_t head = 0;
  std::size_t relation = 0;
  std::size_t tail = 0;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

class KnowledgeGraph {
 public:
  /// Returns the id of `name`, registering it if new.
  std::size_t add_entity(const std::string& name) {
    auto [it, inserted] = index_.try_emplace(name, names_.size());
    if (inserted) names_.push_back(name);
    return it->second;
  }

  std::size_t entity(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("unknown entity: " + name);
    return it->second;
  }

  bool has_entity(const std::string& name) const { return index_.count(name) != 0; }

  void add_triplet(const std::string& head, Relation r, const std::string& tail) {
    triplets_.push_back({add_entity(head), static_cast<std::size_t>(r), add_entity(tail)});
  }

  void add_triplet(Triplet t) {
    if (t.head >= names_.size() || t.tail >= names_.size() || t.relation >= kRelationCount)
      throw LookupError("triplet references an unknown entity or relation");
    triplets_.push_back(t);
  }

  const std::vector<std::string>& entities() const noexcept { return names_; }
  const std::vector<Triplet>& triplets() const noexcept { return triplets_; }
  std::size_t entity_count() const noexcept { return names_.size(); }

  /// Every listed base station must occur in at least one triplet.
  void validate_stations(const std::vector<std::string>& stations) const {
    std::vector<char> seen(names_.size(), 0);
    for (const auto& t : triplets_) seen[t.head] = seen[t.tail] = 1;
    for (const auto& s : stations) {
      if (!seen[entity(s)]) throw ContractError("base station " + s + " appears in no triplet");
    }
  }

  void save_tsv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& t : triplets_)
      out << names_[t.head] << '\t' << kRelationNames[t.relation] << '\t' << names_[t.tail] << '\n';
  }

  static KnowledgeGraph load_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read " + path);
    KnowledgeGraph kg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string h, r, t;
      if (!std::getline(ss, h, '\t') || !std::getline(ss, r, '\t') || !std::getline(ss, t)) {
        throw DataError(path + ":" + std::to_string(lineno) + ": expected head<TAB>relation<TAB>tail");
      }
      kg.add_triplet(h, relation_from_name(r), t);
    }
    return kg;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Triplet> triplets_;
};

/// Station layout used to generate a synthetic graph.
struct CityLayout {
  std::vector<std::string> station_ids;
  Tensor<double> coords;                  // [N x 2] lon, lat
  std::vector<std::size_t> region;        // grid cell per station
  std::vector<std::size_t> category;      // dominant POI category per station
  std::size_t poi_categories = 6;
  std::size_t business_areas = 4;
};

inline double haversine_m(double lon1, double lat1, double lon2, double lat2) {
  constexpr double kEarthRadius = 6371008.8;
  const double rad = std::numbers::pi / 180.0;
  const double dlat = (lat2 - lat1) * rad, dlon = (lon2 - lon1) * rad;
  const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(lat1 * rad) * std::cos(lat2 * rad) * std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * kEarthRadius * std::asin(std::min(1.0, std::sqrt(a)));
}

/// Synthetic urban graph over all four station relations: region cells
/// (BaseLocateAt), random business areas (BaseBelongTo), nearest geographic
/// neighbours plus a spanning chain (BaseBorderBy) and sampled POI categories
/// (ServedBy).
inline KnowledgeGraph synthesize_graph(const CityLayout& city, Rng& rng, std::size_t border_links = 3) {
  KnowledgeGraph kg;
  const std::size_t n = city.station_ids.size();
  for (const auto& s : city.station_ids) kg.add_entity(s);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = city.station_ids[i];
    kg.add_triplet(s, Relation::BaseLocateAt, "region_" + std::to_string(city.region[i]));
    kg.add_triplet(s, Relation::BaseBelongTo, "area_" + std::to_string(rng.uniform_int(city.business_areas)));
    kg.add_triplet(s, Relation::ServedBy, "poi_" + std::to_string(city.category[i]));
    const std::size_t extra = rng.uniform_int(3);
    for (std::size_t e = 0; e < extra; ++e) {
      const std::size_t c = rng.uniform_int(city.poi_categories);
      if (c != city.category[i]) kg.add_triplet(s, Relation::ServedBy, "poi_" + std::to_string(c));
    }
  }
  std::unordered_set<std::uint64_t> linked;
  auto link = [&](std::size_t i, std::size_t j) {
    const std::uint64_t key = static_cast<std::uint64_t>(std::min(i, j)) * n + std::max(i, j);
    if (i == j || !linked.insert(key).second) return;
    kg.add_triplet(city.station_ids[i], Relation::BaseBorderBy, city.station_ids[j]);
    kg.add_triplet(city.station_ids[j], Relation::BaseBorderBy, city.station_ids[i]);
  };
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) d.emplace_back(haversine_m(city.coords(i, 0), city.coords(i, 1), city.coords(j, 0), city.coords(j, 1)), j);
    std::sort(d.begin(), d.end());
    for (std::size_t k = 0; k < std::min(border_links, d.size()); ++k) link(i, d[k].second);
  }
  for (std::size_t i = 0; i + 1 < n; ++i) link(i, i + 1);
  return kg;
}

// ------------------------------------------------------------------- TuckER

struct TuckerConfig {
  std::size_t entity_dim = 32;
  std::size_t relation_dim = 32;
  std::size_t epochs = 100;
  std::size_t batch = 64;
  double lr = 0.005;
  double init_sd = 0.3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 7;
};

/// TuckER embeddings: entity table E, relation table W_r and core W stored
/// as [d_e x (d_r * d_e)] with W[i, j*d_e + k] = W_ijk.
struct TuckerModel {
  ParamSet<double> params;
  std::size_t entity_dim = 0;
  std::size_t relation_dim = 0;

  const Tensor<double>& entities() const { return params.at("entity"); }
  const Tensor<double>& relations() const { return params.at("relation"); }
  const Tensor<double>& core() const { return params.at("core"); }

  static TuckerModel init(std::size_t n_entities, std::size_t n_relations, std::size_t de, std::size_t dr, double sd,
                          Rng& rng) {
    TuckerModel m;
    m.entity_dim = de;
    m.relation_dim = dr;
    m.params.add("entity", init_normal<double>({n_entities, de}, rng, sd));
    m.params.add("relation", init_normal<double>({n_relations, dr}, rng, sd));
    m.params.add("core", init_normal<double>({de, dr * de}, rng, sd / std::sqrt(static_cast<double>(de))));
    return m;
  }
};

/// Raw trilinear form W x1 e_s x2 w_r x3 e_o.
inline double tucker_raw_score(const TuckerModel& m, std::size_t head, std::size_t rel, std::size_t tail) {
  const auto& e = m.entities();
  const auto& r = m.relations();
  const auto& w = m.core();
  if (head >= e.rows() || tail >= e.rows()) throw LookupError("tucker_score: unknown entity id");
  if (rel >= r.rows()) throw LookupError("tucker_score: unknown relation id");
  const std::size_t de = m.entity_dim, dr = m.relation_dim;
  double s = 0.0;
  for (std::size_t i = 0; i < de; ++i)
    for (std::size_t j = 0; j < dr; ++j)
      for (std::size_t k = 0; k < de; ++k) s += w(i, j * de + k) * e(head, i) * r(rel, j) * e(tail, k);
  return s;
}

inline double tucker_score(const TuckerModel& m, std::size_t head, std::size_t rel, std::size_t tail) {
  return 1.0 / (1.0 + std::exp(-tucker_raw_score(m, head, rel, tail)));
}

/// Logits of every tail entity for a batch of (head, relation) queries.
inline ad::Var<double> tucker_logits(ad::Tape<double>& tape, const std::vector<ad::Var<double>>& p,
                                     const std::vector<std::size_t>& heads, const std::vector<std::size_t>& rels) {
  (void)tape;
  auto es = ad::gather_rows(p[0], heads);
  auto wr = ad::gather_rows(p[1], rels);
  auto x = ad::matmul(es, p[2]);
  auto v = ad::contract_mid(x, wr);
  return ad::matmul(v, ad::transpose(p[0]));
}

struct TuckerReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double heldout_true_mean = 0.0;
  double heldout_corrupt_mean = 0.0;
  std::size_t train_triplets = 0;
  std::size_t heldout_triplets = 0;
};

struct TuckerResult {
  TuckerModel model;
  TuckerReport report;
};

/// 1-N scoring with binary cross-entropy against every entity: all non-edges
/// of a (head, relation) query act as negatives.
inline TuckerResult tucker_train(const KnowledgeGraph& kg, const TuckerConfig& cfg) {
  if (kg.triplets().empty()) throw ContractError("tucker_train: empty graph");
  Rng rng(cfg.seed);
  const std::size_t ne = kg.entity_count();
  auto triplets = kg.triplets();
  // Deterministic shuffle then split.
  for (std::size_t i = triplets.size(); i > 1; --i) std::swap(triplets[i - 1], triplets[rng.uniform_int(i)]);
  std::size_t n_hold = 0;
  if (triplets.size() >= 10) n_hold = static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(triplets.size()));
  std::vector<Triplet> held(triplets.end() - static_cast<std::ptrdiff_t>(n_hold), triplets.end());
  std::vector<Triplet> train(triplets.begin(), triplets.end() - static_cast<std::ptrdiff_t>(n_hold));

  // Group training tails by query.
  std::vector<std::pair<std::size_t, std::size_t>> queries;
  std::vector<std::vector<std::size_t>> tails;
  {
    std::unordered_map<std::uint64_t, std::size_t> qi;
    for (const auto& t : train) {
      const std::uint64_t key = static_cast<std::uint64_t>(t.head) * kRelationCount + t.relation;
      auto [it, ins] = qi.try_emplace(key, queries.size());
      if (ins) {
        queries.emplace_back(t.head, t.relation);
        tails.emplace_back();
      }
      tails[it->second].push_back(t.tail);
    }
  }

  TuckerResult res;
  res.model = TuckerModel::init(ne, kRelationCount, cfg.entity_dim, cfg.relation_dim, cfg.init_sd, rng);
  res.report.train_triplets = train.size();
  res.report.heldout_triplets = held.size();
  Adam<double> opt({.lr = cfg.lr});

  auto batch_loss = [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& p,
                        const std::vector<std::size_t>& qs) {
    std::vector<std::size_t> hs, rs;
    Tensor<double> target({qs.size(), ne});
    for (std::size_t b = 0; b < qs.size(); ++b) {
      hs.push_back(queries[qs[b]].first);
      rs.push_back(queries[qs[b]].second);
      for (auto tail : tails[qs[b]]) target(b, tail) = 1.0;
    }
    return ad::bce_with_logits(tucker_logits(tape, p, hs, rs), target);
  };

  std::vector<std::size_t> all(queries.size());
  std::iota(all.begin(), all.end(), 0);
  auto full_loss = [&]() {
    ad::Tape<double> tape(false);
    auto p = res.model.params.bind(tape);
    return batch_loss(tape, p, all).value()[0];
  };
  res.report.initial_loss = full_loss();

  std::vector<std::size_t> order = all;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::vector<std::size_t> qs(order.begin() + static_cast<std::ptrdiff_t>(start),
                                  order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch)));
      ad::Tape<double> tape(true);
      auto p = res.model.params.bind(tape);
      auto loss = batch_loss(tape, p, qs);
      if (!std::isfinite(loss.value()[0])) throw TrainingError("tucker_train: non-finite loss");
      tape.backward(loss);
      opt.step(res.model.params, res.model.params.gradients(tape, p));
    }
  }
  res.report.final_loss = full_loss();
  if (!std::isfinite(res.report.final_loss)) throw TrainingError("tucker_train: non-finite loss");

  if (!held.empty()) {
    std::unordered_set<std::uint64_t> known;
    auto key = [ne](const Triplet& t) {
      return (static_cast<std::uint64_t>(t.head) * kRelationCount + t.relation) * ne + t.tail;
    };
    for (const auto& t : kg.triplets()) known.insert(key(t));
    double st = 0.0, sc = 0.0;
    for (const auto& t : held) {
      st += tucker_score(res.model, t.head, t.relation, t.tail);
      Triplet c = t;
      for (int tries = 0; tries < 100; ++tries) {
        c.tail = rng.uniform_int(ne);
        if (!known.count(key(c))) break;
      }
      sc += tucker_score(res.model, c.head, c.relation, c.tail);
    }
    res.report.heldout_true_mean = st / static_cast<double>(held.size());
    res.report.heldout_corrupt_mean = sc / static_cast<double>(held.size());
  }
  return res;
}

/// Embedding rows for the given station entity names, in location order.
inline Tensor<double> station_embeddings(const TuckerModel& m, const KnowledgeGraph& kg,
                                         const std::vector<std::string>& stations) {
  const auto& e = m.entities();
  Tensor<double> out({stations.size(), m.entity_dim});
  for (std::size_t i = 0; i < stations.size(); ++i) {
    const auto id = kg.entity(stations[i]);
    std::copy(e.row(id).begin(), e.row(id).end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------- adjacency

struct Adjacency {
  Tensor<double> matrix;        // binary [N x N]
  std::size_t empty_rows = 0;   // rows with no neighbour left after the distance cap
};

/// A[i][j] = 1 iff j is among the K nearest neighbours of i in embedding
/// space (Euclidean, ties to the lower index) and the great-circle distance
/// between the stations is within `dist_threshold_m`.
inline Adjacency build_adjacency(const Tensor<double>& embeddings, const Tensor<double>& coords, std::size_t k_nn,
                                 double dist_threshold_m) {
  const std::size_t n = embeddings.rows();
  if (k_nn < 1) throw ContractError("build_adjacency: K_nn must be >= 1");
  if (n < 2) throw ContractError("build_adjacency: need at least two locations");
  if (coords.rows() != n || coords.cols() != 2) throw ShapeError("build_adjacency: coords must be [N x 2]");
  Adjacency out{Tensor<double>({n, n}), 0};
  const std::size_t d = embeddings.cols();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = embeddings(i, c) - embeddings(j, c);
        s += diff * diff;
      }
      dist.emplace_back(s, j);
    }
    std::sort(dist.begin(), dist.end());
    std::size_t ones = 0;
    for (std::size_t k = 0; k < std::min(k_nn, dist.size()); ++k) {
      const std::size_t j = dist[k].second;
      if (haversine_m(coords(i, 0), coords(i, 1), coords(j, 0), coords(j, 1)) <= dist_threshold_m) {
        out.matrix(i, j) = 1.0;
        ++ones;
      }
    }
    if (ones == 0) ++out.empty_rows;
  }
  return out;
}

/// Adds the graph's BaseBorderBy links between stations to `a`.
inline void add_border_links(Tensor<double>& a, const KnowledgeGraph& kg, const std::vector<std::string>& stations) {
  std::unordered_map<std::size_t, std::size_t> loc;
  for (std::size_t i = 0; i < stations.size(); ++i) loc[kg.entity(stations[i])] = i;
  for (const auto& t : kg.triplets()) {
    if (t.relation != static_cast<std::size_t>(Relation::BaseBorderBy)) continue;
    auto h = loc.find(t.head), tl = loc.find(t.tail);
    if (h != loc.end() && tl != loc.end() && h->second != tl->second) a(h->second, tl->second) = 1.0;
  }
}

inline bool is_connected(const Tensor<double>& sym) {
  const std::size_t n = sym.rows();
  std::vector<char> seen(n, 0);
  std::queue<std::size_t> q;
  q.push(0);
  seen[0] = 1;
  std::size_t count = 1;
  while (!q.empty()) {
    const auto i = q.front();
    q.pop();
    for (std::size_t j = 0; j < n; ++j)
      if (!seen[j] && sym(i, j) > 0.0) {
        seen[j] = 1;
        ++count;
        q.push(j);
      }
  }
  return count == n;
}

// ------------------------------------------------------- transition schedule

/// Discrete-diffusion kernels. Steps are 1-based; q_at(s) is the one-step
/// kernel, qbar_at(s) the cumulative one with qbar_at(0) = I.
struct TransitionSchedule {
  std::size_t num_states = 0;
  Tensor<double> rate;           // R; empty when built from explicit kernels
  std::optional<SymEig> eig;
  std::vector<double> alpha;     // per-step increments
  std::vector<double> alpha_bar; // prefix sums
  std::vector<Tensor<double>> q;
  std::vector<Tensor<double>> qbar;
  Tensor<double> identity;

  std::size_t steps() const noexcept { return q.size(); }

  const Tensor<double>& q_at(std::size_t s) const {
    if (s < 1 || s > q.size()) throw ContractError("transition step " + std::to_string(s) + " out of range");
    return q[s - 1];
  }
  const Tensor<double>& qbar_at(std::size_t s) const {
    if (s == 0) return identity;
    if (s > qbar.size()) throw ContractError("transition step " + std::to_string(s) + " out of range");
    return qbar[s - 1];
  }

  /// Kernels exp(alpha_s R) and exp(abar_s R) of a symmetric rate matrix.
  static TransitionSchedule from_rate(Tensor<double> r, std::vector<double> increments) {
    TransitionSchedule ts;
    ts.num_states = r.rows();
    ts.eig = sym_eig(r);
    ts.rate = std::move(r);
    ts.alpha = std::move(increments);
    double acc = 0.0;
    for (double a : ts.alpha) {
      if (a < 0) throw ContractError("transition increments must be non-negative");
      acc += a;
      ts.alpha_bar.push_back(acc);
    }
    ts.fill_kernels();
    return ts;
  }

  /// Same, with explicit prefix sums (kept exactly as given).
  static TransitionSchedule from_rate_cumulative(Tensor<double> r, std::vector<double> increments,
                                                 std::vector<double> cumulative) {
    TransitionSchedule ts;
    ts.num_states = r.rows();
    ts.eig = sym_eig(r);
    ts.rate = std::move(r);
    ts.alpha = std::move(increments);
    ts.alpha_bar = std::move(cumulative);
    ts.fill_kernels();
    return ts;
  }

  /// Arbitrary row-stochastic one-step kernels; cumulative kernels are the
  /// running products Q_1 ... Q_s.
  static TransitionSchedule from_kernels(std::vector<Tensor<double>> kernels) {
    if (kernels.empty()) throw ContractError("from_kernels: need at least one step");
    TransitionSchedule ts;
    ts.num_states = kernels.front().rows();
    ts.identity = Tensor<double>::identity(ts.num_states);
    Tensor<double> acc = ts.identity;
    for (auto& k : kernels) {
      if (k.rows() != ts.num_states || k.cols() != ts.num_states) throw ShapeError("from_kernels: kernel shape");
      acc = matmul(acc, k);
      ts.qbar.push_back(acc);
      ts.q.push_back(std::move(k));
    }
    return ts;
  }

 private:
  void fill_kernels() {
    identity = Tensor<double>::identity(num_states);
    q.clear();
    qbar.clear();
    for (std::size_t s = 0; s < alpha.size(); ++s) {
      q.push_back(sym_expm(*eig, alpha[s]));
      qbar.push_back(sym_expm(*eig, alpha_bar[s]));
    }
  }
};

/// Rate matrix of B = (A + A^T) / (2K): off-diagonals from B, rows sum to 0.
inline Tensor<double> rate_matrix(const Tensor<double>& a, std::size_t k_nn) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ShapeError("rate_matrix: adjacency must be square");
  Tensor<double> r({n, n});
  const double inv = 1.0 / (2.0 * static_cast<double>(k_nn));
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      r(i, j) = (a(i, j) + a(j, i)) * inv;
      row += r(i, j);
    }
    r(i, i) = -row;
  }
  return r;
}

/// max_ij |exp(t R)_ij - 1/N|.
inline double uniformity_gap(const SymEig& eig, double t) {
  const auto m = sym_expm(eig, t);
  const double u = 1.0 / static_cast<double>(m.rows());
  double worst = 0.0;
  for (auto v : m.data()) worst = std::max(worst, std::abs(v - u));
  return worst;
}

struct ScheduleConfig {
  std::size_t steps = 200;
  double uniformity = 1e-3;  // target max |Qbar_S - 1/N|
  double growth = 1.15;      // geometric ratio of successive increments
  double alpha_cap = 1e7;
};

/// Smallest-found total time abar_S meeting the uniformity target (bisection),
/// split into geometrically growing increments.
inline TransitionSchedule build_schedule(const Tensor<double>& a, std::size_t k_nn, const ScheduleConfig& cfg) {
  if (cfg.steps < 1) throw ContractError("build_schedule: S must be >= 1");
  if (k_nn < 1) throw ContractError("build_schedule: K_nn must be >= 1");
  auto r = rate_matrix(a, k_nn);
  if (!is_connected(r)) {
    throw ContractError("build_schedule: the symmetrized location graph is disconnected; the uniform limit is unreachable");
  }
  const auto eig = sym_eig(r);
  double hi = 1.0;
  while (uniformity_gap(eig, hi) >= cfg.uniformity) {
    hi *= 2.0;
    if (hi > cfg.alpha_cap) throw ScheduleError("build_schedule: uniformity target not reached below alpha cap");
  }
  double lo = 0.0;
  for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (uniformity_gap(eig, mid) < cfg.uniformity)
      hi = mid;
    else
      lo = mid;
  }
  const double total = hi;
  const std::size_t steps = cfg.steps;
  std::vector<double> cum(steps), inc(steps);
  for (std::size_t s = 1; s <= steps; ++s) {
    double frac;
    if (cfg.growth == 1.0) {
      frac = static_cast<double>(s) / static_cast<double>(steps);
    } else {
      // (rho^s - 1) / (rho^S - 1), evaluated without overflow.
      const double lr = std::log(cfg.growth);
      frac = std::exp(lr * (static_cast<double>(s) - static_cast<double>(steps))) *
             (-std::expm1(-lr * static_cast<double>(s))) / (-std::expm1(-lr * static_cast<double>(steps)));
    }
    cum[s - 1] = s == steps ? total : total * frac;
  }
  for (std::size_t s = 0; s < steps; ++s) inc[s] = s == 0 ? cum[0] : cum[s] - cum[s - 1];
  return TransitionSchedule::from_rate_cumulative(std::move(r), std::move(inc), std::move(cum));
}

}  // namespace mstdiff::ukg
