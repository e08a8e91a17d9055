#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mstdiff/checkpoint.hpp"
#include "mstdiff/dataset.hpp"
#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/rng.hpp"
#include "mstdiff/ukg.hpp"

namespace mstdiff::dataio {

inline constexpr std::string_view kRecordHeader = "user_id,timestamp,bs_id,lon,lat,volume";

struct RawRecord {
  std::string user_id;
  std::int64_t timestamp = 0;  // epoch seconds
  std::string bs_id;
  double lon = 0.0;
  double lat = 0.0;
  double volume = 0.0;  // bytes
};

struct BoundingBox {
  double lon_min = -180.0, lon_max = 180.0;
  double lat_min = -90.0, lat_max = 90.0;

  bool contains(double lon, double lat) const { return lon >= lon_min && lon <= lon_max && lat >= lat_min && lat <= lat_max; }
};

/// Fixed station table. When given, ingestion keeps exactly these stations
/// (in this order) and rejects records at unknown stations.
struct StationTable {
  std::vector<std::string> ids;
  Tensor<double> coords;  // [N x 2]
};

struct IngestConfig {
  std::int64_t week_start = 1704067200;  // 2024-01-01 00:00 UTC, a Monday
  std::int64_t slot_seconds = 1800;
  std::size_t slots = 336;
  bool log1p = false;
  std::optional<BoundingBox> bbox;
  std::optional<StationTable> stations;
};

struct IngestReport {
  std::size_t rows = 0;
  std::size_t accepted = 0;
  std::size_t malformed = 0;
  std::size_t out_of_week = 0;
  std::size_t outside_bbox = 0;
  std::size_t unknown_station = 0;
  std::size_t users_dropped = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class N>
bool parse_number(std::string_view s, N& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && p == s.data() + s.size();
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace detail

/// Parses one CSV data row; nullopt when the row is malformed.
inline std::optional<RawRecord> parse_record(std::string_view line) {
  std::vector<std::string_view> f;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      f.push_back(detail::trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  if (f.size() != 6 || f[0].empty() || f[2].empty()) return std::nullopt;
  RawRecord r;
  r.user_id = std::string(f[0]);
  r.bs_id = std::string(f[2]);
  if (!detail::parse_number(f[1], r.timestamp) || !detail::parse_number(f[3], r.lon) ||
      !detail::parse_number(f[4], r.lat) || !detail::parse_number(f[5], r.volume))
    return std::nullopt;
  if (!std::isfinite(r.lon) || !std::isfinite(r.lat) || std::abs(r.lon) > 180.0 || std::abs(r.lat) > 90.0) return std::nullopt;
  if (!std::isfinite(r.volume) || r.volume < 0.0) return std::nullopt;
  return r;
}

inline std::string format_record(const RawRecord& r) {
  return r.user_id + "," + std::to_string(r.timestamp) + "," + r.bs_id + "," + detail::format_double(r.lon) + "," +
         detail::format_double(r.lat) + "," + detail::format_double(r.volume);
}

inline double normalize_value(double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.0; }

inline double denormalize_value(double x, double lo, double hi, bool log1p) {
  const double v = hi > lo ? x * (hi - lo) + lo : lo;
  return log1p ? std::expm1(v) : v;
}

/// Raw per-slot volumes of user `u`.
inline std::vector<double> denormalize(const Dataset& d, std::size_t u, bool log1p) {
  std::vector<double> out(d.length());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = denormalize_value(d.traffic(u, t), d.norm_min[u], d.norm_max[u], log1p);
  return out;
}

/// Single-pass binning of raw records onto the weekly grid.
///
/// Each slot sums the volumes of its records and takes the most frequent
/// station (ties go to the station listed first). Empty slots carry the
/// previous location forward with zero traffic; slots before a user's first
/// record take the first observed location.
class Ingestor {
 public:
  explicit Ingestor(IngestConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.slots == 0 || cfg_.slot_seconds <= 0) throw ConfigError("ingest: slots and slot length must be positive");
    if (cfg_.stations) {
      const auto& st = *cfg_.stations;
      if (st.coords.rows() != st.ids.size() || st.coords.cols() != 2) throw DataError("station table must be [N x 2]");
      for (std::size_t i = 0; i < st.ids.size(); ++i) {
        if (!station_index_.try_emplace(st.ids[i], i).second) throw DataError("duplicate station id " + st.ids[i]);
        station_ids_.push_back(st.ids[i]);
        station_coords_.push_back({st.coords(i, 0), st.coords(i, 1)});
      }
    }
  }

  /// Feeds one CSV line (header lines are skipped).
  void add_line(std::string_view line) {
    line = detail::trim(line);
    if (line.empty()) return;
    if (line == kRecordHeader) return;
    ++report_.rows;
    auto r = parse_record(line);
    if (!r) {
      ++report_.malformed;
      return;
    }
    add_parsed(*r);
  }

  void add(const RawRecord& r) {
    ++report_.rows;
    if (r.user_id.empty() || r.bs_id.empty() || !std::isfinite(r.volume) || r.volume < 0.0 || !std::isfinite(r.lon) ||
        !std::isfinite(r.lat)) {
      ++report_.malformed;
      return;
    }
    add_parsed(r);
  }

  Dataset finish() {
    const std::size_t slots = cfg_.slots;
    const std::size_t n = station_ids_.size();
    if (n < 2) throw DataError("ingest: fewer than two base stations in the accepted records");

    // Stations in table order, or sorted by id when discovered from records.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (!cfg_.stations)
      std::sort(order.begin(), order.end(), [&](auto a, auto b) { return station_ids_[a] < station_ids_[b]; });
    std::vector<std::size_t> rank(n);
    for (std::size_t i = 0; i < n; ++i) rank[order[i]] = i;

    std::vector<std::string> kept;
    for (const auto& [id, acc] : users_) {
      if (acc.records == 0) {
        ++report_.users_dropped;
        report_.warnings.push_back("user " + id + " has no records inside the week and region; dropped");
      } else {
        kept.push_back(id);
      }
    }
    if (kept.empty()) throw DataError("ingest: no user has any accepted record");

    Dataset d;
    d.traffic = Tensor<double>({kept.size(), slots});
    d.trajectory.assign(kept.size() * slots, 0);
    d.coords = Tensor<double>({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      d.station_ids.push_back(station_ids_[order[i]]);
      d.coords(i, 0) = station_coords_[order[i]][0];
      d.coords(i, 1) = station_coords_[order[i]][1];
    }
    d.user_ids = kept;
    d.norm_min.resize(kept.size());
    d.norm_max.resize(kept.size());
    d.archetype.assign(kept.size(), -1);

    for (std::size_t u = 0; u < kept.size(); ++u) {
      const auto& acc = users_.at(kept[u]);
      std::vector<double> v(slots, 0.0);
      std::optional<std::size_t> last;
      std::size_t first_seen = slots;
      for (std::size_t t = 0; t < slots; ++t) {
        const auto& cell = acc.slots[t];
        if (cell.counts.empty()) continue;
        v[t] = cell.volume;
        std::size_t best = 0, best_count = 0, best_rank = n;
        for (const auto& [s, c] : cell.counts) {
          if (c > best_count || (c == best_count && rank[s] < best_rank)) {
            best = s;
            best_count = c;
            best_rank = rank[s];
          }
        }
        d.trajectory[u * slots + t] = rank[best];
        if (first_seen == slots) first_seen = t;
      }
      for (std::size_t t = 0; t < slots; ++t) {
        if (acc.slots[t].counts.empty()) {
          d.trajectory[u * slots + t] = last ? *last : d.trajectory[u * slots + first_seen];
        }
        last = d.trajectory[u * slots + t];
      }
      if (cfg_.log1p)
        for (auto& x : v) x = std::log1p(x);
      const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
      d.norm_min[u] = *lo;
      d.norm_max[u] = *hi;
      for (std::size_t t = 0; t < slots; ++t) d.traffic(u, t) = normalize_value(v[t], *lo, *hi);
    }
    d.validate();
    return d;
  }

  const IngestReport& report() const noexcept { return report_; }

 private:
  struct Slot {
    double volume = 0.0;
    std::vector<std::pair<std::size_t, std::size_t>> counts;  // (station, records)
  };
  struct UserAcc {
    std::size_t records = 0;
    std::vector<Slot> slots;
  };

  void add_parsed(const RawRecord& r) {
    auto& acc = users_[r.user_id];
    if (acc.slots.empty()) acc.slots.resize(cfg_.slots);
    const std::int64_t off = r.timestamp - cfg_.week_start;
    if (off < 0 || off >= cfg_.slot_seconds * static_cast<std::int64_t>(cfg_.slots)) {
      ++report_.out_of_week;
      return;
    }
    if (cfg_.bbox && !cfg_.bbox->contains(r.lon, r.lat)) {
      ++report_.outside_bbox;
      return;
    }
    std::size_t s;
    auto it = station_index_.find(r.bs_id);
    if (it != station_index_.end()) {
      s = it->second;
      const auto& c = station_coords_[s];
      if (!cfg_.stations && (std::abs(c[0] - r.lon) > 1e-6 || std::abs(c[1] - r.lat) > 1e-6) && !coord_warned_.count(s)) {
        coord_warned_.insert({s, true});
        report_.warnings.push_back("station " + r.bs_id + " reported at more than one position; keeping the first");
      }
    } else if (cfg_.stations) {
      ++report_.unknown_station;
      return;
    } else {
      s = station_ids_.size();
      station_index_.emplace(r.bs_id, s);
      station_ids_.push_back(r.bs_id);
      station_coords_.push_back({r.lon, r.lat});
    }
    auto& cell = acc.slots[static_cast<std::size_t>(off / cfg_.slot_seconds)];
    cell.volume += r.volume;
    auto c = std::find_if(cell.counts.begin(), cell.counts.end(), [s](const auto& p) { return p.first == s; });
    if (c == cell.counts.end())
      cell.counts.emplace_back(s, 1);
    else
      ++c->second;
    ++acc.records;
    ++report_.accepted;
  }

  IngestConfig cfg_;
  IngestReport report_;
  std::map<std::string, UserAcc> users_;
  std::unordered_map<std::string, std::size_t> station_index_;
  std::vector<std::string> station_ids_;
  std::vector<std::array<double, 2>> station_coords_;
  std::map<std::size_t, bool> coord_warned_;
};

inline Dataset ingest(std::istream& in, const IngestConfig& cfg, IngestReport* report = nullptr) {
  Ingestor ing(cfg);
  std::string line;
  while (std::getline(in, line)) ing.add_line(line);
  auto d = ing.finish();
  if (report) *report = ing.report();
  return d;
}

inline Dataset ingest_csv(const std::filesystem::path& path, const IngestConfig& cfg, IngestReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return ingest(in, cfg, report);
}

inline void write_records(const std::vector<RawRecord>& records, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << kRecordHeader << "\n";
  for (const auto& r : records) f << format_record(r) << "\n";
}

/// One record per user and slot with denormalised volume.
inline std::vector<RawRecord> to_records(const Dataset& d, const IngestConfig& cfg) {
  std::vector<RawRecord> out;
  out.reserve(d.users() * d.length());
  for (std::size_t u = 0; u < d.users(); ++u) {
    const auto v = denormalize(d, u, cfg.log1p);
    for (std::size_t t = 0; t < d.length(); ++t) {
      const auto l = d.trajectory[u * d.length() + t];
      out.push_back({d.user_id(u), cfg.week_start + static_cast<std::int64_t>(t) * cfg.slot_seconds, d.station_ids[l],
                     d.coords(l, 0), d.coords(l, 1), v[t]});
    }
  }
  return out;
}

inline void write_stations(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "bs_id,lon,lat" << (d.station_group.empty() ? "" : ",group") << "\n";
  for (std::size_t i = 0; i < d.locations(); ++i) {
    f << d.station_ids[i] << "," << detail::format_double(d.coords(i, 0)) << "," << detail::format_double(d.coords(i, 1));
    if (!d.station_group.empty()) f << "," << d.station_group[i];
    f << "\n";
  }
}

inline StationTable read_stations(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  std::vector<std::string> ids;
  std::vector<double> xy;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string_view> parts;
    std::string_view s(line);
    for (std::size_t p; (p = s.find(',')) != std::string_view::npos; s.remove_prefix(p + 1)) parts.push_back(s.substr(0, p));
    parts.push_back(s);
    double lon, lat;
    if (parts.size() < 3 || !detail::parse_number(parts[1], lon) || !detail::parse_number(parts[2], lat))
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected bs_id,lon,lat");
    ids.emplace_back(detail::trim(parts[0]));
    xy.push_back(lon);
    xy.push_back(lat);
  }
  if (ids.empty()) throw DataError(path.string() + ": no stations");
  return {ids, Tensor<double>({ids.size(), 2}, xy)};
}

// ---------------------------------------------------------------- dataset cache

inline io::Bundle dataset_bundle(const Dataset& d) {
  io::Bundle b;
  b.put("traffic", d.traffic);
  b.put_indices("trajectory", d.trajectory, {d.users(), d.length()});
  b.put("coords", d.coords);
  b.put("norm_min", Tensor<double>({d.users()}, d.norm_min));
  b.put("norm_max", Tensor<double>({d.users()}, d.norm_max));
  std::string ids;
  for (const auto& s : d.station_ids) ids += s + "\n";
  b.put_text("station_ids", ids);
  std::string users;
  for (std::size_t u = 0; u < d.users(); ++u) users += d.user_id(u) + "\n";
  b.put_text("user_ids", users);
  if (!d.archetype.empty()) b.put_ints("archetype", d.archetype);
  if (!d.station_group.empty()) b.put_ints("station_group", d.station_group);
  return b;
}

inline Dataset dataset_from_bundle(const io::Bundle& b) {
  auto lines = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] == '\n') {
        out.push_back(s.substr(start, i - start));
        start = i + 1;
      }
    return out;
  };
  Dataset d;
  d.traffic = b.get<double>("traffic");
  d.trajectory = b.get_indices("trajectory");
  d.coords = b.get<double>("coords");
  d.norm_min = b.get<double>("norm_min").to_vector();
  d.norm_max = b.get<double>("norm_max").to_vector();
  d.station_ids = lines(b.get_text("station_ids"));
  d.user_ids = lines(b.get_text("user_ids"));
  if (b.has("archetype")) d.archetype = b.get_ints("archetype");
  if (b.has("station_group")) d.station_group = b.get_ints("station_group");
  try {
    d.validate();
  } catch (const DataError& e) {
    throw LoadError(std::string("dataset cache: ") + e.what());
  }
  return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path, std::uint64_t config_hash = 0) {
  auto b = dataset_bundle(d);
  b.config_hash = config_hash;
  b.save(path);
}

inline Dataset load_dataset(const std::filesystem::path& path) { return dataset_from_bundle(io::load(path).bundle); }

// ------------------------------------------------------------------ synthesis

struct SynthConfig {
  std::size_t users = 200;
  std::size_t locations = 25;
  std::size_t archetypes = 2;
  std::uint64_t seed = 1;
  double center_lon = 10.0;
  double center_lat = 45.0;
  double spacing_deg = 0.01;  // grid pitch, about 1 km
  std::size_t border_links = 3;
};

struct SynthResult {
  Dataset dataset;
  ukg::KnowledgeGraph kg;
  ukg::CityLayout city;
  std::vector<RawRecord> records;
};

namespace detail {

// Per-archetype traffic shape: baseline, diurnal amplitude, burst rate and
// burst size range, all relative to the user's scale. The first archetype
// is bursty around a low baseline, the last one busy and steady.
struct TrafficShape {
  double base, amp, burst_p, burst_lo, burst_hi;
};

inline TrafficShape traffic_shape(std::size_t a, std::size_t archetypes) {
  const double f = archetypes > 1 ? static_cast<double>(a) / static_cast<double>(archetypes - 1) : 0.5;
  auto lerp = [f](double x, double y) { return x + f * (y - x); };
  return {lerp(0.1, 0.35), lerp(0.3, 0.65), lerp(0.04, 0.01), lerp(0.8, 0.1), lerp(1.6, 0.4)};
}

}  // namespace detail

/// Synthetic city, population and knowledge graph.
///
/// Stations sit on a jittered grid. Columns are split into `archetypes`
/// bands; each band is one location group, and its stations draw POI
/// categories from their own slice of the category range. Users of archetype
/// a live and work inside band a and move with home/work anchors plus
/// exploration/preferential-return jumps. Traffic follows a diurnal
/// sinusoid scaled by the current station's category, with bursts.
inline SynthResult synthesize(const SynthConfig& cfg, const IngestConfig& icfg = {}) {
  if (cfg.users < 2) throw ConfigError("synthesize: need at least 2 users");
  if (cfg.locations < 4) throw ConfigError("synthesize: need at least 4 locations");
  if (cfg.archetypes < 1 || 2 * cfg.archetypes > cfg.locations) {
    throw ConfigError("synthesize: archetypes must be between 1 and locations / 2");
  }
  if (icfg.slots % 48 != 0 || icfg.slot_seconds != 1800) throw ConfigError("synthesize: expects whole days of 30-minute slots");
  const Rng root(cfg.seed);
  const std::size_t n = cfg.locations;
  const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const std::size_t rows = (n + cols - 1) / cols;
  const std::size_t groups = cfg.archetypes;

  SynthResult res;
  auto& city = res.city;
  city.coords = Tensor<double>({n, 2});
  std::vector<int> group(n);
  {
    Rng rng = root.fork(0);
    // Group bands split the stations by column-major order so every band
    // holds about n / groups stations.
    std::vector<std::size_t> colmajor(n);
    for (std::size_t i = 0; i < n; ++i) colmajor[i] = i;
    std::stable_sort(colmajor.begin(), colmajor.end(), [&](auto a, auto b) { return a % cols < b % cols; });
    for (std::size_t k = 0; k < n; ++k) group[colmajor[k]] = static_cast<int>(k * groups / n);
    const std::size_t per_group = std::max<std::size_t>(1, city.poi_categories / groups);
    for (std::size_t i = 0; i < n; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "bs_%03zu", i);
      city.station_ids.emplace_back(id);
      const double c = static_cast<double>(i % cols), r = static_cast<double>(i / cols);
      city.coords(i, 0) = cfg.center_lon + cfg.spacing_deg * (c - 0.5 * static_cast<double>(cols - 1) + rng.uniform(-0.3, 0.3));
      city.coords(i, 1) = cfg.center_lat + cfg.spacing_deg * (r - 0.5 * static_cast<double>(rows - 1) + rng.uniform(-0.3, 0.3));
      city.region.push_back((i % cols) * 2 / cols + 2 * ((i / cols) * 2 / rows));
      const std::size_t g = static_cast<std::size_t>(group[i]);
      city.category.push_back(std::min(city.poi_categories - 1, g * per_group + rng.uniform_int(per_group)));
    }
  }
  {
    Rng rng = root.fork(1);
    res.kg = ukg::synthesize_graph(city, rng, cfg.border_links);
  }

  std::vector<std::vector<std::size_t>> members(groups);
  for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(group[i])].push_back(i);
  // Zipf-like station popularity over a random ranking.
  std::vector<double> attract(n);
  {
    Rng rng = root.fork(2);
    std::vector<std::size_t> rank(n);
    for (std::size_t i = 0; i < n; ++i) rank[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(rank[i], rank[rng.uniform_int(i + 1)]);
    for (std::size_t i = 0; i < n; ++i) attract[i] = 1.0 / static_cast<double>(rank[i] + 1);
  }
  auto dist_km = [&](std::size_t i, std::size_t j) {
    return ukg::haversine_m(city.coords(i, 0), city.coords(i, 1), city.coords(j, 0), city.coords(j, 1)) / 1000.0;
  };

  const std::size_t slots = icfg.slots;
  std::vector<int> archetype(cfg.users);
  std::vector<std::string> user_ids(cfg.users);
  for (std::size_t u = 0; u < cfg.users; ++u) {
    Rng rng = root.fork(100 + u);
    char uid[32];
    std::snprintf(uid, sizeof uid, "user_%05zu", u);
    user_ids[u] = uid;
    const std::size_t a = u % groups;
    archetype[u] = static_cast<int>(a);
    const auto& home_set = members[a];
    std::vector<double> w(n, 0.0);
    for (auto l : home_set) w[l] = attract[l];
    const std::size_t home = rng.categorical(std::span<const double>(w));
    w[home] = 0.0;
    const std::size_t work = rng.categorical(std::span<const double>(w));
    const auto shape = detail::traffic_shape(a, groups);
    const double scale = 1e6 * std::exp(0.5 * rng.normal());

    std::vector<double> visits(n, 0.0);
    std::size_t cur = home;
    visits[home] = 1.0;
    std::vector<std::size_t> traj(slots);
    for (std::size_t t = 0; t < slots; ++t) {
      const std::size_t day = t / 48, slot = t % 48;
      const bool weekday = day < 5;
      std::optional<std::size_t> anchor;
      if (slot < 14 || slot >= 44)
        anchor = home;
      else if (weekday && slot >= 18 && slot < 34)
        anchor = work;
      if (anchor && cur != *anchor) {
        if (rng.uniform() < 0.7) cur = *anchor;
      } else if (rng.uniform() < (anchor ? 0.02 : 0.06)) {
        // Explore with probability rho * S^-gamma, otherwise return to a
        // visited place in proportion to past visits. New places are drawn
        // by popularity with a distance decay from the current one.
        std::vector<double> fresh(n, 0.0);
        for (auto l : members[a])
          if (visits[l] == 0.0) fresh[l] = attract[l] * std::exp(-dist_km(cur, l) / 1.0);
        const bool can_explore = std::any_of(fresh.begin(), fresh.end(), [](double v) { return v > 0; });
        const double seen = static_cast<double>(std::count_if(visits.begin(), visits.end(), [](double v) { return v > 0; }));
        std::vector<double> back = visits;
        back[cur] = 0.0;
        const bool can_return = std::any_of(back.begin(), back.end(), [](double v) { return v > 0; });
        if (can_explore && (!can_return || rng.uniform() < 0.6 * std::pow(seen, -0.21)))
          cur = rng.categorical(std::span<const double>(fresh));
        else if (can_return)
          cur = rng.categorical(std::span<const double>(back));
      }
      visits[cur] += 1.0;
      traj[t] = cur;
    }
    if (groups >= 2 && std::all_of(traj.begin(), traj.end(), [&](auto l) { return l == traj[0]; })) traj[20] = work;

    for (std::size_t t = 0; t < slots; ++t) {
      const double phase = 2.0 * std::numbers::pi * (static_cast<double>(t % 48) - 8.0) / 48.0;
      const double diurnal = 0.5 * (1.0 - std::cos(phase));
      const double cat = 0.6 + 0.15 * static_cast<double>(city.category[traj[t]]);
      double v = cat * (shape.base + shape.amp * diurnal) * std::exp(0.1 * rng.normal());
      if (rng.uniform() < shape.burst_p) v += rng.uniform(shape.burst_lo, shape.burst_hi);
      const auto l = traj[t];
      res.records.push_back({user_ids[u], icfg.week_start + static_cast<std::int64_t>(t) * icfg.slot_seconds,
                             city.station_ids[l], city.coords(l, 0), city.coords(l, 1), scale * v});
    }
  }

  IngestConfig ic = icfg;
  ic.stations = StationTable{city.station_ids, city.coords};
  Ingestor ing(ic);
  for (const auto& r : res.records) ing.add(r);
  res.dataset = ing.finish();
  res.dataset.archetype = archetype;  // user ids are zero-padded, so ingestion keeps their order
  res.dataset.station_group = group;

  Tensor<double> border({n, n});
  ukg::add_border_links(border, res.kg, city.station_ids);
  if (!ukg::is_connected(ukg::rate_matrix(border, 1))) throw ContractError("synthesize: station graph is disconnected");
  return res;
}

}  // namespace mstdiff::dataio
