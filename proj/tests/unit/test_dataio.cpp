#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mstdiff/checkpoint.hpp"
#include "mstdiff/dataio.hpp"
#include "mstdiff/metrics.hpp"
#include "mstdiff/numerics/dft.hpp"

using namespace mstdiff;
using dataio::IngestConfig;
using dataio::RawRecord;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mstdiff_dataio_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

RawRecord rec(const std::string& user, std::int64_t slot, const std::string& bs, double vol, const IngestConfig& c = {}) {
  const double lon = bs == "A" ? 10.0 : bs == "B" ? 10.01 : 10.02;
  return {user, c.week_start + slot * c.slot_seconds + 7, bs, lon, 45.0, vol};
}

}  // namespace

TEST(Ingest, OneRecordPerSlotRoundTrips) {
  IngestConfig cfg;
  Rng rng(1);
  dataio::Ingestor ing(cfg);
  std::vector<double> vol(336);
  for (std::size_t t = 0; t < 336; ++t) {
    vol[t] = 1e5 * (1.0 + rng.uniform());
    ing.add(rec("u", static_cast<std::int64_t>(t), t % 2 ? "A" : "B", vol[t]));
  }
  const auto d = ing.finish();
  ASSERT_EQ(d.users(), 1u);
  ASSERT_EQ(d.length(), 336u);
  const auto back = dataio::denormalize(d, 0, false);
  for (std::size_t t = 0; t < 336; ++t) EXPECT_NEAR(back[t], vol[t], 1e-9 * vol[t]);
  EXPECT_EQ(d.station_ids, (std::vector<std::string>{"A", "B"}));
  EXPECT_EQ(d.trajectory[1], 0u);
  EXPECT_EQ(d.trajectory[0], 1u);
}

TEST(Ingest, ModalStationPerSlot) {
  dataio::Ingestor ing(IngestConfig{});
  ing.add(rec("u", 0, "B", 1));
  ing.add(rec("u", 0, "A", 1));
  ing.add(rec("u", 0, "A", 1));
  ing.add(rec("u", 1, "B", 5));
  const auto d = ing.finish();
  EXPECT_EQ(d.trajectory[0], 0u);  // A
  EXPECT_EQ(d.trajectory[1], 1u);  // B
}

TEST(Ingest, ConstantVolumeNormalisesToZero) {
  dataio::Ingestor ing(IngestConfig{});
  for (int t = 0; t < 336; ++t) ing.add(rec("u", t, t < 100 ? "A" : "B", 42.0));
  const auto d = ing.finish();
  for (auto v : d.traffic.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(dataio::denormalize(d, 0, false)[5], 42.0);
}

TEST(Ingest, GapsCarryLocationForwardWithZeroTraffic) {
  dataio::Ingestor ing(IngestConfig{});
  ing.add(rec("u", 3, "B", 10));
  ing.add(rec("u", 10, "A", 20));
  const auto d = ing.finish();
  for (std::size_t t = 0; t < 10; ++t) EXPECT_EQ(d.trajectory[t], 1u) << t;  // leading gap takes the first location
  for (std::size_t t = 10; t < 336; ++t) EXPECT_EQ(d.trajectory[t], 0u) << t;
  EXPECT_EQ(d.traffic(0, 3), 0.5);
  EXPECT_EQ(d.traffic(0, 10), 1.0);
  EXPECT_EQ(d.traffic(0, 100), 0.0);
}

TEST(Ingest, CsvCountersAndFilters) {
  IngestConfig cfg;
  cfg.bbox = dataio::BoundingBox{9.0, 10.015, 44.0, 46.0};
  std::ostringstream csv;
  csv << dataio::kRecordHeader << "\n";
  csv << dataio::format_record(rec("u1", 0, "A", 5)) << "\n";
  csv << dataio::format_record(rec("u1", 1, "B", 6)) << "\n";
  csv << dataio::format_record(rec("u1", 2, "C", 7)) << "\n";       // outside bbox
  csv << dataio::format_record(rec("u2", 400, "A", 1)) << "\n";     // outside the week
  csv << "u3,notanumber,A,10,45,1\n";                              // malformed
  csv << "u3,1704067200,A,10,45\n";                                // malformed
  csv << "u3,1704067200,A,10,45,-3\n";                             // malformed
  std::istringstream in(csv.str());
  dataio::IngestReport rep;
  const auto d = dataio::ingest(in, cfg, &rep);
  EXPECT_EQ(rep.rows, 7u);
  EXPECT_EQ(rep.accepted, 2u);
  EXPECT_EQ(rep.malformed, 3u);
  EXPECT_EQ(rep.outside_bbox, 1u);
  EXPECT_EQ(rep.out_of_week, 1u);
  EXPECT_EQ(rep.users_dropped, 1u);  // u2
  ASSERT_EQ(rep.warnings.size(), 1u);
  EXPECT_NE(rep.warnings[0].find("u2"), std::string::npos);
  EXPECT_EQ(d.users(), 1u);
  EXPECT_EQ(d.locations(), 2u);
}

TEST(Ingest, Log1pTransformInverts) {
  IngestConfig cfg;
  cfg.log1p = true;
  dataio::Ingestor ing(cfg);
  const std::vector<double> vol{0.0, 10.0, 1e6, 3e3};
  for (std::size_t t = 0; t < 336; ++t) ing.add(rec("u", static_cast<std::int64_t>(t), t % 3 ? "A" : "B", vol[t % 4]));
  const auto d = ing.finish();
  const auto back = dataio::denormalize(d, 0, true);
  for (std::size_t t = 0; t < 336; ++t) EXPECT_NEAR(back[t], vol[t % 4], 1e-9 * std::max(1.0, vol[t % 4]));
}

TEST(Ingest, NormalisationInverseOnRandomUsers) {
  Rng rng(2);
  dataio::Ingestor ing(IngestConfig{});
  std::map<std::string, std::vector<double>> truth;
  for (int u = 0; u < 20; ++u) {
    const std::string id = "u" + std::to_string(100 + u);
    auto& v = truth[id];
    v.resize(336);
    for (std::size_t t = 0; t < 336; ++t) {
      v[t] = std::exp(10.0 + 3.0 * rng.normal());
      ing.add(rec(id, static_cast<std::int64_t>(t), rng.uniform() < 0.5 ? "A" : "C", v[t]));
    }
  }
  const auto d = ing.finish();
  for (std::size_t u = 0; u < d.users(); ++u) {
    const auto back = dataio::denormalize(d, u, false);
    const auto& v = truth.at(d.user_ids[u]);
    for (std::size_t t = 0; t < 336; ++t) EXPECT_NEAR(back[t], v[t], 1e-9 * (d.norm_max[u] - d.norm_min[u]));
  }
}

TEST(Synthesize, DeterministicAndCsvIngestReproducesIt) {
  dataio::SynthConfig sc;
  sc.users = 20;
  const auto a = dataio::synthesize(sc);
  const auto b = dataio::synthesize(sc);
  EXPECT_EQ(dataio::dataset_bundle(a.dataset).serialize(), dataio::dataset_bundle(b.dataset).serialize());

  const auto dir = scratch("synth");
  dataio::write_records(a.records, dir / "records.csv");
  dataio::write_stations(a.dataset, dir / "stations.csv");
  IngestConfig ic;
  ic.stations = dataio::read_stations(dir / "stations.csv");
  auto c = dataio::ingest_csv(dir / "records.csv", ic);
  c.archetype = a.dataset.archetype;
  c.station_group = a.dataset.station_group;
  EXPECT_EQ(dataio::dataset_bundle(c).serialize(), dataio::dataset_bundle(a.dataset).serialize());
  std::filesystem::remove_all(dir);
}

TEST(Synthesize, GeneratorContracts) {
  dataio::SynthConfig sc;
  const auto r = dataio::synthesize(sc);
  const auto& d = r.dataset;
  EXPECT_EQ(d.users(), 200u);
  EXPECT_EQ(d.locations(), 25u);
  EXPECT_NO_THROW(r.kg.validate_stations(d.station_ids));
  std::set<std::size_t> rels;
  for (const auto& t : r.kg.triplets()) rels.insert(t.relation);
  EXPECT_EQ(rels.size(), ukg::kRelationCount);

  double mean[2] = {0, 0};
  for (std::size_t u = 0; u < d.users(); ++u) {
    const auto traj = d.user_trajectory(u);
    const std::set<std::size_t> distinct(traj.begin(), traj.end());
    EXPECT_GE(distinct.size(), 2u) << u;
    for (auto l : distinct) EXPECT_EQ(d.station_group[l], d.archetype[u]);  // disjoint location sets
    double s = 0;
    for (double v : d.traffic.row(u)) s += v;
    mean[d.archetype[u]] += s / 336.0 / 100.0;
  }
  EXPECT_GT(mean[1], mean[0] + 0.1);  // distinct normalised traffic levels
}

TEST(Synthesize, DailySpectralPeak) {
  const auto r = dataio::synthesize({});
  std::vector<double> m(336, 0.0);
  for (std::size_t u = 0; u < r.dataset.users(); ++u)
    for (std::size_t t = 0; t < 336; ++t) m[t] += r.dataset.traffic(u, t);
  const auto spec = dft(m);
  std::size_t best = 1;
  for (std::size_t k = 1; k <= 168; ++k)
    if (std::abs(spec[k]) > std::abs(spec[best])) best = k;
  EXPECT_EQ(best, 7u);
}

// The benchmark must carry structure in every metric: replacing users with
// uniform noise has to raise each score.
TEST(Synthesize, UniformCorruptionRaisesEveryMetric) {
  const auto d = dataio::synthesize({}).dataset;
  const std::size_t T = 336, n = d.locations();
  std::vector<double> prev(9, 0.0);
  for (double frac : {0.25, 0.5, 1.0}) {
    Rng rng(9);
    auto traffic = d.traffic;
    auto traj = d.trajectory;
    const auto k = static_cast<std::size_t>(frac * static_cast<double>(d.users()));
    for (std::size_t u = 0; u < k; ++u)
      for (std::size_t t = 0; t < T; ++t) {
        traffic(u, t) = rng.uniform();
        traj[u * T + t] = rng.uniform_int(n);
      }
    const auto v = metrics::evaluate(d.traffic, d.trajectory, traffic, traj, d.coords).values();
    for (std::size_t i = 0; i < 9; ++i) EXPECT_GT(v[i], prev[i]) << metrics::MetricsReport::names()[i] << " at " << frac;
    prev = v;
  }
}

TEST(Synthesize, RejectsBadConfig) {
  dataio::SynthConfig sc;
  sc.users = 1;
  EXPECT_THROW(dataio::synthesize(sc), ConfigError);
  sc.users = 10;
  sc.locations = 3;
  EXPECT_THROW(dataio::synthesize(sc), ConfigError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Rng rng(3);
  io::Bundle b;
  b.config_hash = 0x1234;
  b.put("w", init_normal<double>({3, 4}, rng, 1.0));
  b.put("f", init_normal<float>({5}, rng, 1.0));
  b.put_indices("idx", {1, 2, 3, 4}, {2, 2});
  b.put_ints("ints", {-1, 5});
  b.put_text("note", "hello\n");
  const auto dir = scratch("ckpt");
  b.save(dir / "a.bin");
  const auto l = io::load(dir / "a.bin", 0x1234);
  EXPECT_TRUE(l.warnings.empty());
  l.bundle.save(dir / "b.bin");
  EXPECT_EQ(l.bundle.serialize(), b.serialize());
  EXPECT_EQ(l.bundle.get<double>("w").storage(), b.get<double>("w").storage());
  EXPECT_EQ(l.bundle.get<float>("f").storage(), b.get<float>("f").storage());
  EXPECT_EQ(l.bundle.get_indices("idx"), (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(l.bundle.get_ints("ints"), (std::vector<int>{-1, 5}));
  EXPECT_EQ(l.bundle.get_text("note"), "hello\n");
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, NonFiniteValuesSurviveBitwise) {
  io::Bundle b;
  b.put("x", Tensor<double>({3}, {std::nan(""), -0.0, std::numeric_limits<double>::infinity()}));
  const auto x = io::parse(b.serialize()).get<double>("x");
  EXPECT_TRUE(std::isnan(x[0]));
  EXPECT_TRUE(std::signbit(x[1]));
  EXPECT_TRUE(std::isinf(x[2]));
}

TEST(Checkpoint, TamperedShapeHeaderNamesTheTensor) {
  io::Bundle b;
  b.put("first", Tensor<double>({2}, 1.0));
  b.put("enc.weight", Tensor<double>({2, 3}, 1.0));
  auto bytes = b.serialize();
  // Locate the first dimension of "enc.weight" and change it.
  const std::string key = "enc.weight";
  const auto at = std::search(bytes.begin(), bytes.end(), key.begin(), key.end()) - bytes.begin();
  bytes[static_cast<std::size_t>(at) + key.size() + 8] = 7;
  try {
    io::parse(bytes);
    FAIL() << "expected a load error";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("enc.weight"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, CorruptionVersionAndMagic) {
  io::Bundle b;
  b.put("x", Tensor<double>({4}, 2.0));
  auto bytes = b.serialize();
  auto flip = bytes;
  flip[flip.size() - 12] ^= 0x1;  // inside the data blob
  EXPECT_THROW(io::parse(flip), LoadError);
  auto ver = bytes;
  ver[4] = 9;
  try {
    io::parse(ver);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos);
  }
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(io::parse(magic), LoadError);
  EXPECT_THROW(io::parse(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 20)), LoadError);
}

TEST(Checkpoint, ConfigHashMismatchWarnsButLoads) {
  io::Bundle b;
  b.config_hash = 1;
  b.put("x", Tensor<double>({1}, 1.0));
  const auto dir = scratch("hash");
  b.save(dir / "x.bin");
  const auto l = io::load(dir / "x.bin", 2);
  EXPECT_EQ(l.warnings.size(), 1u);
  EXPECT_EQ(l.bundle.get<double>("x")[0], 1.0);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ParamsRestoreChecksShapes) {
  Rng rng(4);
  ParamSet<double> p;
  p.add("a", init_normal<double>({2, 2}, rng, 1.0));
  p.add("b", init_normal<double>({3}, rng, 1.0));
  io::Bundle bundle;
  bundle.put_params("m.", p);
  ParamSet<double> q;
  q.add("a", Tensor<double>({2, 2}));
  q.add("b", Tensor<double>({3}));
  bundle.get_params("m.", q);
  EXPECT_EQ(q.checksum(), p.checksum());
  ParamSet<double> bad;
  bad.add("a", Tensor<double>({4}));
  try {
    bundle.get_params("m.", bad);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("m.a"), std::string::npos);
  }
  ParamSet<double> missing;
  missing.add("zz", Tensor<double>({1}));
  EXPECT_THROW(bundle.get_params("m.", missing), LoadError);
}

TEST(DatasetCache, RoundTrip) {
  dataio::SynthConfig sc;
  sc.users = 6;
  const auto d = dataio::synthesize(sc).dataset;
  const auto dir = scratch("cache");
  dataio::save_dataset(d, dir / "d.bin");
  const auto e = dataio::load_dataset(dir / "d.bin");
  EXPECT_EQ(e.traffic.storage(), d.traffic.storage());
  EXPECT_EQ(e.trajectory, d.trajectory);
  EXPECT_EQ(e.station_ids, d.station_ids);
  EXPECT_EQ(e.user_ids, d.user_ids);
  EXPECT_EQ(e.archetype, d.archetype);
  EXPECT_EQ(e.station_group, d.station_group);
  EXPECT_EQ(e.norm_max, d.norm_max);
  std::filesystem::remove_all(dir);
}
