#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mstdiff/checkpoint.hpp"
#include "mstdiff/config.hpp"
#include "mstdiff/dataio.hpp"
#include "mstdiff/engine.hpp"
#include "mstdiff/metrics.hpp"
#include "mstdiff/ukg.hpp"
#include "mstdiff/vqvae.hpp"
#include "mstdiff/wavelet.hpp"

namespace mstdiff::pipeline {

namespace fs = std::filesystem;

/// Keeps freed buffers in the heap instead of returning them to the OS.
/// Sampling allocates and releases multi-megabyte activations every step;
/// with glibc defaults about half its time goes to page faults.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// Artifact names inside a run directory.
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kDataset = "dataset.bin";
inline constexpr const char* kRecords = "records.csv";
inline constexpr const char* kStations = "stations.csv";
inline constexpr const char* kGraph = "kg.tsv";
inline constexpr const char* kVqvae = "vqvae.bin";
inline constexpr const char* kTucker = "tucker.bin";
inline constexpr const char* kSchedule = "schedule.bin";
inline constexpr const char* kDenoiser = "denoiser.bin";
inline constexpr const char* kTrainLog = "train_log.jsonl";

/// Stage context: the resolved config, the run directory and a progress sink.
struct Run {
  RunConfig cfg;
  fs::path dir;
  std::ostream* log = &std::cerr;

  fs::path path(const std::string& name) const { return dir / name; }

  void note(const std::string& msg) const {
    if (log) *log << msg << std::endl;
  }

  void require(const std::string& name, const char* producer) const {
    if (!fs::exists(path(name))) throw IoError("missing " + path(name).string() + " (run `" + producer + "` first)");
  }

  void save_config() const {
    fs::create_directories(dir);
    cfg.save(path(kConfig));
  }

  io::Bundle load_bundle(const std::string& name, const char* producer) const {
    require(name, producer);
    auto r = io::load(path(name), cfg.hash());
    for (const auto& w : r.warnings) note("warning: " + w);
    return std::move(r.bundle);
  }
};

inline void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  f << j.dump(2) << "\n";
}

// --------------------------------------------------------------------- data

inline void write_dataset_artifacts(const Run& run, const Dataset& d) {
  dataio::save_dataset(d, run.path(kDataset), run.cfg.hash());
  dataio::write_stations(d, run.path(kStations));
}

inline Dataset synth(const Run& run) {
  run.save_config();
  auto res = dataio::synthesize(run.cfg.synth, run.cfg.ingest_config());
  dataio::write_records(res.records, run.path(kRecords));
  res.kg.save_tsv(run.path(kGraph).string());
  write_dataset_artifacts(run, res.dataset);
  run.note("synth: " + std::to_string(res.dataset.users()) + " users, " + std::to_string(res.dataset.locations()) +
           " stations, " + std::to_string(res.kg.triplets().size()) + " triplets");
  return res.dataset;
}

inline Dataset ingest(const Run& run, const fs::path& records, const std::optional<fs::path>& stations) {
  run.save_config();
  auto ic = run.cfg.ingest_config();
  if (stations) ic.stations = dataio::read_stations(*stations);
  dataio::IngestReport rep;
  auto d = dataio::ingest_csv(records, ic, &rep);
  for (const auto& w : rep.warnings) run.note("warning: " + w);
  write_dataset_artifacts(run, d);
  write_json(run.path("ingest_report.json"), {{"rows", rep.rows},
                                             {"accepted", rep.accepted},
                                             {"malformed", rep.malformed},
                                             {"out_of_week", rep.out_of_week},
                                             {"outside_bbox", rep.outside_bbox},
                                             {"unknown_station", rep.unknown_station},
                                             {"users_dropped", rep.users_dropped},
                                             {"users", d.users()},
                                             {"stations", d.locations()}});
  run.note("ingest: " + std::to_string(d.users()) + " users, " + std::to_string(rep.malformed) + " malformed rows");
  return d;
}

inline Dataset load_dataset(const Run& run) {
  run.require(kDataset, "synth or ingest");
  return dataio::load_dataset(run.path(kDataset));
}

// ------------------------------------------------------------------- VQ-VAE

inline void pretrain_vqvae(const Run& run) {
  run.save_config();
  const auto d = load_dataset(run);
  const auto coeffs = wavelet::dwt3_rows(d.traffic);
  const auto res = vqvae::pretrain(coeffs, run.cfg.vqvae);
  io::Bundle b;
  b.config_hash = run.cfg.hash();
  nlohmann::ordered_json rep = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < wavelet::kBands; ++k) {
    b.put_params("band" + std::to_string(k) + ".", res.models[k].params);
    rep.push_back({{"band", k},
                   {"initial_rec", res.report[k].initial_rec},
                   {"final_rec", res.report[k].final_rec},
                   {"codes_used", res.report[k].codes_used}});
  }
  b.save(run.path(kVqvae));
  write_json(run.path("vqvae_report.json"), rep);
  run.note("pretrain-vqvae: " + rep.dump());
}

inline denoiser::FrozenVq load_vqvae(const Run& run) {
  const auto b = run.load_bundle(kVqvae, "pretrain-vqvae");
  auto vq = std::make_shared<std::array<vqvae::Vqvae, wavelet::kBands>>();
  const auto len = wavelet::band_lengths(run.cfg.ingest.slots);
  Rng dummy(0);
  for (std::size_t k = 0; k < wavelet::kBands; ++k) {
    (*vq)[k] = vqvae::Vqvae::init(len[k], run.cfg.vqvae, dummy);
    b.get_params("band" + std::to_string(k) + ".", (*vq)[k].params);
  }
  return vq;
}

// -------------------------------------------------------------------- graph

inline void train_kg(const Run& run) {
  run.save_config();
  run.require(kGraph, "synth");
  const auto kg = ukg::KnowledgeGraph::load_tsv(run.path(kGraph).string());
  const auto res = ukg::tucker_train(kg, run.cfg.kg);
  io::Bundle b;
  b.config_hash = run.cfg.hash();
  b.put_params("tucker.", res.model.params);
  b.save(run.path(kTucker));
  const auto& r = res.report;
  write_json(run.path("kg_report.json"), {{"initial_loss", r.initial_loss},
                                          {"final_loss", r.final_loss},
                                          {"heldout_true_mean", r.heldout_true_mean},
                                          {"heldout_corrupt_mean", r.heldout_corrupt_mean},
                                          {"train_triplets", r.train_triplets},
                                          {"heldout_triplets", r.heldout_triplets}});
  run.note("train-kg: loss " + std::to_string(r.initial_loss) + " -> " + std::to_string(r.final_loss));
}

inline void build_schedule(const Run& run) {
  run.save_config();
  run.require(kGraph, "synth");
  const auto d = load_dataset(run);
  const auto kg = ukg::KnowledgeGraph::load_tsv(run.path(kGraph).string());
  const auto tb = run.load_bundle(kTucker, "train-kg");
  Rng dummy(0);
  auto model = ukg::TuckerModel::init(kg.entity_count(), ukg::kRelationCount, run.cfg.kg.entity_dim, run.cfg.kg.relation_dim,
                                      run.cfg.kg.init_sd, dummy);
  tb.get_params("tucker.", model.params);
  const auto emb = ukg::station_embeddings(model, kg, d.station_ids);
  const auto& ac = run.cfg.adjacency;
  auto adj = ukg::build_adjacency(emb, d.coords, ac.k_nn, ac.distance_threshold_m);
  if (ac.include_border_links) ukg::add_border_links(adj.matrix, kg, d.station_ids);
  const auto ts = ukg::build_schedule(adj.matrix, ac.k_nn, run.cfg.schedule);
  io::Bundle b;
  b.config_hash = run.cfg.hash();
  b.put("adjacency", adj.matrix);
  b.put("alpha", Tensor<double>({ts.steps()}, ts.alpha));
  b.put("alpha_bar", Tensor<double>({ts.steps()}, ts.alpha_bar));
  b.save(run.path(kSchedule));
  double gap = 0.0;
  for (auto v : ts.qbar_at(ts.steps()).data()) gap = std::max(gap, std::abs(v - 1.0 / static_cast<double>(ts.num_states)));
  std::size_t edges = 0;
  for (auto v : adj.matrix.data()) edges += v > 0 ? 1 : 0;
  write_json(run.path("schedule_report.json"), {{"locations", ts.num_states},
                                                {"edges", edges},
                                                {"empty_knn_rows", adj.empty_rows},
                                                {"alpha_bar_S", ts.alpha_bar.back()},
                                                {"terminal_gap", gap}});
  run.note("build-schedule: " + std::to_string(edges) + " edges, abar_S " + std::to_string(ts.alpha_bar.back()));
}

struct Schedules {
  cdiff::GaussianSchedule traffic;
  ukg::TransitionSchedule trajectory;
};

inline Schedules load_schedules(const Run& run) {
  const auto b = run.load_bundle(kSchedule, "build-schedule");
  const auto a = b.get<double>("adjacency");
  auto ts = ukg::TransitionSchedule::from_rate_cumulative(ukg::rate_matrix(a, run.cfg.adjacency.k_nn),
                                                          b.get<double>("alpha").to_vector(), b.get<double>("alpha_bar").to_vector());
  if (ts.steps() != run.cfg.schedule.steps) throw ConfigError("schedule.steps differs from the stored schedule; rerun build-schedule");
  auto gs = cdiff::GaussianSchedule::linear(ts.steps(), run.cfg.traffic.beta_start, run.cfg.traffic.beta_end);
  return {std::move(gs), std::move(ts)};
}

// ----------------------------------------------------------------- denoiser

inline denoiser::DenoiserConfig model_config(const Run& run, std::size_t locations) {
  auto mc = run.cfg.model;
  mc.series_length = run.cfg.ingest.slots;
  mc.num_locations = locations;
  return mc;
}

/// Freshly initialised network; the untrained baseline uses exactly this.
inline denoiser::Denoiser<float> init_denoiser(const Run& run, std::size_t locations) {
  Rng rng(run.cfg.train.seed);
  return denoiser::Denoiser<float>(model_config(run, locations), load_vqvae(run), rng);
}

inline engine::TrainConfig train_config(const Run& run) {
  auto tc = run.cfg.train;
  tc.feed_onehot = run.cfg.feed_onehot;
  return tc;
}

inline void train(const Run& run) {
  run.save_config();
  const auto d = load_dataset(run);
  const auto sch = load_schedules(run);
  auto net = init_denoiser(run, d.locations());
  std::ofstream log(run.path(kTrainLog));
  if (!log) throw IoError("cannot write " + run.path(kTrainLog).string());
  const std::size_t every = std::max<std::size_t>(1, run.cfg.log_every);
  double window = 0.0, first_window = -1.0;
  std::size_t degenerate = 0;
  engine::train(net, d, sch.traffic, sch.trajectory, train_config(run), [&](const engine::TrainLogEntry& e) {
    window += e.loss.total;
    degenerate += e.loss.degenerate;
    nlohmann::ordered_json j{{"step", e.step},         {"total", e.loss.total},   {"l_tr", e.loss.l_tr},
                             {"l_tj", e.loss.l_tj},     {"l_pred", e.loss.l_pred}, {"degenerate", e.loss.degenerate}};
    log << j.dump() << "\n";
    if (e.step % every == 0) {
      const double mean = window / static_cast<double>(every);
      if (first_window < 0) first_window = mean;
      run.note("train: step " + std::to_string(e.step) + " mean loss " + std::to_string(mean) + " (" +
               std::to_string(static_cast<int>(e.wall_seconds)) + " s)");
      window = 0.0;
    }
  });
  io::Bundle b;
  b.config_hash = run.cfg.hash();
  b.put_params("denoiser.", net.params());
  b.save(run.path(kDenoiser));
  write_json(run.path("train_report.json"), {{"steps", run.cfg.train.steps}, {"degenerate_posteriors", degenerate}});
}

inline denoiser::Denoiser<float> load_denoiser(const Run& run, std::size_t locations) {
  auto net = init_denoiser(run, locations);
  const auto b = run.load_bundle(kDenoiser, "train");
  auto p = net.params();
  b.get_params("denoiser.", p);
  net.set_params(std::move(p));
  return net;
}

// ----------------------------------------------------------------- sampling

/// Generated users as a dataset. Each generated user borrows the
/// normalisation pair of a real user drawn with the sampling seed, so
/// denormalised volumes land on a realistic scale.
inline Dataset to_dataset(const engine::SampleResult& s, const Dataset& real, std::uint64_t seed) {
  Dataset g;
  g.traffic = s.traffic;
  g.trajectory = s.trajectory;
  g.coords = real.coords;
  g.station_ids = real.station_ids;
  g.station_group = real.station_group;
  Rng rng = Rng(seed).fork(0xD0);
  for (std::size_t u = 0; u < g.traffic.rows(); ++u) {
    char id[32];
    std::snprintf(id, sizeof id, "gen_%05zu", u);
    g.user_ids.emplace_back(id);
    const std::size_t r = rng.uniform_int(real.users());
    g.norm_min.push_back(real.norm_min[r]);
    g.norm_max.push_back(real.norm_max[r]);
  }
  g.validate();
  return g;
}

inline Dataset sample(const Run& run, bool untrained, const fs::path& out_dir) {
  run.save_config();
  const auto d = load_dataset(run);
  const auto sch = load_schedules(run);
  const auto net = untrained ? init_denoiser(run, d.locations()) : load_denoiser(run, d.locations());
  auto sc = run.cfg.sample;
  sc.feed_onehot = run.cfg.feed_onehot;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = engine::sample(net, sch.traffic, sch.trajectory, sc);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto g = to_dataset(res, d, sc.seed);
  fs::create_directories(out_dir);
  dataio::save_dataset(g, out_dir / kDataset, run.cfg.hash());
  dataio::write_records(dataio::to_records(g, run.cfg.ingest_config()), out_dir / "generated_records.csv");
  write_json(out_dir / "sample_report.json",
             {{"users", sc.users}, {"untrained", untrained}, {"degenerate_posteriors", res.degenerate}});
  run.note(std::string("sample") + (untrained ? " (untrained)" : "") + ": " + std::to_string(sc.users) + " users in " +
           std::to_string(static_cast<int>(secs)) + " s");
  return g;
}

// --------------------------------------------------------------- evaluation

struct Evaluation {
  metrics::MetricsReport report;
  std::optional<metrics::ArchetypeAgreement> archetype;
};

inline Evaluation evaluate(const RunConfig& cfg, const Dataset& real, const Dataset& gen, const fs::path& out_dir) {
  if (real.locations() != gen.locations()) throw DataError("evaluate: datasets have different station sets");
  Evaluation e;
  e.report = metrics::evaluate(real.traffic, real.trajectory, gen.traffic, gen.trajectory, real.coords, cfg.metrics_config());
  e.report.write(out_dir);
  if (!real.station_group.empty()) {
    e.archetype = metrics::archetype_agreement(real.traffic, real.trajectory, gen.traffic, gen.trajectory, real.station_group);
    write_json(out_dir / "archetype.json", {{"real_agreement", e.archetype->real},
                                             {"generated_agreement", e.archetype->generated},
                                             {"threshold", e.archetype->threshold},
                                             {"group1_higher", e.archetype->group1_higher}});
  }
  return e;
}

// -------------------------------------------------------------------- trace

inline nlohmann::ordered_json tensor_json(const Tensor<double>& t) {
  return {{"shape", t.shape()}, {"data", t.to_vector()}};
}

/// One training step (no update) and one two-user sampling run, with every
/// intermediate, as JSON.
inline void trace(const Run& run, std::size_t users = 2) {
  run.save_config();
  const auto d = load_dataset(run);
  const auto sch = load_schedules(run);
  const bool trained = fs::exists(run.path(kDenoiser));
  auto net = trained ? load_denoiser(run, d.locations()) : init_denoiser(run, d.locations());
  const std::size_t b_n = std::min(users, d.users()), len = d.length();
  Tensor<double> traffic({b_n, len});
  std::vector<std::size_t> traj;
  for (std::size_t u = 0; u < b_n; ++u) {
    std::copy(d.traffic.row(u).begin(), d.traffic.row(u).end(), traffic.row(u).begin());
    const auto t = d.user_trajectory(u);
    traj.insert(traj.end(), t.begin(), t.end());
  }
  Adam<float> opt(Adam<float>::Options{});
  Rng rng(run.cfg.train.seed);
  engine::TrainTrace tt;
  engine::train_step(net, opt, traffic, traj, sch.traffic, sch.trajectory,
                     {run.cfg.train.weights, run.cfg.feed_onehot, false}, rng, &tt);
  nlohmann::ordered_json tj{{"trained_model", trained},
                            {"steps", tt.steps},
                            {"w0", tensor_json(tt.w0)},
                            {"eps", tensor_json(tt.eps)},
                            {"w_s", tensor_json(tt.w_s)},
                            {"l0", tt.l0},
                            {"l_s", tt.l_s},
                            {"belief", tensor_json(tt.belief)},
                            {"net_belief", tensor_json(tt.net_belief)},
                            {"target_posterior", tensor_json(tt.target)},
                            {"eps_hat", tensor_json(tt.eps_hat)},
                            {"logits", tensor_json(tt.logits)},
                            {"model_posterior", tensor_json(tt.model_dist)},
                            {"loss",
                             {{"total", tt.loss.total},
                              {"l_tr", tt.loss.l_tr},
                              {"l_tj", tt.loss.l_tj},
                              {"l_pred", tt.loss.l_pred},
                              {"degenerate", tt.loss.degenerate}}}};
  fs::create_directories(run.path("trace"));
  std::ofstream(run.path("trace") / "train_step.json") << tj.dump() << "\n";

  auto sc = run.cfg.sample;
  sc.users = b_n;
  sc.chunk = b_n;
  sc.feed_onehot = run.cfg.feed_onehot;
  std::vector<engine::SampleStepRecord> steps;
  const auto res = engine::sample(net, sch.traffic, sch.trajectory, sc, &steps);
  nlohmann::ordered_json sj = nlohmann::ordered_json::array();
  for (const auto& r : steps) {
    sj.push_back({{"s", r.s},
                  {"l_s", r.l_s},
                  {"network_belief", tensor_json(r.network_belief)},
                  {"x0_probs", tensor_json(r.x0_probs)},
                  {"l0_hat", r.l0_hat},
                  {"posterior", tensor_json(r.posterior)},
                  {"p_l", tensor_json(r.p_l)},
                  {"l_next", r.l_next},
                  {"w_next_user0", r.w_next}});
  }
  nlohmann::ordered_json out{{"trained_model", trained},
                             {"steps", sj},
                             {"traffic", tensor_json(res.traffic)},
                             {"trajectory", res.trajectory}};
  std::ofstream(run.path("trace") / "sample.json") << out.dump() << "\n";
  run.note("trace: wrote " + (run.path("trace") / "train_step.json").string() + " and sample.json");
}

}  // namespace mstdiff::pipeline
