#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "mstdiff/checkpoint.hpp"
#include "mstdiff/dataio.hpp"
#include "mstdiff/denoiser.hpp"
#include "mstdiff/engine.hpp"
#include "mstdiff/metrics.hpp"
#include "mstdiff/ukg.hpp"
#include "mstdiff/vqvae.hpp"

namespace mstdiff {

struct AdjacencyConfig {
  std::size_t k_nn = 4;
  double distance_threshold_m = 3000.0;
  bool include_border_links = true;
};

struct TrafficScheduleConfig {
  double beta_start = 5e-4;
  double beta_end = 0.1;
};

struct BboxConfig {
  bool enabled = false;
  dataio::BoundingBox box;
};

/// Every tunable of a run, addressed by flat dotted keys ("train.steps").
///
/// Precedence: built-in defaults, then the config file, then `--set
/// key=value` flags. Unknown keys are rejected. The resolved config is
/// written into every run directory, so it alone reproduces a run.
struct RunConfig {
  dataio::SynthConfig synth;
  dataio::IngestConfig ingest;
  BboxConfig bbox;
  vqvae::VqvaeConfig vqvae;
  ukg::TuckerConfig kg;
  AdjacencyConfig adjacency;
  ukg::ScheduleConfig schedule;
  TrafficScheduleConfig traffic;
  denoiser::DenoiserConfig model;
  bool feed_onehot = true;  // network sees the sampled state l_s
  engine::TrainConfig train;
  std::size_t log_every = 50;
  engine::SampleConfig sample;
  metrics::MetricsConfig metrics;

  RunConfig() {
    // Desk-scale defaults chosen to fit the end-to-end budget on one core.
    model.d_model = 32;
    train.steps = 1500;
    // Spread the location corruption over the whole chain; at 1.15 almost
    // all of it lands in the last few dozen of 200 steps.
    schedule.growth = 1.03;
  }

  /// Calls f(key, field) for every field, in a fixed order.
  template <class Self, class F>
  static void visit(Self& c, F&& f) {
    f("synth.users", c.synth.users);
    f("synth.locations", c.synth.locations);
    f("synth.archetypes", c.synth.archetypes);
    f("synth.seed", c.synth.seed);
    f("synth.center_lon", c.synth.center_lon);
    f("synth.center_lat", c.synth.center_lat);
    f("synth.spacing_deg", c.synth.spacing_deg);
    f("synth.border_links", c.synth.border_links);
    f("data.week_start", c.ingest.week_start);
    f("data.slot_seconds", c.ingest.slot_seconds);
    f("data.series_length", c.ingest.slots);
    f("data.log1p", c.ingest.log1p);
    f("data.bbox.enabled", c.bbox.enabled);
    f("data.bbox.lon_min", c.bbox.box.lon_min);
    f("data.bbox.lon_max", c.bbox.box.lon_max);
    f("data.bbox.lat_min", c.bbox.box.lat_min);
    f("data.bbox.lat_max", c.bbox.box.lat_max);
    f("data.steps_per_day", c.model.steps_per_day);
    f("vqvae.hidden", c.vqvae.hidden);
    f("vqvae.latent", c.vqvae.latent);
    f("vqvae.codebook_size", c.vqvae.codebook_size);
    f("vqvae.beta", c.vqvae.beta);
    f("vqvae.epochs", c.vqvae.epochs);
    f("vqvae.batch", c.vqvae.batch);
    f("vqvae.lr", c.vqvae.lr);
    f("vqvae.holdout_fraction", c.vqvae.holdout_fraction);
    f("vqvae.seed", c.vqvae.seed);
    f("kg.entity_dim", c.kg.entity_dim);
    f("kg.relation_dim", c.kg.relation_dim);
    f("kg.epochs", c.kg.epochs);
    f("kg.batch", c.kg.batch);
    f("kg.lr", c.kg.lr);
    f("kg.init_sd", c.kg.init_sd);
    f("kg.holdout_fraction", c.kg.holdout_fraction);
    f("kg.seed", c.kg.seed);
    f("schedule.k_nn", c.adjacency.k_nn);
    f("schedule.distance_threshold_m", c.adjacency.distance_threshold_m);
    f("schedule.include_border_links", c.adjacency.include_border_links);
    f("schedule.steps", c.schedule.steps);
    f("schedule.uniformity", c.schedule.uniformity);
    f("schedule.growth", c.schedule.growth);
    f("schedule.alpha_cap", c.schedule.alpha_cap);
    f("schedule.beta_start", c.traffic.beta_start);
    f("schedule.beta_end", c.traffic.beta_end);
    f("model.d_model", c.model.d_model);
    f("model.heads", c.model.heads);
    f("model.blocks", c.model.blocks);
    f("model.ffn_mult", c.model.ffn_mult);
    f("model.step_dim", c.model.step_dim);
    f("model.head_source", c.model.head_source);
    f("model.self_attention", c.model.self_attention);
    f("model.feed_onehot", c.feed_onehot);
    f("train.steps", c.train.steps);
    f("train.batch", c.train.batch);
    f("train.lr", c.train.lr);
    f("train.clip_norm", c.train.clip_norm);
    f("train.lambda_tr", c.train.weights.tr);
    f("train.lambda_tj", c.train.weights.tj);
    f("train.lambda_pred", c.train.weights.pred);
    f("train.seed", c.train.seed);
    f("train.log_every", c.log_every);
    f("sample.users", c.sample.users);
    f("sample.chunk", c.sample.chunk);
    f("sample.seed", c.sample.seed);
    f("metrics.traffic_bins", c.metrics.traffic_bins);
    f("metrics.log_bins", c.metrics.log_bins);
    f("metrics.distinct_bins", c.metrics.distinct_bins);
    f("metrics.daily_harmonics", c.metrics.daily_harmonics);
    f("metrics.grank_by_identity", c.metrics.grank_by_identity);
    f("metrics.grank_fraction", c.metrics.grank_fraction);
    f("metrics.irank_depth", c.metrics.irank_depth);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    visit(*this, [&](const char* key, const auto& v) {
      using V = std::decay_t<decltype(v)>;
      if constexpr (std::is_same_v<V, denoiser::HeadSource>)
        j[key] = v == denoiser::HeadSource::Trunk ? "trunk" : "finest";
      else
        j[key] = v;
    });
    return j;
  }

  /// Applies the keys present in `j`; every key must be known.
  void apply(const nlohmann::json& j, const std::string& origin) {
    if (!j.is_object()) throw ConfigError(origin + ": config must be a flat JSON object of dotted keys");
    std::set<std::string> known;
    visit(*this, [&](const char* key, auto& v) {
      known.insert(key);
      auto it = j.find(key);
      if (it != j.end()) assign(v, *it, origin + ": " + key);
    });
    for (const auto& [k, _] : j.items())
      if (!known.count(k)) throw ConfigError(origin + ": unknown key '" + k + "'");
    validate();
  }

  /// `key=value` override; the value is parsed as JSON, falling back to a
  /// plain string.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
    if (v.is_discarded()) v = text;
    apply(nlohmann::json{{key, v}}, "--set");
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* key) {
      if (v == 0) throw ConfigError(std::string(key) + " must be positive");
    };
    positive(synth.users, "synth.users");
    positive(ingest.slots, "data.series_length");
    positive(model.d_model, "model.d_model");
    positive(model.heads, "model.heads");
    positive(schedule.steps, "schedule.steps");
    positive(train.batch, "train.batch");
    positive(sample.users, "sample.users");
    positive(sample.chunk, "sample.chunk");
    positive(adjacency.k_nn, "schedule.k_nn");
    if (ingest.slots % 16 != 0) throw ConfigError("data.series_length must be a multiple of 16");
    if (model.steps_per_day == 0 || ingest.slots % model.steps_per_day != 0)
      throw ConfigError("data.steps_per_day must divide data.series_length");
    if (model.d_model % model.heads != 0) throw ConfigError("model.d_model must be divisible by model.heads");
    if (!(traffic.beta_start > 0 && traffic.beta_end < 1 && traffic.beta_start <= traffic.beta_end))
      throw ConfigError("schedule.beta_start/beta_end must satisfy 0 < start <= end < 1");
    if (!(schedule.uniformity > 0 && schedule.growth >= 1.0)) throw ConfigError("schedule.uniformity > 0 and growth >= 1 required");
    if (train.weights.tr < 0 || train.weights.tj < 0 || train.weights.pred < 0) throw ConfigError("loss weights must be >= 0");
  }

  std::uint64_t hash() const { return io::fnv1a(to_json().dump()); }

  dataio::IngestConfig ingest_config() const {
    auto c = ingest;
    if (bbox.enabled) c.bbox = bbox.box;
    return c;
  }

  metrics::MetricsConfig metrics_config() const {
    auto m = metrics;
    m.series_length = ingest.slots;
    m.steps_per_day = model.steps_per_day;
    m.minutes_per_step = static_cast<double>(ingest.slot_seconds) / 60.0;
    return m;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw ConfigError(path.string() + ": not valid JSON");
    RunConfig c;
    c.apply(j, path.string());
    return c;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << to_json().dump(2) << "\n";
  }

 private:
  template <class V>
  static void assign(V& field, const nlohmann::json& v, const std::string& where) {
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + " expects true or false");
      field = v.get<bool>();
    } else if constexpr (std::is_same_v<V, denoiser::HeadSource>) {
      if (v == "trunk")
        field = denoiser::HeadSource::Trunk;
      else if (v == "finest")
        field = denoiser::HeadSource::Finest;
      else
        throw ConfigError(where + " expects \"trunk\" or \"finest\"");
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) throw ConfigError(where + " expects a number");
      field = v.get<V>();
    } else if constexpr (std::is_unsigned_v<V>) {
      if (!v.is_number_unsigned()) throw ConfigError(where + " expects a non-negative integer");
      field = v.get<V>();
    } else {
      static_assert(std::is_signed_v<V> && std::is_integral_v<V>);
      if (!v.is_number_integer()) throw ConfigError(where + " expects an integer");
      field = v.get<V>();
    }
  }
};

}  // namespace mstdiff
