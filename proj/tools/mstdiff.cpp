// Command-line driver for the full pipeline.
//
// Exit codes: 0 success, 2 configuration error, 3 data/IO/contract error,
// 4 numeric error, 1 anything unexpected.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mstdiff/mstdiff.hpp"

namespace fs = std::filesystem;
using namespace mstdiff;

namespace {

struct Common {
  std::string run;
  std::string config;
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool need_run = true) {
  auto* r = cmd->add_option("--run", c.run,
                            "Run directory. Relative paths resolve against $MSTDIFF_RUN_ROOT when it is set.");
  if (need_run) r->required();
  cmd->add_option("--config", c.config, "JSON config file of flat dotted keys (see `mstdiff config`)");
  cmd->add_option("--set", c.sets, "Override one key, e.g. --set train.steps=500 (repeatable)");
  cmd->add_flag("--quiet", c.quiet, "Suppress progress output");
}

fs::path resolve_run(const std::string& run) {
  fs::path p(run);
  if (p.is_relative()) {
    if (const char* root = std::getenv("MSTDIFF_RUN_ROOT"); root && *root) p = fs::path(root) / p;
  }
  return p;
}

// Precedence: defaults < the run directory's saved config < --config < --set.
RunConfig resolve_config(const Common& c, const std::optional<fs::path>& run_dir) {
  RunConfig cfg;
  if (run_dir && fs::exists(*run_dir / pipeline::kConfig)) cfg = RunConfig::from_file(*run_dir / pipeline::kConfig);
  if (!c.config.empty()) {
    std::ifstream f(c.config);
    if (!f) throw ConfigError("cannot read config " + c.config);
    auto j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw ConfigError(c.config + ": not valid JSON");
    cfg.apply(j, c.config);
  }
  for (const auto& s : c.sets) cfg.set(s);
  return cfg;
}

pipeline::Run make_run(const Common& c) {
  pipeline::Run r;
  r.dir = resolve_run(c.run);
  r.cfg = resolve_config(c, r.dir);
  r.log = c.quiet ? nullptr : &std::cerr;
  return r;
}

fs::path dataset_path(const std::string& arg) {
  fs::path p = resolve_run(arg);
  if (fs::is_directory(p)) p /= pipeline::kDataset;
  return p;
}

int run_main(int argc, char** argv) {
  CLI::App app{"Joint mobile traffic and trajectory generation with hybrid diffusion"};
  app.require_subcommand(1);

  Common c;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic city, population and knowledge graph");
  add_common(synth, c);

  std::string records, stations;
  auto* ingest = app.add_subcommand("ingest", "Bin raw CSV records (user_id,timestamp,bs_id,lon,lat,volume) into a dataset");
  add_common(ingest, c);
  ingest->add_option("--records", records, "Record CSV")->required()->check(CLI::ExistingFile);
  ingest->add_option("--stations", stations, "Optional station table (bs_id,lon,lat) fixing the location set")
      ->check(CLI::ExistingFile);

  auto* vq = app.add_subcommand("pretrain-vqvae", "Pretrain one VQ-VAE per wavelet band");
  add_common(vq, c);
  auto* kg = app.add_subcommand("train-kg", "Train TuckER embeddings on the knowledge graph");
  add_common(kg, c);
  auto* sched = app.add_subcommand("build-schedule", "Build the location adjacency and discrete transition schedule");
  add_common(sched, c);
  auto* train = app.add_subcommand("train", "Train the joint denoiser");
  add_common(train, c);

  bool untrained = false;
  std::string out;
  auto* sample = app.add_subcommand("sample", "Co-generate traffic and trajectories");
  add_common(sample, c);
  sample->add_flag("--untrained", untrained, "Sample from the freshly initialised network (baseline)");
  sample->add_option("--out", out, "Output directory (default: <run>/samples or <run>/samples_untrained)");

  std::string real, gen;
  auto* eval = app.add_subcommand("evaluate", "Compare two datasets with the nine-metric suite");
  add_common(eval, c, false);
  eval->add_option("--real", real, "Reference dataset file or run directory")->required();
  eval->add_option("--gen", gen, "Generated dataset file or run directory")->required();
  eval->add_option("--out", out, "Report directory")->required();

  std::size_t trace_users = 2;
  auto* trace = app.add_subcommand("trace", "Dump one training step and one sampling run with all intermediates");
  add_common(trace, c);
  trace->add_option("--users", trace_users, "Users in the traced batch")->check(CLI::PositiveNumber);

  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  add_common(show, c, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (*synth) {
    pipeline::synth(make_run(c));
  } else if (*ingest) {
    pipeline::ingest(make_run(c), records, stations.empty() ? std::nullopt : std::optional<fs::path>(stations));
  } else if (*vq) {
    pipeline::pretrain_vqvae(make_run(c));
  } else if (*kg) {
    pipeline::train_kg(make_run(c));
  } else if (*sched) {
    pipeline::build_schedule(make_run(c));
  } else if (*train) {
    pipeline::train(make_run(c));
  } else if (*sample) {
    const auto r = make_run(c);
    const fs::path dir = out.empty() ? r.dir / (untrained ? "samples_untrained" : "samples") : fs::path(out);
    pipeline::sample(r, untrained, dir);
  } else if (*eval) {
    std::optional<fs::path> dir;
    if (!c.run.empty()) dir = resolve_run(c.run);
    const auto cfg = resolve_config(c, dir);
    const auto rd = dataio::load_dataset(dataset_path(real));
    const auto gd = dataio::load_dataset(dataset_path(gen));
    const auto e = pipeline::evaluate(cfg, rd, gd, out);
    std::cout << e.report.to_json().dump(2) << "\n";
    if (e.archetype)
      std::cout << "archetype agreement: real " << e.archetype->real << ", generated " << e.archetype->generated << "\n";
  } else if (*trace) {
    pipeline::trace(make_run(c), trace_users);
  } else if (*show) {
    std::optional<fs::path> dir;
    if (!c.run.empty()) dir = resolve_run(c.run);
    std::cout << resolve_config(c, dir).to_json().dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  pipeline::tune_allocator();
  try {
    return run_main(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const ScheduleError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
