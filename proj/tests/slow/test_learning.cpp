// Learning-trend and CLI checks that take minutes rather than milliseconds.
// Registered under the ctest label "slow".

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mstdiff/mstdiff.hpp"

namespace fs = std::filesystem;
using namespace mstdiff;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mstdiff_slow_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(MSTDIFF_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Learning, VqPretrainHalvesReconstructionPerBand) {
  const auto d = dataio::synthesize({}).dataset;
  const auto res = vqvae::pretrain(wavelet::dwt3_rows(d.traffic), {});
  for (std::size_t k = 0; k < wavelet::kBands; ++k) {
    EXPECT_LE(res.report[k].final_rec, 0.5 * res.report[k].initial_rec) << "band " << k;
  }
}

TEST(Learning, TuckerSeparatesHeldOutTriples) {
  // A 24 x 24 city gives roughly 4000 triplets.
  ukg::CityLayout city;
  const std::size_t side = 24, n = side * side;
  city.coords = Tensor<double>({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    city.station_ids.push_back("bs_" + std::to_string(i));
    city.coords(i, 0) = 10.0 + 0.01 * static_cast<double>(i % side);
    city.coords(i, 1) = 45.0 + 0.01 * static_cast<double>(i / side);
    city.region.push_back((i % side) / 6 + 4 * ((i / side) / 6));
    city.category.push_back(i % city.poi_categories);
  }
  Rng rng(3);
  const auto kg = ukg::synthesize_graph(city, rng);
  EXPECT_GT(kg.triplets().size(), 3500u);
  const auto res = ukg::tucker_train(kg, {});
  EXPECT_GT(res.report.heldout_true_mean - res.report.heldout_corrupt_mean, 0.1);
}

TEST(Learning, DenoiserLossFallsOnFiftyUsers) {
  pipeline::Run run;
  run.dir = scratch("train");
  run.log = nullptr;
  run.cfg.set("synth.users=50");
  run.cfg.set("train.steps=2000");
  run.cfg.set("train.batch=8");
  pipeline::synth(run);
  pipeline::pretrain_vqvae(run);
  pipeline::train_kg(run);
  pipeline::build_schedule(run);
  pipeline::train(run);

  std::vector<double> loss;
  std::ifstream log(run.path(pipeline::kTrainLog));
  for (std::string line; std::getline(log, line);) loss.push_back(nlohmann::json::parse(line).at("total").get<double>());
  ASSERT_EQ(loss.size(), 2000u);
  auto mean = [&](std::size_t a) {
    double s = 0.0;
    for (std::size_t i = a; i < a + 100; ++i) s += loss[i];
    return s / 100.0;
  };
  EXPECT_LE(mean(1900), 0.7 * mean(0));
  fs::remove_all(run.dir);
}

TEST(Cli, EndToEndSmokeAndExitCodes) {
  const auto dir = scratch("cli");
  const std::string run = "--run " + (dir / "run").string() + " --quiet";
  const std::string tiny =
      " --set synth.users=12 --set vqvae.epochs=2 --set kg.epochs=2 --set schedule.steps=10 --set train.steps=3"
      " --set train.batch=4 --set sample.users=4 --set sample.chunk=2";
  ASSERT_EQ(cli("synth " + run + tiny), 0);
  for (const char* stage : {"pretrain-vqvae", "train-kg", "build-schedule", "train", "sample"})
    ASSERT_EQ(cli(std::string(stage) + " " + run), 0) << stage;
  EXPECT_TRUE(fs::exists(dir / "run" / "samples" / "generated_records.csv"));

  const auto data = (dir / "run").string();
  ASSERT_EQ(cli("evaluate --real " + data + " --gen " + data + " --out " + (dir / "self").string()), 0);
  std::ifstream f(dir / "self" / "report.json");
  const auto rep = nlohmann::json::parse(f);
  for (const auto& name : metrics::MetricsReport::names()) EXPECT_EQ(rep.at(name).get<double>(), 0.0) << name;

  EXPECT_EQ(cli("config --set nope=1"), 2);
  EXPECT_EQ(cli("train " + run + " --set train.steps=-3"), 2);
  EXPECT_EQ(cli("train --run " + (dir / "missing").string()), 3);
  EXPECT_EQ(cli("frobnicate"), 2);
  fs::remove_all(dir);
}
