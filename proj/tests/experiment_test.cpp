#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "feder/experiment.hpp"

using namespace feder;
using namespace feder::experiment;

namespace {

std::string key_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<no error>";
}

ExperimentConfig tiny(std::vector<fl::Strategy> strategies) {
  ExperimentConfig c;
  c.federation.rounds = 1;
  c.federation.clients = 1;
  c.data.classes = 2;
  c.data.samples_per_class = 12;
  c.data.test_fraction = 1.0 / 6.0;  // 2 test samples per class, 20 train
  c.strategies = std::move(strategies);
  return c;
}

}  // namespace

TEST(ParseConfig, EmptyGivesDefaults) {
  for (const char* text : {"", "  \n", "{}"}) {
    const auto c = parse_config(text);
    EXPECT_EQ(c.federation.clients, 4u);
    EXPECT_EQ(c.federation.rounds, 20u);
    EXPECT_EQ(c.federation.batch_size, 32u);
    EXPECT_EQ(c.federation.optimizer.learning_rate, 1e-3);
    EXPECT_EQ(c.federation.optimizer.weight_decay, 1e-4);
    EXPECT_EQ(c.federation.er_floor, 1e-3);
    EXPECT_EQ(c.federation.schedule.kind, nn::LrSchedule::Kind::none);
    EXPECT_EQ(c.federation.schedule.step_size, 25u);
    EXPECT_EQ(c.federation.schedule.decay, 0.5);
    EXPECT_EQ(c.strategies, (std::vector<fl::Strategy>{fl::Strategy::fed_avg}));
  }
}

TEST(ParseConfig, RoundTripsThroughSerialize) {
  const auto c = parse_config(R"({"strategy": "FedERImproved", "er_floor": 0.001})");
  EXPECT_EQ(c.federation.strategy, fl::Strategy::fed_er_improved);
  EXPECT_EQ(c.federation.er_floor, 0.001);
  const auto text = serialize_config(c);
  EXPECT_EQ(serialize_config(parse_config(text)), text);

  const auto d = parse_config(R"({"strategies": ["FedAvg", "FedProx"], "prox_mu": 0.5, "optimizer": "Adam",
                                  "scheduler": "StepLR", "partition": "dirichlet", "dirichlet_beta": 0.3,
                                  "noise_mode": "analytic", "dense_own_er": true, "seed": 17})");
  const auto e = parse_config(serialize_config(d));
  EXPECT_EQ(e.strategies, d.strategies);
  EXPECT_EQ(e.federation.prox_mu, 0.5);
  EXPECT_EQ(e.federation.optimizer.kind, nn::OptimizerKind::adam);
  EXPECT_EQ(e.federation.schedule.kind, nn::LrSchedule::Kind::step);
  EXPECT_EQ(e.data.partition.kind, data::PartitionMode::Kind::dirichlet);
  EXPECT_EQ(e.data.partition.beta, 0.3);
  EXPECT_EQ(e.federation.noise_mode, metrics::NoiseMode::analytic);
  EXPECT_TRUE(e.federation.dense_own_er);
  EXPECT_EQ(e.federation.seed, 17u);
}

TEST(ParseConfig, ErrorsNameTheKey) {
  EXPECT_EQ(key_of(R"({"lr": "abc"})"), "lr");
  EXPECT_EQ(key_of(R"({"learning_rate": 0.1})"), "learning_rate");
  EXPECT_EQ(key_of(R"({"clients": 0})"), "clients");
  EXPECT_EQ(key_of(R"({"clients": -2})"), "clients");
  EXPECT_EQ(key_of(R"({"rounds": 1.5})"), "rounds");
  EXPECT_EQ(key_of(R"({"strategy": "FedMagic"})"), "strategy");
  EXPECT_EQ(key_of(R"({"strategies": ["FedProx"], "prox_mu": 0})"), "prox_mu");
  EXPECT_EQ(key_of(R"({"er_floor": 0})"), "er_floor");
  EXPECT_EQ(key_of(R"({"decay": 2.0})"), "decay");
  EXPECT_EQ(key_of(R"({"dense_own_er": 1})"), "dense_own_er");
  EXPECT_EQ(key_of("[1, 2]"), "<root>");
  EXPECT_EQ(key_of("{"), "<root>");
}

TEST(RunExperiment, TinyRunEmitsOneRoundPerStrategy) {
  const auto c = tiny({fl::Strategy::fed_avg, fl::Strategy::fed_er_improved});
  const auto r = run_experiment(c);
  ASSERT_EQ(r.runs.size(), 2u);
  const auto reports = report::parse_csv(r.csv);
  ASSERT_EQ(reports.size(), 2u);
  for (const auto& rep : reports) {
    EXPECT_EQ(rep.round, 1u);
    ASSERT_EQ(rep.clients.size(), 1u);
    EXPECT_EQ(rep.clients[0].samples, 20u);
  }
  // Header, then one client row and one global row per strategy.
  EXPECT_EQ(std::count(r.csv.begin(), r.csv.end(), '\n'), 5);
  EXPECT_EQ(std::count(r.csv.begin(), r.csv.end(), '\n') - 1, 2 * 2);
}

TEST(RunExperiment, DeterministicApartFromWallTime) {
  auto c = tiny({fl::Strategy::fed_avg, fl::Strategy::precision, fl::Strategy::fed_prox});
  c.federation.clients = 2;
  c.federation.rounds = 2;
  c.federation.optimizer.learning_rate = 0.05;
  const auto a = run_experiment(c);
  c.federation.workers = 2;
  const auto b = run_experiment(c);
  EXPECT_EQ(report::strip_wall_time(a.csv), report::strip_wall_time(b.csv));
  for (std::size_t i = 0; i < a.runs.size(); ++i) EXPECT_EQ(a.runs[i].final_params, b.runs[i].final_params);
}

TEST(RunExperiment, SummaryDifferencesMatchAccuracies) {
  auto c = tiny({fl::Strategy::fed_avg, fl::Strategy::fed_er_naive, fl::Strategy::fed_er_improved});
  c.federation.clients = 2;
  c.federation.optimizer.learning_rate = 0.05;
  const auto r = run_experiment(c);
  const auto j = nlohmann::json::parse(r.summary_json);
  std::map<std::string, double> acc;
  for (const auto& s : j.at("strategies")) acc[s.at("name")] = s.at("final_test_accuracy").get<double>();
  ASSERT_EQ(j.at("differences").size(), 3u);
  for (const auto& d : j.at("differences")) {
    EXPECT_EQ(d.at("difference").get<double>(), acc.at(d.at("strategy")) - acc.at(d.at("baseline")));
  }
}

TEST(RunExperiment, WritesOutputFiles) {
  auto c = tiny({fl::Strategy::fed_er_improved});
  const auto dir = std::filesystem::temp_directory_path() / "feder_experiment_test";
  std::filesystem::remove_all(dir);
  c.output_dir = dir.string();
  const auto r = run_experiment(c);
  for (const char* f : {"rounds.csv", "summary.json", "config.json", "final_FedERImproved.params"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  std::ifstream in(dir / "rounds.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), r.csv);
  EXPECT_EQ(load((dir / "final_FedERImproved.params").string()), r.runs[0].final_params);
  std::filesystem::remove_all(dir);
}

TEST(PrintTable, OneRowPerStrategy) {
  auto c = tiny({fl::Strategy::fed_avg, fl::Strategy::fed_er_improved});
  const auto r = run_experiment(c);
  std::ostringstream out;
  print_table(r.runs, out);
  const auto text = out.str();
  EXPECT_NE(text.find("FedAvg"), std::string::npos);
  EXPECT_NE(text.find("FedERImproved"), std::string::npos);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
