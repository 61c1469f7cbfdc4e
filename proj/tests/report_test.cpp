#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "feder/report.hpp"
#include "test_util.hpp"

using namespace feder;
using namespace feder::report;

namespace {

fl::RoundReport sample_report(std::size_t round, bool prox) {
  fl::RoundReport r;
  r.strategy = prox ? "FedProx" : "FedERImproved";
  r.round = round;
  for (std::size_t k = 0; k < 2; ++k) {
    fl::ClientRoundStats c;
    c.client = k;
    c.samples = 40 + k;
    c.train_loss = 1.0 / 3.0 + static_cast<double>(k);
    c.train_accuracy = 0.1 * static_cast<double>(k + 1);
    if (prox) c.gamma = 0.123456789;
    c.effective_ranks = {{"conv1.weight", 1.7 + 1e-13}, {"fc.weight", 0.2}};
    c.alphas = {{"conv1.weight", 0.3}, {"conv1.bias", 0.7}};
    r.clients.push_back(c);
  }
  r.test_loss = 2.302585092994046;
  r.test_accuracy = 0.1875;
  r.q_er = round == 1 ? -std::numeric_limits<double>::infinity() : -0.5;
  if (round == 2) r.flags = {"precision_uniform:fc.bias", "x"};
  r.wall_time_ms = 12.5;
  return r;
}

void expect_same(const fl::RoundReport& a, const fl::RoundReport& b) {
  EXPECT_EQ(a.strategy, b.strategy);
  EXPECT_EQ(a.round, b.round);
  EXPECT_EQ(a.test_loss, b.test_loss);
  EXPECT_EQ(a.test_accuracy, b.test_accuracy);
  EXPECT_EQ(a.q_er, b.q_er);
  EXPECT_EQ(a.flags, b.flags);
  EXPECT_EQ(a.wall_time_ms, b.wall_time_ms);
  ASSERT_EQ(a.clients.size(), b.clients.size());
  for (std::size_t k = 0; k < a.clients.size(); ++k) {
    EXPECT_EQ(a.clients[k].client, b.clients[k].client);
    EXPECT_EQ(a.clients[k].samples, b.clients[k].samples);
    EXPECT_EQ(a.clients[k].train_loss, b.clients[k].train_loss);
    EXPECT_EQ(a.clients[k].train_accuracy, b.clients[k].train_accuracy);
    EXPECT_EQ(a.clients[k].gamma, b.clients[k].gamma);
    EXPECT_EQ(a.clients[k].effective_ranks, b.clients[k].effective_ranks);
    EXPECT_EQ(a.clients[k].alphas, b.clients[k].alphas);
  }
}

}  // namespace

TEST(Csv, RowsParseBackIntoReports) {
  const std::vector<fl::RoundReport> reports = {sample_report(1, false), sample_report(2, false),
                                                sample_report(1, true)};
  const auto csv = to_csv(reports);
  const auto back = parse_csv(csv);
  ASSERT_EQ(back.size(), reports.size());
  for (std::size_t i = 0; i < reports.size(); ++i) expect_same(back[i], reports[i]);
  EXPECT_EQ(to_csv(back), csv);
}

TEST(Csv, LayoutIsClientRowsThenGlobalRow) {
  const auto csv = to_csv({sample_report(1, false)});
  std::vector<std::string> lines;
  std::istringstream in(csv);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], kCsvHeader);
  EXPECT_NE(lines[1].find(",client,0,"), std::string::npos);
  EXPECT_NE(lines[2].find(",client,1,"), std::string::npos);
  EXPECT_NE(lines[3].find(",global,,81,"), std::string::npos);
  for (const auto& l : lines) EXPECT_EQ(std::count(l.begin(), l.end(), ','), 14);
}

TEST(Csv, StripWallTimeDropsLastColumnOnly) {
  auto a = sample_report(1, false);
  auto b = a;
  b.wall_time_ms = 999.0;
  EXPECT_NE(to_csv({a}), to_csv({b}));
  EXPECT_EQ(strip_wall_time(to_csv({a})), strip_wall_time(to_csv({b})));
  EXPECT_EQ(strip_wall_time(std::string(kCsvHeader) + "\n").find("wall_time_ms"), std::string::npos);
}

TEST(Csv, RejectsMalformedInput) {
  EXPECT_THROW(parse_csv("nope\n"), IoError);
  const auto csv = to_csv({sample_report(1, false)});
  // Drop the global row.
  const auto cut = csv.rfind("FedERImproved,1,global");
  EXPECT_THROW(parse_csv(csv.substr(0, cut)), IoError);
  auto bad = sample_report(1, false);
  bad.strategy = "a,b";
  EXPECT_THROW(to_csv({bad}), IoError);
}

TEST(FormatReal, ShortestRoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng) * std::pow(10.0, static_cast<double>(i % 20) - 10.0);
    EXPECT_EQ(parse_real(format_real(v), "x"), v);
  }
  EXPECT_EQ(format_real(0.5), "0.5");
  EXPECT_TRUE(std::isinf(parse_real(format_real(-INFINITY), "x")));
}

TEST(ParamsFile, RoundTripIsBitExact) {
  std::mt19937_64 rng(2);
  ModelParams p;
  p.layers.emplace_back("conv1.weight", std::vector<std::size_t>{3, 3, 3, 8});
  p.layers.emplace_back("conv1.bias", std::vector<std::size_t>{8});
  p.layers.emplace_back("fc.weight", std::vector<std::size_t>{10, 16});
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = testutil::random_like(p, rng);
    EXPECT_EQ(deserialize(serialize(q)), q);
  }
  const auto path = std::filesystem::temp_directory_path() / "feder_params_test.params";
  const auto q = testutil::random_like(p, rng);
  save(q, path.string());
  EXPECT_EQ(load(path.string()), q);
  std::filesystem::remove(path);
}

TEST(ParamsFile, RejectsCorruptInput) {
  ModelParams p{{Layer("w", {2}, {1.0, 2.0})}};
  auto bytes = serialize(p);
  EXPECT_EQ(bytes.substr(0, 8), "FEDERPRM");
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 1)), IoError);
  bytes[0] = 'X';
  EXPECT_THROW(deserialize(bytes), IoError);
  EXPECT_THROW(load("/nonexistent/dir/x.params"), IoError);
}
