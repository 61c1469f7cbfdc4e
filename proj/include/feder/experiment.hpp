#pragma once

// Config-driven experiments: parse a JSON config, run every requested
// strategy on the same data partition and initial model, write per-round CSV
// and a JSON summary.
//
// The config is one flat JSON object; every key is optional.
//
//   key                type     default        meaning
//   clients            int      4              K
//   rounds             int      20             T
//   local_epochs       int      1              E
//   batch_size         int      32             mini-batch size
//   strategy           string   "FedAvg"       FedAvg | FedERNaive |
//                                              FedERImproved | Precision |
//                                              FedProx
//   strategies         [string] [strategy]     strategies to compare
//   er_floor           real     0.001          FedER effective-rank floor
//   prox_mu            real     0.01           FedProx mu
//   unfold_mode        int      4              conv unfolding mode 1..4
//   noise_mode         string   "off"          off | analytic
//   dense_own_er       bool     false          FedERImproved dense weighting
//   fedavg_weighting   string   "samples"      samples | uniform
//   seed               int      0
//   workers            int      1              client worker threads
//   optimizer          string   "SGD"          SGD | Adam
//   lr                 real     0.001
//   weight_decay       real     0.0001
//   beta1, beta2       real     0.9, 0.999
//   epsilon            real     1e-8
//   scheduler          string   "none"         none | StepLR
//   step_size          int      25             StepLR step (epochs)
//   decay              real     0.5            StepLR factor
//   classes            int      10
//   channels           int      3
//   height, width      int      8, 8
//   samples_per_class  int      200
//   test_fraction      real     0.2            held-out share of each class
//   noise_std          real     8.0            per-sample noise of the blobs
//   partition          string   "iid"          iid | dirichlet
//   dirichlet_beta     real     0.5
//   client_data        string   "disjoint"     disjoint | full_copy
//   conv1_channels     int      8
//   conv2_channels     int      16
//   kernel             int      3
//   output_dir         string   ""             no files written when empty

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "feder/data.hpp"
#include "feder/error.hpp"
#include "feder/federation.hpp"
#include "feder/nn.hpp"
#include "feder/params.hpp"
#include "feder/report.hpp"

namespace feder::experiment {

enum class ClientData { disjoint, full_copy };

struct DataConfig {
  std::size_t classes = 10;
  std::size_t channels = 3;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t samples_per_class = 200;
  double test_fraction = 0.2;
  data::BlobOptions blobs;
  data::PartitionMode partition = data::PartitionMode::iid();
  ClientData client_data = ClientData::disjoint;
};

inline fl::FederationConfig default_federation() {
  fl::FederationConfig f;
  f.prox_mu = 0.01;
  return f;
}

struct ExperimentConfig {
  fl::FederationConfig federation = default_federation();
  DataConfig data;
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t kernel = 3;
  std::string output_dir;
  std::vector<fl::Strategy> strategies = {fl::Strategy::fed_avg};

  nn::MicroConvNetConfig model_config() const {
    return {data.channels, data.height, data.width, data.classes, conv1_channels, conv2_channels, kernel};
  }
};

namespace detail {

using nlohmann::json;

class Reader {
public:
  explicit Reader(const json& j) : j_(j) {
    if (!j_.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    for (const auto& [key, _] : j_.items()) {
      if (!known().contains(key)) throw ConfigError(key, "unknown key");
    }
  }

  template <class T>
  void get(const char* key, T& out) const {
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key, "expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(key, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
          throw ConfigError(key, "expected a non-negative integer");
        }
      }
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(key, "expected a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError(key, "expected a string");
      out = v.get<std::string>();
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) const { return j_.at(key); }

  static const std::set<std::string>& known() {
    static const std::set<std::string> keys = {
        "clients",    "rounds",        "local_epochs",   "batch_size",     "strategy",    "strategies",
        "er_floor",   "prox_mu",       "unfold_mode",    "noise_mode",     "dense_own_er", "fedavg_weighting",
        "seed",       "workers",       "optimizer",      "lr",             "weight_decay", "beta1",
        "beta2",      "epsilon",       "scheduler",      "step_size",      "decay",       "classes",
        "channels",   "height",        "width",          "samples_per_class", "test_fraction", "noise_std",
        "partition",  "dirichlet_beta", "client_data",   "conv1_channels", "conv2_channels", "kernel",
        "output_dir"};
    return keys;
  }

private:
  const json& j_;
};

inline fl::Strategy strategy_or_throw(const std::string& name, const char* key) {
  if (auto s = fl::parse_strategy(name)) return *s;
  throw ConfigError(key, "unknown strategy '" + name + "'");
}

template <class F>
void check(bool ok, const char* key, F&& message) {
  if (!ok) throw ConfigError(key, message());
}

inline void validate(const ExperimentConfig& c) {
  const auto& f = c.federation;
  check(f.clients >= 1, "clients", [] { return "must be >= 1"; });
  check(f.rounds >= 1, "rounds", [] { return "must be >= 1"; });
  check(f.batch_size >= 1, "batch_size", [] { return "must be >= 1"; });
  check(f.er_floor > 0.0, "er_floor", [] { return "must be > 0"; });
  check(f.prox_mu >= 0.0, "prox_mu", [] { return "must be >= 0"; });
  const bool uses_prox = std::find(c.strategies.begin(), c.strategies.end(), fl::Strategy::fed_prox) != c.strategies.end();
  check(!uses_prox || f.prox_mu > 0.0, "prox_mu", [] { return "must be > 0 when FedProx is compared"; });
  check(f.unfold_mode >= 1 && f.unfold_mode <= 4, "unfold_mode", [] { return "must be in 1..4"; });
  check(f.workers >= 1, "workers", [] { return "must be >= 1"; });
  check(f.optimizer.learning_rate >= 0.0 && std::isfinite(f.optimizer.learning_rate), "lr", [] { return "must be >= 0"; });
  check(f.optimizer.weight_decay >= 0.0, "weight_decay", [] { return "must be >= 0"; });
  check(f.optimizer.beta1 > 0.0 && f.optimizer.beta1 < 1.0, "beta1", [] { return "must lie in (0, 1)"; });
  check(f.optimizer.beta2 > 0.0 && f.optimizer.beta2 < 1.0, "beta2", [] { return "must lie in (0, 1)"; });
  check(f.optimizer.epsilon > 0.0, "epsilon", [] { return "must be > 0"; });
  check(f.schedule.step_size >= 1, "step_size", [] { return "must be >= 1"; });
  check(f.schedule.decay > 0.0 && f.schedule.decay <= 1.0, "decay", [] { return "must lie in (0, 1]"; });
  const auto& d = c.data;
  check(d.classes >= 1, "classes", [] { return "must be >= 1"; });
  check(d.channels >= 1, "channels", [] { return "must be >= 1"; });
  check(d.samples_per_class >= 1, "samples_per_class", [] { return "must be >= 1"; });
  check(d.test_fraction >= 0.0 && d.test_fraction < 1.0, "test_fraction", [] { return "must lie in [0, 1)"; });
  check(d.blobs.noise_std >= 0.0, "noise_std", [] { return "must be >= 0"; });
  check(d.partition.beta > 0.0, "dirichlet_beta", [] { return "must be > 0"; });
  check(c.conv1_channels >= 1, "conv1_channels", [] { return "must be >= 1"; });
  check(c.conv2_channels >= 1, "conv2_channels", [] { return "must be >= 1"; });
  check(c.kernel >= 1, "kernel", [] { return "must be >= 1"; });
  check(d.height >= 2 * c.kernel - 1, "height", [] { return "too small for two stacked kernels"; });
  check(d.width >= 2 * c.kernel - 1, "width", [] { return "too small for two stacked kernels"; });
  check(!c.strategies.empty(), "strategies", [] { return "must name at least one strategy"; });
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  using nlohmann::json;
  ExperimentConfig c;
  const bool blank = std::all_of(text.begin(), text.end(), [](unsigned char ch) { return std::isspace(ch); });
  json j = json::object();
  if (!blank) {
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
    }
  }
  const detail::Reader in(j);
  auto& f = c.federation;
  in.get("clients", f.clients);
  in.get("rounds", f.rounds);
  in.get("local_epochs", f.local_epochs);
  in.get("batch_size", f.batch_size);
  std::string s;
  if (in.has("strategy")) {
    in.get("strategy", s);
    f.strategy = detail::strategy_or_throw(s, "strategy");
  }
  c.strategies = {f.strategy};
  if (in.has("strategies")) {
    const auto& arr = in.raw("strategies");
    if (!arr.is_array()) throw ConfigError("strategies", "expected an array of strategy names");
    c.strategies.clear();
    for (const auto& item : arr) {
      if (!item.is_string()) throw ConfigError("strategies", "expected an array of strategy names");
      c.strategies.push_back(detail::strategy_or_throw(item.get<std::string>(), "strategies"));
    }
  }
  in.get("er_floor", f.er_floor);
  in.get("prox_mu", f.prox_mu);
  in.get("unfold_mode", f.unfold_mode);
  if (in.has("noise_mode")) {
    in.get("noise_mode", s);
    if (s == "off") f.noise_mode = metrics::NoiseMode::off;
    else if (s == "analytic") f.noise_mode = metrics::NoiseMode::analytic;
    else throw ConfigError("noise_mode", "expected 'off' or 'analytic'");
  }
  in.get("dense_own_er", f.dense_own_er);
  if (in.has("fedavg_weighting")) {
    in.get("fedavg_weighting", s);
    if (s == "samples") f.fedavg_weighting = fl::SampleWeighting::samples;
    else if (s == "uniform") f.fedavg_weighting = fl::SampleWeighting::uniform;
    else throw ConfigError("fedavg_weighting", "expected 'samples' or 'uniform'");
  }
  in.get("seed", f.seed);
  in.get("workers", f.workers);
  if (in.has("optimizer")) {
    in.get("optimizer", s);
    if (s == "SGD") f.optimizer.kind = nn::OptimizerKind::sgd;
    else if (s == "Adam") f.optimizer.kind = nn::OptimizerKind::adam;
    else throw ConfigError("optimizer", "expected 'SGD' or 'Adam'");
  }
  in.get("lr", f.optimizer.learning_rate);
  in.get("weight_decay", f.optimizer.weight_decay);
  in.get("beta1", f.optimizer.beta1);
  in.get("beta2", f.optimizer.beta2);
  in.get("epsilon", f.optimizer.epsilon);
  if (in.has("scheduler")) {
    in.get("scheduler", s);
    if (s == "none") f.schedule.kind = nn::LrSchedule::Kind::none;
    else if (s == "StepLR") f.schedule.kind = nn::LrSchedule::Kind::step;
    else throw ConfigError("scheduler", "expected 'none' or 'StepLR'");
  }
  in.get("step_size", f.schedule.step_size);
  in.get("decay", f.schedule.decay);
  auto& d = c.data;
  in.get("classes", d.classes);
  in.get("channels", d.channels);
  in.get("height", d.height);
  in.get("width", d.width);
  in.get("samples_per_class", d.samples_per_class);
  in.get("test_fraction", d.test_fraction);
  in.get("noise_std", d.blobs.noise_std);
  if (in.has("partition")) {
    in.get("partition", s);
    if (s == "iid") d.partition.kind = data::PartitionMode::Kind::iid;
    else if (s == "dirichlet") d.partition.kind = data::PartitionMode::Kind::dirichlet;
    else throw ConfigError("partition", "expected 'iid' or 'dirichlet'");
  }
  in.get("dirichlet_beta", d.partition.beta);
  if (in.has("client_data")) {
    in.get("client_data", s);
    if (s == "disjoint") d.client_data = ClientData::disjoint;
    else if (s == "full_copy") d.client_data = ClientData::full_copy;
    else throw ConfigError("client_data", "expected 'disjoint' or 'full_copy'");
  }
  in.get("conv1_channels", c.conv1_channels);
  in.get("conv2_channels", c.conv2_channels);
  in.get("kernel", c.kernel);
  in.get("output_dir", c.output_dir);
  detail::validate(c);
  return c;
}

inline std::string serialize_config(const ExperimentConfig& c) {
  const auto& f = c.federation;
  const auto& d = c.data;
  nlohmann::ordered_json j;
  j["clients"] = f.clients;
  j["rounds"] = f.rounds;
  j["local_epochs"] = f.local_epochs;
  j["batch_size"] = f.batch_size;
  j["strategy"] = std::string(fl::to_string(f.strategy));
  j["strategies"] = nlohmann::json::array();
  for (auto s : c.strategies) j["strategies"].push_back(std::string(fl::to_string(s)));
  j["er_floor"] = f.er_floor;
  j["prox_mu"] = f.prox_mu;
  j["unfold_mode"] = f.unfold_mode;
  j["noise_mode"] = f.noise_mode == metrics::NoiseMode::off ? "off" : "analytic";
  j["dense_own_er"] = f.dense_own_er;
  j["fedavg_weighting"] = f.fedavg_weighting == fl::SampleWeighting::samples ? "samples" : "uniform";
  j["seed"] = f.seed;
  j["workers"] = f.workers;
  j["optimizer"] = f.optimizer.kind == nn::OptimizerKind::sgd ? "SGD" : "Adam";
  j["lr"] = f.optimizer.learning_rate;
  j["weight_decay"] = f.optimizer.weight_decay;
  j["beta1"] = f.optimizer.beta1;
  j["beta2"] = f.optimizer.beta2;
  j["epsilon"] = f.optimizer.epsilon;
  j["scheduler"] = f.schedule.kind == nn::LrSchedule::Kind::none ? "none" : "StepLR";
  j["step_size"] = f.schedule.step_size;
  j["decay"] = f.schedule.decay;
  j["classes"] = d.classes;
  j["channels"] = d.channels;
  j["height"] = d.height;
  j["width"] = d.width;
  j["samples_per_class"] = d.samples_per_class;
  j["test_fraction"] = d.test_fraction;
  j["noise_std"] = d.blobs.noise_std;
  j["partition"] = d.partition.kind == data::PartitionMode::Kind::iid ? "iid" : "dirichlet";
  j["dirichlet_beta"] = d.partition.beta;
  j["client_data"] = d.client_data == ClientData::disjoint ? "disjoint" : "full_copy";
  j["conv1_channels"] = c.conv1_channels;
  j["conv2_channels"] = c.conv2_channels;
  j["kernel"] = c.kernel;
  j["output_dir"] = c.output_dir;
  return j.dump(2) + "\n";
}

struct StrategyRun {
  fl::Strategy strategy;
  std::vector<fl::RoundReport> reports;
  ModelParams final_params;
};

struct ExperimentResult {
  std::vector<StrategyRun> runs;
  std::string csv;
  std::string summary_json;
};

// Summary: final metrics per strategy and, for every strategy after the
// first, its accuracy difference against each earlier one.
inline std::string make_summary(const std::vector<StrategyRun>& runs) {
  nlohmann::ordered_json j;
  j["strategies"] = nlohmann::json::array();
  for (const auto& r : runs) {
    nlohmann::ordered_json s;
    s["name"] = std::string(fl::to_string(r.strategy));
    s["rounds"] = r.reports.size();
    s["final_test_accuracy"] = r.reports.back().test_accuracy;
    s["final_test_loss"] = r.reports.back().test_loss;
    s["first_round_train_loss"] = r.reports.front().mean_train_loss();
    s["final_train_loss"] = r.reports.back().mean_train_loss();
    s["final_q_er"] = r.reports.back().q_er;
    j["strategies"].push_back(s);
  }
  j["differences"] = nlohmann::json::array();
  for (std::size_t a = 1; a < runs.size(); ++a) {
    for (std::size_t b = 0; b < a; ++b) {
      nlohmann::ordered_json diff;
      diff["strategy"] = std::string(fl::to_string(runs[a].strategy));
      diff["baseline"] = std::string(fl::to_string(runs[b].strategy));
      diff["difference"] = runs[a].reports.back().test_accuracy - runs[b].reports.back().test_accuracy;
      j["differences"].push_back(diff);
    }
  }
  return j.dump(2) + "\n";
}

inline void print_table(const std::vector<StrategyRun>& runs, std::ostream& out) {
  out << std::left << std::setw(16) << "Strategy" << std::right << std::setw(16) << "Top-1 Test Acc"
      << std::setw(14) << "Difference" << std::setw(12) << "Test Loss" << '\n';
  const double base = runs.front().reports.back().test_accuracy;
  out << std::fixed << std::setprecision(2);
  for (const auto& r : runs) {
    const auto& last = r.reports.back();
    out << std::left << std::setw(16) << fl::to_string(r.strategy) << std::right << std::setw(16)
        << 100.0 * last.test_accuracy << std::setw(14) << 100.0 * (last.test_accuracy - base) << std::setw(12)
        << std::setprecision(4) << last.test_loss << std::setprecision(2) << '\n';
  }
  out << std::defaultfloat;
}

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open '" + p.string() + "' for writing");
  f << content;
  if (!f) throw IoError("write to '" + p.string() + "' failed");
}

}  // namespace detail

// Runs every configured strategy from the same data, partition and initial
// server model. Files (when output_dir is set): rounds.csv, summary.json,
// config.json, final_<strategy>.params.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  detail::validate(cfg);
  const auto& d = cfg.data;
  const auto full = data::generate_blobs(cfg.federation.seed, d.classes, d.channels, d.height, d.width,
                                         d.samples_per_class, d.blobs);
  auto [train, test] = data::split_holdout(full, d.test_fraction);
  if (test.size() == 0) test = train;

  data::PartitionPlan plan;
  if (d.client_data == ClientData::full_copy) {
    std::vector<std::size_t> all(train.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    plan.client_indices.assign(cfg.federation.clients, all);
  } else {
    plan = data::partition(train, cfg.federation.clients, d.partition, cfg.federation.seed);
  }

  const nn::MicroConvNet model(cfg.model_config());
  const ModelParams init = model.init(cfg.federation.seed);

  ExperimentResult result;
  for (auto strategy : cfg.strategies) {
    auto fc = cfg.federation;
    fc.strategy = strategy;
    fc.validate();
    std::vector<fl::ClientState> clients;
    for (std::size_t k = 0; k < fc.clients; ++k) clients.push_back(fl::make_client(k, plan.client_indices[k], init, fc));
    StrategyRun run{strategy, {}, init};
    for (std::size_t t = 1; t <= fc.rounds; ++t) {
      auto rr = fl::run_round(model, run.final_params, clients, train, test, fc, t);
      run.final_params = std::move(rr.params);
      if (log) {
        *log << fl::to_string(strategy) << " round " << t << ": train_loss " << rr.report.mean_train_loss()
             << ", test_acc " << rr.report.test_accuracy << '\n';
      }
      run.reports.push_back(std::move(rr.report));
    }
    result.runs.push_back(std::move(run));
  }

  std::vector<fl::RoundReport> all_reports;
  for (const auto& r : result.runs) all_reports.insert(all_reports.end(), r.reports.begin(), r.reports.end());
  result.csv = report::to_csv(all_reports);
  result.summary_json = make_summary(result.runs);

  if (!cfg.output_dir.empty()) {
    const std::filesystem::path dir(cfg.output_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
    detail::write_file(dir / "rounds.csv", result.csv);
    detail::write_file(dir / "summary.json", result.summary_json);
    detail::write_file(dir / "config.json", serialize_config(cfg));
    for (const auto& r : result.runs) {
      save(r.final_params, (dir / ("final_" + std::string(fl::to_string(r.strategy)) + ".params")).string());
    }
  }
  return result;
}

}  // namespace feder::experiment
