#pragma once

// RoundReport <-> CSV.
//
// Every round produces one row per client (scope "client") followed by one
// row for the server model (scope "global"). Columns, in order:
//
//   strategy         aggregation strategy name
//   round            1-based round index
//   scope            client | global
//   client           client id (empty on global rows)
//   samples          shard size (global: sum over clients)
//   train_loss       client: loss of its trained params on its shard
//                    global: mean over clients
//   train_accuracy   as train_loss
//   test_loss        global only: aggregated model on the test split
//   test_accuracy    global only
//   gamma            client only, FedProx inexactness (empty otherwise)
//   q_er             global only, Q_ER of the aggregated model
//   effective_ranks  client only, "layer=er;layer=er" (raw, unfloored)
//   alphas           client only, "layer=alpha;..." for every layer
//   flags            global only, ';'-separated
//   wall_time_ms     global only; the one non-deterministic column
//
// Reals use the shortest representation that round-trips exactly.

#include <charconv>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "feder/error.hpp"
#include "feder/federation.hpp"

namespace feder::report {

inline constexpr std::string_view kCsvHeader =
    "strategy,round,scope,client,samples,train_loss,train_accuracy,test_loss,test_accuracy,gamma,q_er,"
    "effective_ranks,alphas,flags,wall_time_ms";

inline std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_real(std::string_view s, std::string_view column) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw IoError("CSV column '" + std::string(column) + "': cannot parse '" + std::string(s) + "' as a number");
  }
  return v;
}

inline std::size_t parse_count(std::string_view s, std::string_view column) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw IoError("CSV column '" + std::string(column) + "': cannot parse '" + std::string(s) + "' as a count");
  }
  return v;
}

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string join_pairs(const std::vector<std::pair<std::string, double>>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    if (!out.empty()) out += ';';
    out += k + '=' + format_real(v);
  }
  return out;
}

inline std::vector<std::pair<std::string, double>> parse_pairs(std::string_view s, std::string_view column) {
  std::vector<std::pair<std::string, double>> out;
  if (s.empty()) return out;
  for (auto item : split(s, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string_view::npos) throw IoError("CSV column '" + std::string(column) + "': missing '='");
    out.emplace_back(std::string(item.substr(0, eq)), parse_real(item.substr(eq + 1), column));
  }
  return out;
}

inline void check_field(std::string_view s) {
  if (s.find_first_of(",\n\r\"") != std::string_view::npos) {
    throw IoError("CSV field '" + std::string(s) + "' contains a reserved character");
  }
}

}  // namespace detail

inline std::string to_csv_rows(const fl::RoundReport& r) {
  detail::check_field(r.strategy);
  std::ostringstream out;
  const std::string prefix = r.strategy + ',' + std::to_string(r.round) + ',';
  std::size_t total = 0;
  double acc = 0.0;
  for (const auto& c : r.clients) {
    total += c.samples;
    acc += c.train_accuracy;
    const auto ers = detail::join_pairs(c.effective_ranks);
    const auto alphas = detail::join_pairs(c.alphas);
    detail::check_field(ers);
    detail::check_field(alphas);
    out << prefix << "client," << c.client << ',' << c.samples << ',' << format_real(c.train_loss) << ','
        << format_real(c.train_accuracy) << ",,," << (c.gamma ? format_real(*c.gamma) : "") << ",," << ers << ','
        << alphas << ",,\n";
  }
  std::string flags;
  for (const auto& f : r.flags) {
    detail::check_field(f);
    flags += (flags.empty() ? "" : ";") + f;
  }
  const double mean_acc = r.clients.empty() ? 0.0 : acc / static_cast<double>(r.clients.size());
  out << prefix << "global,," << total << ',' << format_real(r.mean_train_loss()) << ',' << format_real(mean_acc)
      << ',' << format_real(r.test_loss) << ',' << format_real(r.test_accuracy) << ",," << format_real(r.q_er)
      << ",,," << flags << ',' << format_real(r.wall_time_ms) << '\n';
  return out.str();
}

inline std::string to_csv(const std::vector<fl::RoundReport>& reports) {
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& r : reports) out += to_csv_rows(r);
  return out;
}

// Groups rows back into reports: client rows accumulate until the matching
// global row closes the round.
inline std::vector<fl::RoundReport> parse_csv(std::string_view text) {
  std::vector<fl::RoundReport> out;
  std::optional<fl::RoundReport> open;
  auto lines = detail::split(text, '\n');
  if (lines.empty() || lines.front() != kCsvHeader) throw IoError("CSV header does not match the round schema");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = lines[i];
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 15) throw IoError("CSV row " + std::to_string(i) + " has " + std::to_string(f.size()) + " columns");
    const std::string strategy(f[0]);
    const std::size_t round = parse_count(f[1], "round");
    if (!open) {
      open.emplace();
      open->strategy = strategy;
      open->round = round;
    } else if (open->strategy != strategy || open->round != round) {
      throw IoError("CSV row " + std::to_string(i) + " starts a new round before the global row");
    }
    if (f[2] == "client") {
      fl::ClientRoundStats c;
      c.client = parse_count(f[3], "client");
      c.samples = parse_count(f[4], "samples");
      c.train_loss = parse_real(f[5], "train_loss");
      c.train_accuracy = parse_real(f[6], "train_accuracy");
      if (!f[9].empty()) c.gamma = parse_real(f[9], "gamma");
      c.effective_ranks = detail::parse_pairs(f[11], "effective_ranks");
      c.alphas = detail::parse_pairs(f[12], "alphas");
      open->clients.push_back(std::move(c));
    } else if (f[2] == "global") {
      open->test_loss = parse_real(f[7], "test_loss");
      open->test_accuracy = parse_real(f[8], "test_accuracy");
      open->q_er = parse_real(f[10], "q_er");
      if (!f[13].empty()) {
        for (auto flag : detail::split(f[13], ';')) open->flags.emplace_back(flag);
      }
      open->wall_time_ms = parse_real(f[14], "wall_time_ms");
      out.push_back(std::move(*open));
      open.reset();
    } else {
      throw IoError("CSV row " + std::to_string(i) + ": unknown scope '" + std::string(f[2]) + "'");
    }
  }
  if (open) throw IoError("CSV ends inside a round (missing global row)");
  return out;
}

// Drops the wall_time_ms column so runs can be compared byte for byte.
inline std::string strip_wall_time(std::string_view csv) {
  std::string out;
  for (auto line : detail::split(csv, '\n')) {
    if (line.empty()) continue;
    const auto cut = line.rfind(',');
    out += line.substr(0, cut);
    out += '\n';
  }
  return out;
}

}  // namespace feder::report
