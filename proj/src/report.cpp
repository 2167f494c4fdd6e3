#include "tokenprune/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "tokenprune/stats.hpp"

namespace tokenprune {

using nlohmann::json;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& column) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("report parse: bad value '" + s + "' in column " + column);
  }
}

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
  std::filesystem::path p = csv_path;
  p.replace_extension(".json");
  return p;
}

json aggregate_to_json(const AggregateRow& a) {
  return {{"mode", a.mode},
          {"ratio_requested", a.ratio_requested},
          {"K", a.skip_layers},
          {"lambda", a.lambda},
          {"G", a.n_estimator_layers},
          {"d_lowrank", a.d_lowrank},
          {"count", a.count},
          {"mean_ratio_realized", a.mean_ratio_realized},
          {"sd_ratio_realized", a.sd_ratio_realized},
          {"mean_pruning_accuracy", a.mean_pruning_accuracy},
          {"sd_pruning_accuracy", a.sd_pruning_accuracy},
          {"mean_spearman", a.mean_spearman},
          {"sd_spearman", a.sd_spearman},
          {"mean_flops_relative", a.mean_flops_relative},
          {"sd_flops_relative", a.sd_flops_relative}};
}

}  // namespace

std::vector<AggregateRow> Report::aggregates() const {
  using Key = std::tuple<std::string, double, int, double, int, int>;
  std::vector<Key> order;
  std::map<Key, std::vector<const ReportRow*>> groups;
  for (const ReportRow& r : rows) {
    Key key{r.mode, r.ratio_requested, r.skip_layers, r.lambda, r.n_estimator_layers, r.d_lowrank};
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(&r);
  }
  std::vector<AggregateRow> out;
  out.reserve(order.size());
  for (const Key& key : order) {
    const auto& members = groups[key];
    AggregateRow a;
    std::tie(a.mode, a.ratio_requested, a.skip_layers, a.lambda, a.n_estimator_layers, a.d_lowrank) = key;
    a.count = static_cast<int>(members.size());
    const auto collect = [&](auto member) {
      std::vector<double> v;
      v.reserve(members.size());
      for (const ReportRow* r : members) v.push_back(r->*member);
      return v;
    };
    const auto realized = collect(&ReportRow::ratio_realized);
    const auto accuracy = collect(&ReportRow::pruning_accuracy);
    const auto rho = collect(&ReportRow::spearman);
    const auto flops = collect(&ReportRow::flops_relative);
    a.mean_ratio_realized = mean(realized);
    a.sd_ratio_realized = stddev(realized);
    a.mean_pruning_accuracy = mean(accuracy);
    a.sd_pruning_accuracy = stddev(accuracy);
    a.mean_spearman = mean(rho);
    a.sd_spearman = stddev(rho);
    a.mean_flops_relative = mean(flops);
    a.sd_flops_relative = stddev(flops);
    out.push_back(std::move(a));
  }
  return out;
}

void write_report(const Report& report, const std::filesystem::path& csv_path) {
  if (report.rows.empty()) {
    throw std::invalid_argument("write_report: refusing to write a report with zero rows");
  }
  for (const ReportRow& r : report.rows) {
    if (r.mode.find(',') != std::string::npos) {
      throw std::invalid_argument("write_report: mode value may not contain commas: " + r.mode);
    }
  }
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("write_report: cannot open " + csv_path.string());
  out << kReportHeader << '\n';
  for (const ReportRow& r : report.rows) {
    out << r.scene_id << ',' << r.mode << ',' << format_double(r.ratio_requested) << ','
        << format_double(r.ratio_realized) << ',' << format_double(r.pruning_accuracy) << ','
        << format_double(r.spearman) << ',' << format_double(r.flops_relative) << ','
        << r.skip_layers << ',' << format_double(r.lambda) << ',' << r.n_estimator_layers << ','
        << r.d_lowrank << ',' << r.seed << '\n';
  }
  if (!out) throw std::runtime_error("write_report: write failed for " + csv_path.string());
  out.close();

  json side;
  side["config"] = report.config_echo;
  side["code_version"] = report.code_version;
  side["wall_clock_seconds"] = report.wall_clock_seconds;
  side["extra"] = report.extra;
  json aggs = json::array();
  for (const AggregateRow& a : report.aggregates()) aggs.push_back(aggregate_to_json(a));
  side["aggregates"] = std::move(aggs);
  std::ofstream sout(sidecar_path(csv_path));
  if (!sout) throw std::runtime_error("write_report: cannot open " + sidecar_path(csv_path).string());
  sout << side.dump(2);
  if (!sout) throw std::runtime_error("write_report: write failed for " + sidecar_path(csv_path).string());
}

Report read_report(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("read_report: cannot open " + csv_path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("read_report: empty file " + csv_path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();

  const std::vector<std::string> expected = split_csv_line(kReportHeader);
  const std::vector<std::string> header = split_csv_line(line);
  for (const std::string& col : expected) {
    if (std::find(header.begin(), header.end(), col) == header.end()) {
      throw std::runtime_error("read_report: header is missing column '" + col + "'");
    }
  }
  std::vector<int> index(expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    index[i] = static_cast<int>(std::find(header.begin(), header.end(), expected[i]) - header.begin());
  }

  Report report;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() < header.size()) {
      throw std::runtime_error("read_report: line " + std::to_string(line_no) + " has " +
                               std::to_string(f.size()) + " fields, header has " +
                               std::to_string(header.size()));
    }
    ReportRow r;
    r.scene_id = static_cast<int>(parse_double(f[index[0]], "scene_id"));
    r.mode = f[index[1]];
    r.ratio_requested = parse_double(f[index[2]], "ratio_requested");
    r.ratio_realized = parse_double(f[index[3]], "ratio_realized");
    r.pruning_accuracy = parse_double(f[index[4]], "pruning_accuracy");
    r.spearman = parse_double(f[index[5]], "spearman");
    r.flops_relative = parse_double(f[index[6]], "flops_relative");
    r.skip_layers = static_cast<int>(parse_double(f[index[7]], "K"));
    r.lambda = parse_double(f[index[8]], "lambda");
    r.n_estimator_layers = static_cast<int>(parse_double(f[index[9]], "G"));
    r.d_lowrank = static_cast<int>(parse_double(f[index[10]], "d_lowrank"));
    try {
      r.seed = static_cast<std::uint64_t>(std::stoull(f[index[11]]));
    } catch (const std::exception&) {
      throw std::runtime_error("report parse: bad value '" + f[index[11]] + "' in column seed");
    }
    report.rows.push_back(std::move(r));
  }

  const std::filesystem::path side = sidecar_path(csv_path);
  if (std::filesystem::exists(side)) {
    std::ifstream sin(side);
    if (!sin) throw std::runtime_error("read_report: cannot open " + side.string());
    json j = json::parse(sin);
    report.config_echo = j.value("config", json());
    report.code_version = j.value("code_version", "");
    report.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
    report.extra = j.value("extra", json());
  }
  return report;
}

}  // namespace tokenprune
