#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tokenprune/report.hpp"
#include "tokenprune/rng.hpp"
#include "tokenprune/stats.hpp"

using namespace tokenprune;

namespace {

Report sample_report(int scenes) {
  Rng rng(70);
  Report r;
  for (int i = 0; i < scenes; ++i) {
    for (const char* mode : {"static", "adaptive"}) {
      ReportRow row;
      row.scene_id = i;
      row.mode = mode;
      row.ratio_requested = 0.35;
      row.ratio_realized = 0.3 + 0.1 * rng.uniform();
      row.pruning_accuracy = rng.uniform();
      row.spearman = 2.0 * rng.uniform() - 1.0;
      row.flops_relative = 0.4 + 0.5 * rng.uniform();
      row.skip_layers = 2;
      row.lambda = 0.2;
      row.n_estimator_layers = 2;
      row.d_lowrank = 16;
      row.seed = rng.next_u64();
      r.rows.push_back(std::move(row));
    }
  }
  r.config_echo = {{"seed", 1}, {"note", "test"}};
  r.wall_clock_seconds = 1.25;
  r.extra = {{"loss_history", {1.0, 0.5}}};
  return r;
}

}  // namespace

TEST_CASE("format_double round-trips doubles exactly") {
  Rng rng(71);
  for (int i = 0; i < 2000; ++i) {
    const double v = std::ldexp(rng.normal(), rng.uniform_int(60) - 30);
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
  CHECK(std::stod(format_double(0.0)) == 0.0);
}

TEST_CASE("report round-trips through CSV and sidecar") {
  const Report r = sample_report(5);
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = dir / "tokenprune_report_test.csv";
  write_report(r, path);
  const Report back = read_report(path);
  CHECK(back.rows == r.rows);
  CHECK(back.config_echo == r.config_echo);
  CHECK(back.code_version == r.code_version);
  CHECK(back.wall_clock_seconds == r.wall_clock_seconds);
  CHECK(back.extra == r.extra);
  std::filesystem::remove(path);
  std::filesystem::remove(dir / "tokenprune_report_test.json");
}

TEST_CASE("csv header is the pinned schema") {
  CHECK(std::string(kReportHeader) ==
        "scene_id,mode,ratio_requested,ratio_realized,pruning_accuracy,spearman,flops_relative,"
        "K,lambda,G,d_lowrank,seed");
  const Report r = sample_report(1);
  const auto path = std::filesystem::temp_directory_path() / "tokenprune_header_test.csv";
  write_report(r, path);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  CHECK(first == kReportHeader);
  std::filesystem::remove(path);
  std::filesystem::remove(std::filesystem::temp_directory_path() / "tokenprune_header_test.json");
}

TEST_CASE("malformed header names the missing column") {
  const auto path = std::filesystem::temp_directory_path() / "tokenprune_bad_header.csv";
  std::ofstream(path) << "scene_id,mode,ratio_requested,ratio_realized,pruning_accuracy,"
                         "flops_relative,K,lambda,G,d_lowrank,seed\n";
  CHECK_THROWS_WITH_AS(read_report(path), doctest::Contains("spearman"), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("reports with zero scenes are refused at write time") {
  Report empty;
  const auto path = std::filesystem::temp_directory_path() / "tokenprune_empty.csv";
  CHECK_THROWS_AS(write_report(empty, path), std::invalid_argument);
  CHECK(!std::filesystem::exists(path));
}

TEST_CASE("aggregates recompute exactly from rows") {
  const Report r = sample_report(7);
  const auto aggs = r.aggregates();
  REQUIRE(aggs.size() == 2);  // static and adaptive groups
  for (const AggregateRow& a : aggs) {
    std::vector<double> acc, rho;
    for (const ReportRow& row : r.rows) {
      if (row.mode == a.mode && row.ratio_requested == a.ratio_requested) {
        acc.push_back(row.pruning_accuracy);
        rho.push_back(row.spearman);
      }
    }
    CHECK(a.count == static_cast<int>(acc.size()));
    CHECK(std::abs(a.mean_pruning_accuracy - mean(acc)) <= 1e-12);
    CHECK(std::abs(a.sd_pruning_accuracy - stddev(acc)) <= 1e-12);
    CHECK(std::abs(a.mean_spearman - mean(rho)) <= 1e-12);
    CHECK(std::abs(a.sd_spearman - stddev(rho)) <= 1e-12);
  }
}
